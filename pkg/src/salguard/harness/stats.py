"""Label-conditioned saliency statistics and the equal-width bin curve."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as sps

from ..errors import InsufficientDataError
from .labels import CORRECT, HALLUCINATED

MIN_PER_CLASS = 30


@dataclass
class ClassSummary:
    mean: float
    std: float
    count: int


@dataclass
class Bin:
    index: int
    lo: float
    hi: float
    count: int
    hallucinated: int
    rate: Optional[float]  # None when the bin is empty

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass
class StatsReport:
    classes: dict = field(default_factory=dict)  # label -> ClassSummary
    welch_t: Optional[float] = None
    welch_p: Optional[float] = None
    bins: list = field(default_factory=list)
    spearman_rho: Optional[float] = None
    spearman_p: Optional[float] = None
    high_saliency_hallucination_pct: Optional[float] = None
    prompt_saliency: dict = field(default_factory=dict)  # label -> mean

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = {k: asdict(v) for k, v in self.classes.items()}
        return d


def _ordered(labels) -> list:
    """Scored content labels in a canonical order, so reductions are order-stable."""
    keep = [l for l in labels if l.label in (CORRECT, HALLUCINATED) and l.saliency_prev is not None]
    return sorted(keep, key=lambda l: (l.sample_id if l.sample_id is not None else -1, l.position))


def _split(labels):
    rows = _ordered(labels)
    cor = np.array([l.saliency_prev for l in rows if l.label == CORRECT], dtype=np.float64)
    hal = np.array([l.saliency_prev for l in rows if l.label == HALLUCINATED], dtype=np.float64)
    return rows, cor, hal


def _summary(x: np.ndarray) -> ClassSummary:
    return ClassSummary(float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0, int(len(x)))


def stats_saliency(labels, min_per_class: int = MIN_PER_CLASS) -> StatsReport:
    """Per-label means plus a one-sided Welch test of mean(correct) > mean(hallucinated).

    The high-saliency share counts hallucinated tokens whose saliency is above
    the median correct-token saliency.
    """
    rows, cor, hal = _split(labels)
    for name, arr in ((CORRECT, cor), (HALLUCINATED, hal)):
        if len(arr) < min_per_class:
            raise InsufficientDataError(f"{len(arr)} {name} tokens, need at least {min_per_class}", label=name)
    rep = StatsReport(classes={CORRECT: _summary(cor), HALLUCINATED: _summary(hal)})
    if np.all(cor == cor[0]) and np.all(hal == hal[0]):
        # zero variance on both sides: the sign of the gap decides
        gap = cor[0] - hal[0]
        rep.welch_t = 0.0 if gap == 0 else math.copysign(math.inf, gap)
        rep.welch_p = 1.0 if gap <= 0 else 0.0
    else:
        res = sps.ttest_ind(cor, hal, equal_var=False, alternative="greater")
        rep.welch_t, rep.welch_p = float(res.statistic), float(res.pvalue)
    rep.high_saliency_hallucination_pct = float(100.0 * np.mean(hal > np.median(cor)))
    for name in (CORRECT, HALLUCINATED):
        vals = [l.saliency_prompt for l in rows if l.label == name and l.saliency_prompt is not None]
        if vals:
            rep.prompt_saliency[name] = float(np.mean(vals))
    rep.bins, rep.spearman_rho, rep.spearman_p = bin_analysis(labels)
    return rep


def bin_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n_bins + 1)


def bin_analysis(labels, n_bins: int = 10):
    """``(bins, rho, p)``: hallucination rate per equal-width saliency bin.

    The top edge is inclusive. Empty bins carry ``rate=None`` and are left out
    of the Spearman correlation, which is None with fewer than two usable bins.
    """
    rows, _, _ = _split(labels)
    if not rows:
        raise InsufficientDataError("no scored content tokens", label="any")
    vals = np.array([l.saliency_prev for l in rows], dtype=np.float64)
    hal = np.array([l.label == HALLUCINATED for l in rows])
    edges = bin_edges(vals, n_bins)
    idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        h = int(hal[sel].sum())
        bins.append(Bin(b, float(edges[b]), float(edges[b + 1]), n, h, h / n if n else None))
    full = [b for b in bins if not b.empty]
    rho = p = None
    if len(full) >= 2:
        rates = [b.rate for b in full]
        if len(set(rates)) > 1:
            res = sps.spearmanr([b.index for b in full], rates)
            rho, p = float(res.statistic), float(res.pvalue)
        else:
            rho, p = 0.0, 1.0
    return bins, rho, p
