"""Saliency-decay intervention: weaken attention toward a chosen output token.

After a target token is generated, every later query's attention weight on
that token's position is multiplied by ``r`` in all layers and heads. The
suffix after the target is then re-decoded with the same per-position
generators, so ``r = 1`` reproduces the original decode exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InsufficientDataError
from ..model import AttentionEdit, NanoModel
from ..sgrs import SGRSConfig, decode
from .labels import CORRECT, hallucination_counts
from .task import EOS

DEFAULT_FACTORS = (1.0, 0.8, 0.6, 0.4, 0.2)
SELECTION_QUANTILE = 0.75


class DecayEdit(AttentionEdit):
    """Scales ``A[..., i, t]`` by ``r`` for every query row ``i > t``."""

    def __init__(self, position: int, r: float):
        if r < 0:
            raise ValueError("decay factor must be >= 0")
        self.position, self.r = int(position), float(r)

    def _mask(self, A):
        n = A.shape[-2]
        if self.r == 1.0 or self.position + 1 >= n:
            return None
        return slice(self.position + 1, n)

    def apply(self, layer, A):
        rows = self._mask(A)
        if rows is None:
            return A
        A = A.copy()
        A[..., rows, self.position] *= self.r
        return A

    def vjp(self, layer, A, dA_out):
        rows = self._mask(A)
        if rows is None:
            return dA_out
        dA = dA_out.copy()
        dA[..., rows, self.position] *= self.r
        return dA


@dataclass
class InterventionTarget:
    sample_id: int
    position: int  # absolute position of the intervened token
    token: int
    saliency: float


@dataclass
class InterventionRow:
    r: float
    hallucinated: int
    content: int
    changed: int  # suffixes that differ from the un-intervened decode

    @property
    def rate(self) -> float:
        return self.hallucinated / self.content if self.content else 0.0


@dataclass
class InterventionReport:
    threshold: float
    targets: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def rates(self) -> dict:
        return {row.r: row.rate for row in self.rows}


def select_targets(labels_by_sample: dict, quantile: float = SELECTION_QUANTILE):
    """First correct token per sample whose saliency reaches the corpus quantile.

    ``labels_by_sample`` maps sample id to the TokenLabel list of its decode.
    Returns ``(threshold, targets)``.
    """
    scores = [l.saliency_prev for ls in labels_by_sample.values() for l in ls if l.label == CORRECT and l.saliency_prev is not None]
    if not scores:
        raise InsufficientDataError("no scored correct tokens to intervene on", label="correct")
    thr = float(np.quantile(np.array(scores), quantile))
    targets = []
    for sid in sorted(labels_by_sample):
        for l in labels_by_sample[sid]:
            if l.label == CORRECT and l.saliency_prev is not None and l.saliency_prev >= thr:
                targets.append(InterventionTarget(sid, l.position, l.token, float(l.saliency_prev)))
                break
    if not targets:
        raise InsufficientDataError("no correct token reaches the selection threshold", label="correct")
    return thr, targets


def suffix_decode(model: NanoModel, sample, outputs, target: InterventionTarget, r: float, sgrs_cfg: SGRSConfig, max_new_tokens: int, seed: int):
    """Keep the outputs up to and including the target, re-decode the rest under the decay."""
    k = target.position - len(sample.prefix)
    kept = list(outputs[: k + 1])
    if kept and kept[-1] == EOS:
        return []
    edits = () if r == 1.0 else (DecayEdit(target.position, r),)
    res = decode(
        model,
        sample.prefix + kept,
        sample.layout,
        "baseline",
        sgrs_cfg=sgrs_cfg,
        max_new_tokens=max_new_tokens - len(kept),
        eos=EOS,
        seed=seed,
        edits=edits,
    )
    return res.tokens


def intervention(
    model: NanoModel,
    samples: dict,
    outputs: dict,
    labels_by_sample: dict,
    factors=DEFAULT_FACTORS,
    sgrs_cfg: SGRSConfig | None = None,
    max_new_tokens: int = 16,
    seeds: dict | None = None,
    quantile: float = SELECTION_QUANTILE,
) -> InterventionReport:
    """Downstream hallucination rate of the re-decoded suffix for each factor ``r``.

    ``samples``, ``outputs`` and ``seeds`` are keyed by sample id; ``outputs``
    holds the un-intervened baseline decodes that produced ``labels_by_sample``.
    """
    thr, targets = select_targets(labels_by_sample, quantile)
    rep = InterventionReport(thr, targets)
    base = {}
    for r in factors:
        H = C = changed = 0
        for t in targets:
            s = samples[t.sample_id]
            seed = seeds[t.sample_id] if seeds else t.sample_id
            suffix = suffix_decode(model, s, outputs[t.sample_id], t, r, sgrs_cfg or _default_cfg(s), max_new_tokens, seed)
            h, c = hallucination_counts(suffix, s)
            H, C = H + h, C + c
            if r == 1.0:
                base[t.sample_id] = suffix
            elif t.sample_id in base:
                changed += suffix != base[t.sample_id]
        rep.rows.append(InterventionRow(float(r), H, C, changed))
    return rep


def _default_cfg(sample) -> SGRSConfig:
    from ..saliency import SaliencyScoreConfig

    return SGRSConfig(score_cfg=SaliencyScoreConfig(layout=sample.layout))
