"""Corpus-level decoding, labeling and the alpha/beta sweep.

Every sample is an independent decode session seeded from ``(seed, sample_id)``.
With ``jobs > 1`` samples are spread over worker processes; results are always
returned in sample-id order so reductions do not depend on scheduling.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..locore import LocoREConfig
from ..model import NanoModel
from ..saliency import SaliencyScoreConfig, default_target_layers
from ..sgrs import MODES, SGRSConfig, decode
from .labels import hallucination_counts, label_tokens, recall
from .task import EOS


@dataclass(frozen=True)
class RunSettings:
    """Decoding knobs shared by every experiment."""

    mode: str = "baseline"
    max_new_tokens: int = 16
    seed: int = 0
    text_reading: bool = False  # output positions start after the prompt
    sgrs: SGRSConfig = field(default_factory=SGRSConfig)
    locore: LocoREConfig = field(default_factory=LocoREConfig)
    target_layers: Optional[tuple] = None


def sample_seed(seed: int, sample_id: int) -> int:
    return int(np.random.SeedSequence((int(seed), int(sample_id))).generate_state(1)[0])


def sample_layout(sample, settings: RunSettings):
    lay = sample.layout
    return lay.with_text_reading() if settings.text_reading else lay


def _configs(model: NanoModel, sample, settings: RunSettings):
    lay = sample_layout(sample, settings)
    layers = settings.target_layers or default_target_layers(model.config.n_layers)
    score = replace(settings.sgrs.score_cfg, layout=lay, target_layers=tuple(layers))
    return lay, replace(settings.sgrs, score_cfg=score), replace(settings.locore, layout=lay)


@dataclass
class SampleRun:
    sample_id: int
    tokens: list
    traces: list
    elapsed_ms: float
    labels: Optional[list] = None


def run_sample(model: NanoModel, sample, settings: RunSettings, with_labels: bool = False) -> SampleRun:
    lay, sgrs_cfg, locore_cfg = _configs(model, sample, settings)
    res = decode(
        model,
        sample.prefix,
        lay,
        settings.mode,
        sgrs_cfg=sgrs_cfg,
        locore_cfg=locore_cfg,
        max_new_tokens=settings.max_new_tokens,
        eos=EOS,
        seed=sample_seed(settings.seed, sample.sample_id),
    )
    labels = None
    if with_labels:
        labels = label_tokens(res.tokens, sample, model, sgrs_cfg.score_cfg.target_layers)
    return SampleRun(sample.sample_id, res.tokens, res.traces, res.latency.total_ms, labels)


def _worker(args):
    model, chunk, settings, with_labels = args
    return [run_sample(model, s, settings, with_labels) for s in chunk]


def run_corpus(model: NanoModel, samples, settings: RunSettings, with_labels: bool = False, jobs: int = 1) -> list:
    """Decode (and optionally label) every sample; returns SampleRuns sorted by sample id."""
    samples = sorted(samples, key=lambda s: s.sample_id)
    if jobs <= 1 or len(samples) < 2:
        runs = [run_sample(model, s, settings, with_labels) for s in samples]
    else:
        chunks = [samples[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_worker, [(model, c, settings, with_labels) for c in chunks if c])
        runs = [r for part in parts for r in part]
    return sorted(runs, key=lambda r: r.sample_id)


@dataclass
class CellResult:
    mode: str
    alpha: Optional[float]
    beta: Optional[float]
    renormalize: bool
    hallucinated: int
    content: int
    recalled: int
    gold: int
    tokens: int
    total_ms: float

    @property
    def hallucination_rate(self) -> float:
        return self.hallucinated / self.content if self.content else 0.0

    @property
    def recall(self) -> float:
        return self.recalled / self.gold if self.gold else 0.0

    @property
    def ms_per_token(self) -> float:
        return self.total_ms / self.tokens if self.tokens else 0.0

    def row(self) -> dict:
        return {
            "mode": self.mode,
            "alpha": "" if self.alpha is None else self.alpha,
            "beta": "" if self.beta is None else self.beta,
            "renormalize": int(self.renormalize),
            "hallucination_rate": round(self.hallucination_rate, 10),
            "recall": round(self.recall, 10),
            "hallucinated": self.hallucinated,
            "content": self.content,
            "tokens": self.tokens,
            "ms_per_token": round(self.ms_per_token, 4),
        }


def score_runs(runs, samples) -> tuple:
    """``(hallucinated, content, recalled, gold, tokens, total_ms)`` summed in sample order."""
    by_id = {s.sample_id: s for s in samples}
    H = C = R = G = T = 0
    ms = 0.0
    for r in runs:
        s = by_id[r.sample_id]
        h, c = hallucination_counts(r.tokens, s)
        a, g = recall(r.tokens, s)
        H, C, R, G, T = H + h, C + c, R + a, G + g, T + len(r.tokens)
        ms += r.elapsed_ms
    return H, C, R, G, T, ms


def sweep_cells(alphas, betas, modes) -> list:
    """Distinct (mode, alpha, beta) cells; parameters a mode ignores are None."""
    if not alphas or not betas or not modes:
        raise ValueError("sweep grids must be non-empty")
    cells = []
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        a_grid = alphas if "sgrs" in mode else [None]
        b_grid = betas if "locore" in mode else [None]
        for a in a_grid:
            for b in b_grid:
                cell = (mode, None if a is None else float(a), None if b is None else float(b))
                if cell not in cells:
                    cells.append(cell)
    return cells


def sweep(model: NanoModel, samples, alphas, betas, modes, settings: RunSettings = RunSettings(), jobs: int = 1) -> list:
    """Hallucination rate, recall and ms/token for every cell of the grid."""
    out = []
    for mode, a, b in sweep_cells(alphas, betas, modes):
        s = replace(settings, mode=mode)
        if a is not None:
            s = replace(s, sgrs=replace(s.sgrs, alpha=a))
        if b is not None:
            s = replace(s, locore=replace(s.locore, beta=b))
        runs = run_corpus(model, samples, s, jobs=jobs)
        out.append(CellResult(mode, a, b, s.locore.renormalize, *score_runs(runs, samples)))
    return out
