"""Saliency-guided rejection sampling and the autoregressive decode loop.

Position convention: a context ``x[0..q]`` has query row ``q``; the candidate
being chosen will occupy position ``P = q + 1``. Candidate saliency is read
from row ``q`` of the saliency stack, and the threshold window is over
accepted tokens at positions ``j`` with ``(P - 1) - j <= W``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NoHistoryError
from .layout import TokenLayout
from .locore import LocoREConfig
from .model import NanoModel, DecodeCache, backward_attention, softmax
from .saliency import SaliencyScoreConfig, build_stack, candidate_score

MODES = ("baseline", "sgrs", "locore", "sgrs+locore")

VIA_THRESHOLD = "threshold"
VIA_FALLBACK = "fallback"
VIA_NO_HISTORY = "no_history"


@dataclass(frozen=True)
class SGRSConfig:
    top_k: int = 5
    rounds: Optional[int] = None  # defaults to top_k
    alpha: float = 0.6
    window: int = 10
    temperature: float = 1.0
    score_cfg: SaliencyScoreConfig = field(default_factory=SaliencyScoreConfig)
    rng_seed: int = 0
    history_on_fallback: bool = True
    score_with_locore: bool = False

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.rounds is not None and self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def R(self) -> int:
        return self.top_k if self.rounds is None else self.rounds


@dataclass
class SaliencyHistory:
    """Accepted-token saliencies keyed by token position (strictly increasing)."""

    entries: list = field(default_factory=list)

    def append(self, position: int, score: float) -> None:
        if self.entries and position <= self.entries[-1][0]:
            raise ValueError("history positions must be strictly increasing")
        self.entries.append((int(position), float(score)))

    def copy(self) -> "SaliencyHistory":
        return SaliencyHistory(list(self.entries))

    def __len__(self):
        return len(self.entries)


def window_entries(history: SaliencyHistory, W: int, P: int, start: int = 0) -> list:
    return [(j, s) for j, s in history.entries if start <= j < P and (P - 1) - j <= W]


def adaptive_threshold(history: SaliencyHistory, alpha: float, W: int, P: int, start: int = 0) -> float:
    """``alpha`` times the mean saliency of accepted tokens within the window.

    Returns ``-inf`` (accept anything) when the window is empty.
    """
    recent = window_entries(history, W, P, start)
    if not recent:
        return -math.inf
    return alpha * (sum(s for _, s in recent) / len(recent))


@dataclass
class Candidate:
    token: int
    prob: float
    saliency: Optional[float] = None
    round: Optional[int] = None


@dataclass
class DecodeStepTrace:
    position: int
    candidates: list
    threshold: float
    token: int
    accepted_via: str
    rejections: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = None if math.isinf(self.threshold) else self.threshold
        return d


# ---------------------------------------------------------------- sampling


def top_k_candidates(logits, k: int, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Top-k token ids (ties to the lowest id) and their renormalized probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        order = np.argsort(-logits, kind="stable")[:k]
        probs = np.zeros(len(order))
        probs[0] = 1.0
        return order, probs
    p = softmax(logits / temperature)
    order = np.argsort(-p, kind="stable")[:k]
    q = p[order]
    return order, q / q.sum()


def draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Index drawn from ``probs`` with a single uniform variate."""
    u = rng.random()
    c = np.cumsum(probs)
    idx = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(idx, len(probs) - 1)


def sample_top_k(logits, k: int, temperature: float, rng: np.random.Generator) -> int:
    tokens, probs = top_k_candidates(logits, k, temperature)
    if temperature == 0 or k == 1:
        return int(tokens[0])
    return int(tokens[draw(probs, rng)])


def step_rng(seed: int, position: int) -> np.random.Generator:
    """Independent generator per (sample seed, position) so suffixes can be replayed."""
    return np.random.default_rng((int(seed), int(position)))


# ---------------------------------------------------------------- scoring


def score_candidate(
    model: NanoModel,
    context: Sequence[int],
    candidate: int,
    score_cfg: SaliencyScoreConfig,
    locore: Optional[LocoREConfig] = None,
    edits=(),
) -> float:
    """One forward + backward for ``candidate`` as the continuation of ``context``."""
    q = len(context) - 1
    if len(score_cfg.key_positions(q)) == 0:
        raise NoHistoryError(f"no output positions before query {q}")
    _, tape = model.forward(context, score_cfg.layout, locore=locore, edits=edits)
    tape = backward_attention(tape, q, candidate)
    return candidate_score(build_stack(tape, score_cfg.mode), score_cfg, q)


Scorer = Callable[[Sequence[int], int], float]


def sgrs_step(
    model: Optional[NanoModel],
    context: Sequence[int],
    history: SaliencyHistory,
    cfg: SGRSConfig,
    rng: np.random.Generator,
    logits=None,
    scorer: Optional[Scorer] = None,
    locore: Optional[LocoREConfig] = None,
) -> tuple[int, DecodeStepTrace, SaliencyHistory]:
    """Choose the token for position ``len(context)``.

    ``logits`` (next-token logits for the context) are computed from ``model``
    when omitted. ``scorer`` replaces :func:`score_candidate`, which lets tests
    script saliency values.
    """
    score_cfg = cfg.score_cfg
    q = len(context) - 1
    P = q + 1
    if logits is None:
        logits = model.forward(context, score_cfg.layout, locore=locore)[0][-1]
    if scorer is None:
        scoring_locore = locore if cfg.score_with_locore else None

        def scorer(ctx, c):
            return score_candidate(model, ctx, c, score_cfg, scoring_locore)

    tokens, probs = top_k_candidates(logits, cfg.top_k, cfg.temperature)
    original = [Candidate(int(t), float(p)) for t, p in zip(tokens, probs)]
    history = history.copy()
    start = score_cfg.layout.start

    def pick(remaining):
        if len(remaining) == 1 or cfg.temperature == 0:
            return remaining[0]
        # draw() normalizes by the cumulative total, so the first round consumes
        # the generator exactly like sample_top_k.
        w = np.array([original[i].prob for i in remaining])
        return remaining[draw(w, rng)]

    if len(score_cfg.key_positions(q)) == 0:
        i = pick(list(range(len(original))))
        original[i].round = 1
        trace = DecodeStepTrace(P, [asdict(c) for c in original], -math.inf, original[i].token, VIA_NO_HISTORY, 0)
        return original[i].token, trace, history

    tau = adaptive_threshold(history, cfg.alpha, cfg.window, P, start)
    remaining = list(range(len(original)))
    rejections = 0
    accepted = None
    via = VIA_THRESHOLD
    for r in range(1, cfg.R + 1):
        if not remaining:
            break
        i = pick(remaining)
        cand = original[i]
        cand.saliency = float(scorer(context, cand.token))
        cand.round = r
        if cand.saliency >= tau:
            accepted = i
            if math.isinf(tau):
                via = VIA_NO_HISTORY
            break
        remaining.remove(i)
        rejections += 1
    if accepted is None:
        for cand in original:
            if cand.saliency is None:
                cand.saliency = float(scorer(context, cand.token))
        best = max(c.saliency for c in original)
        accepted = min((i for i, c in enumerate(original) if c.saliency == best), key=lambda i: original[i].token)
        via = VIA_FALLBACK
    chosen = original[accepted]
    if via != VIA_FALLBACK or cfg.history_on_fallback:
        history.append(P, chosen.saliency)
    trace = DecodeStepTrace(P, [asdict(c) for c in original], tau, chosen.token, via, rejections)
    return chosen.token, trace, history


# ---------------------------------------------------------------- decode loop


@dataclass
class LatencyReport:
    mode: str
    tokens: int
    total_ms: float

    @property
    def ms_per_token(self) -> float:
        return self.total_ms / self.tokens if self.tokens else 0.0

    def row(self) -> dict:
        return {"mode": self.mode, "tokens": self.tokens, "total_ms": self.total_ms, "ms_per_token": self.ms_per_token}


@dataclass
class DecodeResult:
    tokens: list
    traces: list
    latency: LatencyReport
    prefix: list


def decode(
    model: NanoModel,
    prefix: Sequence[int],
    layout: TokenLayout,
    mode: str = "baseline",
    sgrs_cfg: Optional[SGRSConfig] = None,
    locore_cfg: Optional[LocoREConfig] = None,
    max_new_tokens: int = 24,
    eos: Optional[int] = None,
    seed: int = 0,
    edits=(),
    use_cache: bool = False,
) -> DecodeResult:
    """Autoregressive decoding from ``prefix`` (system + image + prompt tokens).

    Every mode draws from top-k/temperature settings in ``sgrs_cfg``, with one
    generator per position seeded from ``seed``. ``edits`` apply to every
    decode forward (used by the intervention experiment) but not to saliency
    scoring forwards.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    sgrs_cfg = sgrs_cfg or SGRSConfig(score_cfg=SaliencyScoreConfig(layout=layout))
    use_locore = mode in ("locore", "sgrs+locore")
    locore = None
    if use_locore:
        locore = locore_cfg or LocoREConfig(layout=layout)
        if locore.layout is None:
            from dataclasses import replace

            locore = replace(locore, layout=layout)
    cache = None
    if use_cache:
        if mode != "baseline" or edits:
            raise ValueError("the key/value cache is only available for unedited baseline decoding")
        cache = DecodeCache(model)
    seq = list(prefix)
    out, traces = [], []
    history = SaliencyHistory()
    limit = min(max_new_tokens, model.config.max_seq_len - len(seq))
    t0 = time.perf_counter()
    for _ in range(limit):
        P = len(seq)
        rng = step_rng(seed, P)
        if cache is not None:
            logits = cache.prefill(seq) if cache.length == 0 else cache.step(seq[-1])
        else:
            from .locore import LocoREEdit

            step_edits = list(edits)
            if locore is not None:
                step_edits.insert(0, LocoREEdit(locore, layout))
            logits = model.forward(seq, layout, edits=step_edits)[0][-1]
        if mode in ("sgrs", "sgrs+locore"):
            tok, trace, history = sgrs_step(model, seq, history, sgrs_cfg, rng, logits=logits, locore=locore)
            traces.append(trace)
        else:
            tok = sample_top_k(logits, sgrs_cfg.top_k, sgrs_cfg.temperature, rng)
        seq.append(tok)
        out.append(tok)
        if eos is not None and tok == eos:
            break
    elapsed = (time.perf_counter() - t0) * 1000.0
    return DecodeResult(out, traces, LatencyReport(mode, len(out), elapsed), list(prefix))


def write_traces_jsonl(traces, path) -> None:
    from .saliency import _atomic_write
    from pathlib import Path

    rows = [t if isinstance(t, dict) else t.to_dict() for t in traces]
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    _atomic_write(Path(path), "\n".join(lines) + ("\n" if lines else ""))
