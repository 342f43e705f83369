"""Invariant suite: gradient check, degeneracy identities and monotonicity.

Each check returns a :class:`Check`; :func:`run_suite` runs them all against a
model and a handful of corpus samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .layout import TokenLayout
from .locore import LocoREConfig, LocoREEdit, apply_gain, gain_vector
from .model import AdditiveProbe, DecodeCache, ModelConfig, NanoModel, backward_attention, init_params, loss_ce
from .saliency import APPENDIX_TAYLOR, SaliencyScoreConfig, appendix_saliency, build_stack, per_head_saliency
from .sgrs import SaliencyHistory, SGRSConfig, adaptive_threshold, decode, sgrs_step


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def random_model(cfg: ModelConfig, scale: float = 0.3) -> NanoModel:
    """Model with all matrices redrawn at ``scale`` so attention is far from uniform."""
    rng = np.random.default_rng((cfg.rng_seed, 7))
    params = init_params(cfg)
    for name, arr in params.items():
        if arr.ndim == 2:
            params[name] = rng.normal(0.0, scale, arr.shape)
    return NanoModel(cfg, params)


def finite_difference_error(model: NanoModel, tokens, position: int, target: int, eps: float = 1e-4, floor: float = 1e-8) -> float:
    """Max relative error between the analytic attention gradient and central differences.

    Each lower-triangular entry of every attention matrix is perturbed by
    ``+-eps`` through an :class:`AdditiveProbe`; entries with analytic
    ``|grad| <= floor`` are skipped.
    """
    logits, tape = model.forward(tokens)
    tape = backward_attention(tape, position, target)
    L, H, n, _ = tape.grad.shape
    worst = 0.0
    for l in range(L):
        for h in range(H):
            for i in range(n):
                for j in range(i + 1):
                    g = tape.grad[l, h, i, j]
                    if abs(g) <= floor:
                        continue
                    up = loss_ce(model.forward(tokens, edits=[AdditiveProbe(l, h, i, j, eps)])[0][position], target)
                    dn = loss_ce(model.forward(tokens, edits=[AdditiveProbe(l, h, i, j, -eps)])[0][position], target)
                    fd = (up - dn) / (2 * eps)
                    worst = max(worst, abs(g - fd) / max(abs(g), abs(fd)))
    return worst


def check_gradient(tol: float = 1e-4) -> Check:
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=32, vocab_size=16, max_seq_len=16, rng_seed=3)
    model = random_model(cfg)
    tokens = list(np.random.default_rng(11).integers(0, cfg.vocab_size, 12))
    err = finite_difference_error(model, tokens, position=11, target=5)
    return Check("gradient_fidelity", err <= tol, f"max_rel_err={err:.3e}")


def check_tape(model: NanoModel, seq) -> Check:
    _, tape = model.forward(seq)
    A = tape.attn
    upper = np.triu(np.ones((tape.n, tape.n), dtype=bool), 1)
    causal = bool(np.all(A[..., upper] == 0))
    rows = float(np.max(np.abs(A.sum(-1) - 1.0)))
    return Check("attention_causal_stochastic", causal and rows <= 1e-6, f"max_row_dev={rows:.1e}")


def check_saliency(model: NanoModel, seq) -> Check:
    n = len(seq)
    _, tape = model.forward(seq)
    stack = build_stack(backward_attention(tape, n - 2, seq[-1]))
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    tril = bool(np.all(stack.layers[:, upper] == 0))
    nonneg = bool(np.all(stack.layers >= 0))
    norms = np.linalg.norm(stack.layers.reshape(stack.n_layers, -1), axis=1)
    norm_dev = float(np.max(np.abs(norms[~np.asarray(stack.degenerate)] - 1.0)))
    rng = np.random.default_rng(5)
    sign = True
    for _ in range(200):
        A, G = rng.random((6, 6)), rng.normal(size=(6, 6))
        flip = np.where(rng.random((6, 6)) < 0.5, -1.0, 1.0)
        sign &= np.array_equal(per_head_saliency(A, G), per_head_saliency(A, G * flip))
    return Check("saliency_structure", tril and nonneg and norm_dev <= 1e-6 and sign, f"norm_dev={norm_dev:.1e}")


def check_mode_divergence() -> Check:
    A = np.ones((2, 1, 1))
    G = np.array([[[1.0]], [[-1.0]]])
    main = float(sum(per_head_saliency(A[h], G[h]) for h in range(2))[0, 0])
    appx = float(appendix_saliency(A, G)[0, 0])
    return Check("aggregation_mode_divergence", appx == 0.0 and main > 0, f"main={main} appendix={appx}")


def check_alpha_zero(model: NanoModel, samples) -> Check:
    same = True
    for s in samples:
        cfg = SGRSConfig(alpha=0.0, score_cfg=SaliencyScoreConfig(layout=s.layout))
        a = decode(model, s.prefix, s.layout, "baseline", sgrs_cfg=cfg, max_new_tokens=8, seed=s.sample_id).tokens
        b = decode(model, s.prefix, s.layout, "sgrs", sgrs_cfg=cfg, max_new_tokens=8, seed=s.sample_id).tokens
        same &= a == b
    return Check("sgrs_alpha_zero_identity", same, f"samples={len(samples)}")


def check_locore(model: NanoModel, seq, layout: TokenLayout, beta: float = 0.15) -> Check:
    base, tape0 = model.forward(seq)
    zero, _ = model.forward(seq, layout, locore=LocoREConfig(beta=0.0))
    identity = np.array_equal(base, zero)
    _, tape1 = model.forward(seq, layout, locore=LocoREConfig(beta=beta))
    # compare the edited last row against the gain applied to the same inputs
    edit = LocoREEdit(LocoREConfig(beta=beta), layout)
    P = len(seq) - 1
    g = gain_vector(P, layout, beta, edit.cfg.window)
    ok_local = np.array_equal(tape0.attn[0, :, :P], tape1.attn[0, :, :P])
    row0 = tape0.attn[0, :, P]
    row1 = tape1.attn[0, :, P]
    expect = apply_gain(row0, g, layout.start)
    win = [j for j in range(layout.start, P) if P - j <= edit.cfg.window]
    ratio = float(row1[:, win].sum() / row0[:, win].sum()) if win else 1.0 + beta
    outside = np.array_equal(row1[:, : layout.start], row0[:, : layout.start])
    ok = identity and ok_local and outside and np.allclose(row1, expect, rtol=0, atol=1e-15) and math.isclose(ratio, 1 + beta, rel_tol=1e-12)
    return Check("locore_identity_locality", bool(ok), f"window_mass_ratio={ratio:.12f}")


def check_monotone_rejection() -> Check:
    scores = {10: 0.05, 11: 0.3, 12: 0.2, 13: 0.5, 14: 0.45}
    logits = np.array([0.0] * 10 + [2.0, 1.5, 1.0, 0.5, 0.2] + [-50.0] * 5)
    hist = SaliencyHistory()
    for j, v in enumerate([0.4, 0.5, 0.6], start=3):
        hist.append(j, v)
    layout = TokenLayout(1, 2)
    counts = []
    for alpha in (0.0, 0.3, 0.6, 0.9, 1.2, 2.0):
        cfg = SGRSConfig(alpha=alpha, score_cfg=SaliencyScoreConfig(target_layers=(0,), layout=layout))
        _, trace, _ = sgrs_step(None, list(range(6)), hist, cfg, np.random.default_rng(0), logits=logits, scorer=lambda ctx, c: scores[c])
        counts.append(trace.rejections)
    ok = all(a <= b for a, b in zip(counts, counts[1:]))
    return Check("sgrs_monotone_rejection", ok, f"rejections={counts}")


def check_history_window() -> Check:
    hist = SaliencyHistory()
    for j in range(3, 30):
        hist.append(j, 0.1 + 0.01 * j)
    tau = adaptive_threshold(hist, 0.6, 10, 30, start=3)
    other = SaliencyHistory()
    for j, v in hist.entries:
        other.append(j, v if 29 - j <= 10 else 99.0)
    tau2 = adaptive_threshold(other, 0.6, 10, 30, start=3)
    return Check("sgrs_history_window", tau == tau2, f"tau={tau:.6f}")


def check_cache(model: NanoModel, seq) -> Check:
    full = model.forward(seq)[0]
    cache = DecodeCache(model)
    rows = [cache.prefill(seq[:3])]
    for t in seq[3:]:
        rows.append(cache.step(t))
    ok = all(np.array_equal(full[2 + k], r) for k, r in enumerate(rows))
    return Check("decode_cache_bit_exact", ok, f"rows={len(rows)}")


def check_intervention_identity(model: NanoModel, sample) -> Check:
    from .harness.intervention import DecayEdit

    seq = sample.prefix + sample.reference_caption()[:4]
    a = model.forward(seq)[0]
    b = model.forward(seq, edits=[DecayEdit(len(sample.prefix), 1.0)])[0]
    return Check("intervention_r1_identity", bool(np.array_equal(a, b)))


def run_suite(model: NanoModel, samples, gradient: bool = True) -> list:
    """All checks; ``samples`` should hold a few task samples for ``model``."""
    s0 = samples[0]
    seq = s0.prefix + s0.reference_caption()
    seq = seq[: model.config.max_seq_len]
    checks = []
    if gradient:
        checks.append(check_gradient())
    checks += [
        check_tape(model, seq),
        check_saliency(model, seq),
        check_mode_divergence(),
        check_alpha_zero(model, samples),
        check_locore(model, seq, s0.layout),
        check_monotone_rejection(),
        check_history_window(),
        check_cache(model, seq),
        check_intervention_identity(model, s0),
    ]
    return checks
