"""Small decoder-only transformer with a taped attention forward pass.

The forward pass records every post-softmax attention matrix (after any
installed attention edits) and the reverse pass is written by hand. The
same reverse pass serves two callers: training (parameter gradients for a
masked next-token loss) and saliency (the gradient of a single-position
cross-entropy with respect to each taped attention matrix).

Keys are always padded to ``max_seq_len`` and single-row matrix products are
padded to two rows. Both keep per-row floating-point results independent of
sequence length, which is what lets :class:`DecodeCache` reproduce the
uncached forward bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, SequenceLengthError, TapeStateError, VocabularyError, HookError
from .layout import TokenLayout

LN_EPS = 1e-5
FF_MULT = 4


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 96
    max_seq_len: int = 64
    rng_seed: int = 0
    precision: int = 64

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be unsigned")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def check_layout(self, layout: TokenLayout) -> None:
        if self.max_seq_len < layout.sys_len + layout.img_len + 2:
            raise ValueError("max_seq_len too small for layout")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "rng_seed": self.rng_seed,
            "precision": self.precision,
        }


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in checkpoint order."""
    d, V, F = cfg.d_model, cfg.vocab_size, FF_MULT * cfg.d_model
    shapes = [("tok_emb", (V, d)), ("pos_emb", (cfg.max_seq_len, d))]
    for l in range(cfg.n_layers):
        shapes += [
            (f"l{l}.ln1_g", (d,)),
            (f"l{l}.ln1_b", (d,)),
            (f"l{l}.w_q", (d, d)),
            (f"l{l}.b_q", (d,)),
            (f"l{l}.w_k", (d, d)),
            (f"l{l}.b_k", (d,)),
            (f"l{l}.w_v", (d, d)),
            (f"l{l}.b_v", (d,)),
            (f"l{l}.w_o", (d, d)),
            (f"l{l}.b_o", (d,)),
            (f"l{l}.ln2_g", (d,)),
            (f"l{l}.ln2_b", (d,)),
            (f"l{l}.w_ff1", (d, F)),
            (f"l{l}.b_ff1", (F,)),
            (f"l{l}.w_ff2", (F, d)),
            (f"l{l}.b_ff2", (d,)),
        ]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, V)), ("b_out", (V,))]
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.rng_seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        elif leaf in ("w_o", "w_ff2"):
            arr = rng.normal(0.0, resid_std, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = arr
    return params


# ---------------------------------------------------------------- primitives


def _mm(a, b):
    # Single-row products go through gemv, whose rounding differs from gemm.
    if a.shape[-2] == 1:
        pad = np.zeros(a.shape[:-2] + (1, a.shape[-1]), dtype=a.dtype)
        return np.matmul(np.concatenate([a, pad], axis=-2), b)[..., :1, :]
    return np.matmul(a, b)


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_bwd(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(z):
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z, t):
    half = 0.5 * (1.0 + t)
    return half + (0.5 * _GELU_C) * z * (1.0 - t * t) * (1.0 + 3 * 0.044715 * z * z)


def log_softmax(v):
    v = np.asarray(v)
    m = v.max(axis=-1, keepdims=True)
    z = v - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(v):
    v = np.asarray(v)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_ce(logits, target: int) -> float:
    """Cross-entropy ``-log softmax(logits)[target]`` for a single position."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if not 0 <= target < logits.shape[-1]:
        raise VocabularyError(f"target {target} outside vocabulary of {logits.shape[-1]}")
    return float(-log_softmax(logits)[target])


# ---------------------------------------------------------------- attention edits


class AttentionEdit:
    """Elementwise edit of post-softmax attention.

    Subclasses implement :meth:`apply` and :meth:`vjp`. ``A`` has shape
    ``(B, H, n, max_seq_len)``; columns at or beyond ``n`` are zero.
    """

    def apply(self, layer: int, A: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, layer: int, A: np.ndarray, dA_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class AdditiveProbe(AttentionEdit):
    """Adds ``eps`` to one attention entry. Forward-only; used by gradient checks."""

    def __init__(self, layer, head, row, col, eps):
        self.layer, self.head, self.row, self.col, self.eps = layer, head, row, col, eps

    def apply(self, layer, A):
        if layer != self.layer:
            return A
        A = A.copy()
        A[:, self.head, self.row, self.col] += self.eps
        return A

    def vjp(self, layer, A, dA_out):
        return dA_out


# ---------------------------------------------------------------- tape


@dataclass
class AttentionTape:
    """Per-layer, per-head attention matrices and (after backward) their gradients.

    ``attn`` and ``grad`` have shape ``(n_layers, n_heads, n, n)``.
    """

    attn: np.ndarray
    n: int
    grad: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    loss: Optional[float] = None
    target: Optional[tuple[int, int]] = None
    _model: Optional["NanoModel"] = field(default=None, repr=False)
    _cache: Optional[dict] = field(default=None, repr=False)

    @property
    def n_layers(self) -> int:
        return self.attn.shape[0]

    @property
    def n_heads(self) -> int:
        return self.attn.shape[1]

    def matrix(self, layer: int, head: int) -> np.ndarray:
        return self.attn[layer, head]

    def gradient(self, layer: int, head: int) -> np.ndarray:
        if self.grad is None:
            raise TapeStateError("no backward pass has filled this tape")
        return self.grad[layer, head]


# ---------------------------------------------------------------- model


class NanoModel:
    """Pre-norm decoder-only transformer over integer token ids."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None):
        self.config = config
        if params is None:
            params = init_params(config)
        expected = dict(param_shapes(config))
        if set(params) != set(expected):
            raise ValueError("parameter names do not match config")
        self.params = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = arr.astype(config.dtype, copy=True)
        self._installed: list[AttentionEdit] = []

    # -- hooks ---------------------------------------------------------

    def install_edit(self, edit: AttentionEdit) -> AttentionEdit:
        if any(e is edit for e in self._installed):
            raise HookError("edit already installed")
        self._installed.append(edit)
        return edit

    def remove_edit(self, edit: AttentionEdit) -> None:
        for i, e in enumerate(self._installed):
            if e is edit:
                del self._installed[i]
                return
        raise HookError("edit is not installed")

    @property
    def installed_edits(self) -> tuple:
        return tuple(self._installed)

    # -- validation ----------------------------------------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[-1] == 0:
            raise SequenceLengthError("empty token sequence")
        if tokens.shape[-1] > self.config.max_seq_len:
            raise SequenceLengthError(
                f"sequence of length {tokens.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise VocabularyError("token id outside vocabulary")
        return tokens

    # -- public forward -----------------------------------------------

    def forward(
        self,
        tokens: Sequence[int],
        layout: Optional[TokenLayout] = None,
        locore=None,
        edits: Iterable[AttentionEdit] = (),
        use_installed: bool = True,
    ) -> tuple[np.ndarray, AttentionTape]:
        """Run one sequence. Returns ``(logits[n, V], tape)``.

        ``locore`` is an optional ``LocoREConfig``; its gain is applied to the
        final query row of every layer, using ``layout`` (or the config's own).
        """
        tokens = self._check_tokens(tokens)
        all_edits = list(self._installed) if use_installed else []
        if locore is not None:
            from .locore import LocoREEdit

            all_edits.append(LocoREEdit(locore, layout))
        all_edits += list(edits)
        logits, cache = self._forward_batch(tokens, all_edits)
        n = tokens.shape[1]
        attn = np.stack([c["A_used"][0, :, :, :n] for c in cache["layers"]])
        tape = AttentionTape(attn=attn, n=n, logits=logits[0], _model=self, _cache=cache)
        return logits[0], tape

    def logits(self, tokens, layout=None, locore=None, edits=()) -> np.ndarray:
        return self.forward(tokens, layout, locore, edits)[0]

    def backward_attention(self, tape: AttentionTape, position: int, target: int) -> AttentionTape:
        return backward_attention(tape, position, target)

    # -- batched internals --------------------------------------------

    def _forward_batch(self, tokens: np.ndarray, edits: Sequence[AttentionEdit] = (), pad_keys: bool = True):
        # pad_keys=False is only for training, where cache equivalence is irrelevant
        p, cfg = self.params, self.config
        B, n = tokens.shape
        H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
        Lk = cfg.max_seq_len if pad_keys else n
        scale = 1.0 / math.sqrt(dh)
        mask = np.tri(n, Lk, dtype=bool)
        x = p["tok_emb"][tokens] + p["pos_emb"][:n]
        layers = []
        for l in range(cfg.n_layers):
            pre = f"l{l}."
            c = {}
            h, c["ln1"] = _ln_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            c["h"] = h
            q = _mm(h, p[pre + "w_q"]) + p[pre + "b_q"]
            k = _mm(h, p[pre + "w_k"]) + p[pre + "b_k"]
            v = _mm(h, p[pre + "w_v"]) + p[pre + "b_v"]
            qh = q.reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            kp = np.zeros((B, H, Lk, dh), dtype=x.dtype)
            vp = np.zeros((B, H, Lk, dh), dtype=x.dtype)
            kp[:, :, :n] = k.reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            vp[:, :, :n] = v.reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            s = _mm(qh, kp.transpose(0, 1, 3, 2)) * scale
            s = np.where(mask, s, -np.inf)
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            A = e / e.sum(axis=-1, keepdims=True)
            chain = []
            A_used = A
            for edit in edits:
                chain.append(A_used)
                A_used = edit.apply(l, A_used)
            o = _mm(A_used, vp)
            om = o.transpose(0, 2, 1, 3).reshape(B, n, d)
            att = _mm(om, p[pre + "w_o"]) + p[pre + "b_o"]
            x = x + att
            h2, c["ln2"] = _ln_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            z = _mm(h2, p[pre + "w_ff1"]) + p[pre + "b_ff1"]
            g, t = _gelu(z)
            x = x + _mm(g, p[pre + "w_ff2"]) + p[pre + "b_ff2"]
            c.update(qh=qh, kp=kp, vp=vp, A=A, chain=chain, A_used=A_used, om=om, h2=h2, z=z, t=t, g=g)
            layers.append(c)
        hf, lnf = _ln_fwd(x, p["lnf_g"], p["lnf_b"])
        logits = _mm(hf, p["w_out"]) + p["b_out"]
        cache = {"tokens": tokens, "layers": layers, "hf": hf, "lnf": lnf, "edits": list(edits), "n": n}
        return logits, cache

    def _backward_batch(self, cache: dict, dlogits: np.ndarray, param_grads: bool = True):
        """Reverse pass. Returns ``(grads, dA)`` with ``dA`` of shape (L, B, H, n, n)."""
        p, cfg = self.params, self.config
        tokens, n = cache["tokens"], cache["n"]
        B = tokens.shape[0]
        H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
        scale = 1.0 / math.sqrt(dh)
        red = (0, 1)
        grads = {} if param_grads else None
        tril = np.tri(n, n, dtype=bool)

        def acc(name, a, b):
            if param_grads:
                grads[name] = a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

        acc("w_out", cache["hf"], dlogits)
        if param_grads:
            grads["b_out"] = dlogits.sum(axis=red)
        dhf = _mm(dlogits, p["w_out"].T)
        dx, dg_, db_ = _ln_bwd(dhf, p["lnf_g"], cache["lnf"])
        if param_grads:
            grads["lnf_g"], grads["lnf_b"] = dg_, db_
        dA_all = np.zeros((cfg.n_layers, B, H, n, n), dtype=dlogits.dtype)
        for l in reversed(range(cfg.n_layers)):
            pre = f"l{l}."
            c = cache["layers"][l]
            # feed-forward block
            dgl = _mm(dx, p[pre + "w_ff2"].T)
            acc(pre + "w_ff2", c["g"], dx)
            dz = dgl * _gelu_grad(c["z"], c["t"])
            acc(pre + "w_ff1", c["h2"], dz)
            dh2 = _mm(dz, p[pre + "w_ff1"].T)
            dxm, dg_, db_ = _ln_bwd(dh2, p[pre + "ln2_g"], c["ln2"])
            if param_grads:
                grads[pre + "b_ff2"] = dx.sum(axis=red)
                grads[pre + "b_ff1"] = dz.sum(axis=red)
                grads[pre + "ln2_g"], grads[pre + "ln2_b"] = dg_, db_
            dx = dx + dxm
            # attention block
            acc(pre + "w_o", c["om"], dx)
            if param_grads:
                grads[pre + "b_o"] = dx.sum(axis=red)
            dom = _mm(dx, p[pre + "w_o"].T)
            do = dom.reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            dA_used = _mm(do, c["vp"].transpose(0, 1, 3, 2))
            dA_all[l] = np.where(tril, dA_used[..., :n], 0.0)
            dvp = _mm(c["A_used"].transpose(0, 1, 3, 2), do)
            dA = dA_used
            for edit, A_in in zip(reversed(cache["edits"]), reversed(c["chain"])):
                dA = edit.vjp(l, A_in, dA)
            A = c["A"]
            ds = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
            dq = _mm(ds, c["kp"])
            dkp = _mm(ds.transpose(0, 1, 3, 2), c["qh"])
            dq = dq.transpose(0, 2, 1, 3).reshape(B, n, d)
            dk = dkp[:, :, :n].transpose(0, 2, 1, 3).reshape(B, n, d)
            dv = dvp[:, :, :n].transpose(0, 2, 1, 3).reshape(B, n, d)
            h = c["h"]
            dh_ = _mm(dq, p[pre + "w_q"].T) + _mm(dk, p[pre + "w_k"].T) + _mm(dv, p[pre + "w_v"].T)
            if param_grads:
                for nm, dd in (("q", dq), ("k", dk), ("v", dv)):
                    acc(pre + "w_" + nm, h, dd)
                    grads[pre + "b_" + nm] = dd.sum(axis=red)
            dxa, dg_, db_ = _ln_bwd(dh_, p[pre + "ln1_g"], c["ln1"])
            if param_grads:
                grads[pre + "ln1_g"], grads[pre + "ln1_b"] = dg_, db_
            dx = dx + dxa
        if param_grads:
            gt = np.zeros_like(p["tok_emb"])
            np.add.at(gt, tokens.reshape(-1), dx.reshape(-1, d))
            grads["tok_emb"] = gt
            gp = np.zeros_like(p["pos_emb"])
            gp[:n] = dx.sum(axis=0)
            grads["pos_emb"] = gp
        return grads, dA_all

    # -- misc ------------------------------------------------------------

    def copy(self) -> "NanoModel":
        return NanoModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def with_precision(self, precision: int) -> "NanoModel":
        return NanoModel(replace(self.config, precision=precision), self.params)


def backward_attention(tape: AttentionTape, position: int, target: int) -> AttentionTape:
    """Fill ``tape.grad`` with d loss_ce(logits[position], target) / dA for every (layer, head).

    The derivative is read at the attention matrix actually used downstream
    (after edits). Entries above the diagonal are reported as zero.
    """
    if tape is None or tape._cache is None or tape._model is None or tape.logits is None:
        raise TapeStateError("backward_attention called before forward")
    model = tape._model
    n = tape.n
    if not 0 <= position < n:
        raise IndexError(f"position {position} outside sequence of length {n}")
    V = model.config.vocab_size
    if not 0 <= target < V:
        raise VocabularyError(f"target {target} outside vocabulary")
    row = tape.logits[position]
    loss = loss_ce(row, target)
    dlogits = np.zeros((1, n, V), dtype=tape.logits.dtype)
    dlogits[0, position] = softmax(row)
    dlogits[0, position, target] -= 1.0
    _, dA = model._backward_batch(tape._cache, dlogits, param_grads=False)
    return replace(tape, grad=dA[:, 0], loss=loss, target=(position, target))


class DecodeCache:
    """Incremental key/value cache for unedited decoding.

    Produces logits bit-identical to :meth:`NanoModel.forward` on the full
    prefix. Attention edits are not supported here: an edit of the final query
    row would be frozen into cached states of earlier rows.
    """

    def __init__(self, model: NanoModel):
        if model.installed_edits:
            raise HookError("DecodeCache does not support installed attention edits")
        self.model = model
        cfg = model.config
        self.kp = [np.zeros((1, cfg.n_heads, cfg.max_seq_len, cfg.d_head), dtype=cfg.dtype) for _ in range(cfg.n_layers)]
        self.vp = [np.zeros_like(k) for k in self.kp]
        self.length = 0

    def prefill(self, tokens) -> np.ndarray:
        """Process a prompt with one full forward; returns logits of its last row."""
        if self.length:
            raise TapeStateError("cache already holds a prefix")
        tokens = self.model._check_tokens(tokens)
        logits, cache = self.model._forward_batch(tokens)
        n = tokens.shape[1]
        for l, c in enumerate(cache["layers"]):
            self.kp[l][:, :, :n] = c["kp"][:, :, :n]
            self.vp[l][:, :, :n] = c["vp"][:, :, :n]
        self.length = n
        return logits[0, -1]

    def step(self, token: int) -> np.ndarray:
        """Append one token; returns its next-token logits."""
        model, cfg, p = self.model, self.model.config, self.model.params
        t = self.length
        if t + 1 > cfg.max_seq_len:
            raise SequenceLengthError("cache is full")
        if not 0 <= token < cfg.vocab_size:
            raise VocabularyError("token id outside vocabulary")
        H, dh, d, Lk = cfg.n_heads, cfg.d_head, cfg.d_model, cfg.max_seq_len
        scale = 1.0 / math.sqrt(dh)
        x = np.zeros((1, 2, d), dtype=cfg.dtype)
        x[0, 0] = p["tok_emb"][token] + p["pos_emb"][t]
        valid = np.arange(Lk) <= t
        for l in range(cfg.n_layers):
            pre = f"l{l}."
            h, _ = _ln_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = np.matmul(h, p[pre + "w_q"]) + p[pre + "b_q"]
            k = np.matmul(h, p[pre + "w_k"]) + p[pre + "b_k"]
            v = np.matmul(h, p[pre + "w_v"]) + p[pre + "b_v"]
            self.kp[l][0, :, t] = k[0, 0].reshape(H, dh)
            self.vp[l][0, :, t] = v[0, 0].reshape(H, dh)
            qh = q.reshape(1, 2, H, dh).transpose(0, 2, 1, 3)
            s = np.matmul(qh, self.kp[l].transpose(0, 1, 3, 2)) * scale
            s = np.where(valid, s, -np.inf)
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            A = e / e.sum(axis=-1, keepdims=True)
            o = np.matmul(A, self.vp[l])
            om = o.transpose(0, 2, 1, 3).reshape(1, 2, d)
            # same association as the full forward: x + (om @ w_o + b_o)
            x = x + (np.matmul(om, p[pre + "w_o"]) + p[pre + "b_o"])
            h2, _ = _ln_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            g, _ = _gelu(np.matmul(h2, p[pre + "w_ff1"]) + p[pre + "b_ff1"])
            x = x + np.matmul(g, p[pre + "w_ff2"]) + p[pre + "b_ff2"]
        hf, _ = _ln_fwd(x, p["lnf_g"], p["lnf_b"])
        logits = np.matmul(hf, p["w_out"]) + p["b_out"]
        self.length = t + 1
        return logits[0, 0]
