"""Adam training of the toy model on caption tokens."""
from __future__ import annotations

import logging

import numpy as np

from .errors import TrainingError
from .model import ModelConfig, NanoModel, log_softmax

log = logging.getLogger(__name__)


def _batch(seqs, starts, idx, pad):
    n = max(len(seqs[i]) for i in idx)
    toks = np.full((len(idx), n), pad, dtype=np.int64)
    mask = np.zeros((len(idx), n))
    targets = np.zeros((len(idx), n), dtype=np.int64)
    for r, i in enumerate(idx):
        s = seqs[i]
        toks[r, : len(s)] = s
        targets[r, : len(s) - 1] = s[1:]
        # logits at position t predict token t + 1
        mask[r, starts[i] - 1 : len(s) - 1] = 1.0
    return toks, targets, mask


def batch_loss(model: NanoModel, toks, targets, mask, grads: bool = True):
    logits, cache = model._forward_batch(toks, pad_keys=False)
    lp = log_softmax(logits)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    denom = mask.sum()
    loss = float(-(picked * mask).sum() / denom)
    if not grads:
        return loss, None
    dlogits = np.exp(lp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (mask / denom)[..., None]
    g, _ = model._backward_batch(cache, dlogits.astype(logits.dtype))
    return loss, g


def corpus_loss(model: NanoModel, seqs, starts, pad: int = 0, batch_size: int = 128) -> float:
    total, count = 0.0, 0.0
    for b in range(0, len(seqs), batch_size):
        idx = list(range(b, min(b + batch_size, len(seqs))))
        toks, targets, mask = _batch(seqs, starts, idx, pad)
        loss, _ = batch_loss(model, toks, targets, mask, grads=False)
        total += loss * mask.sum()
        count += mask.sum()
    return total / count


def train_toy(
    seqs,
    starts,
    config: ModelConfig,
    epochs: int = 30,
    lr: float = 3e-3,
    batch_size: int = 64,
    pad: int = 0,
    weight_decay: float = 0.0,
    model: NanoModel | None = None,
    log_every: int = 0,
    train_precision: int | None = None,
) -> NanoModel:
    """Train from the seeded initialization. Deterministic given ``config.rng_seed``.

    ``lr`` follows a linear warmup over the first epoch and a cosine decay.
    ``train_precision=32`` runs the optimization in single precision; the
    returned model always has ``config.precision``.
    """
    if not seqs:
        raise ValueError("training corpus is empty")
    model = model.copy() if model is not None else NanoModel(config)
    if epochs <= 0:
        return model
    if train_precision is not None and train_precision != config.precision:
        model = model.with_precision(train_precision)
    rng = np.random.default_rng((config.rng_seed, 1))
    params = model.params
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.98, 1e-9
    steps_per_epoch = (len(seqs) + batch_size - 1) // batch_size
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(seqs))
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            toks, targets, mask = _batch(seqs, starts, idx, pad)
            loss, g = batch_loss(model, toks, targets, mask)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            step += 1
            warm = min(1.0, step / max(1, steps_per_epoch))
            rate = lr * warm * 0.5 * (1 + np.cos(np.pi * step / total))
            for k in params:
                gk = g[k]
                m[k] = b1 * m[k] + (1 - b1) * gk
                v[k] = b2 * v[k] + (1 - b2) * gk * gk
                mh = m[k] / (1 - b1**step)
                vh = v[k] / (1 - b2**step)
                upd = mh / (np.sqrt(vh) + eps)
                if weight_decay and params[k].ndim == 2:
                    upd = upd + weight_decay * params[k]
                params[k] = params[k] - rate * upd
            running += loss
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.4f", epoch + 1, running / steps_per_epoch)
    if model.config.precision != config.precision:
        model = model.with_precision(config.precision)
    return model
