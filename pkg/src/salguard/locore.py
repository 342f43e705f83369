"""Local coherence reinforcement: boost the final query's attention to recent outputs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import HookError, ShapeError
from .layout import TokenLayout
from .model import AttentionEdit, NanoModel


@dataclass(frozen=True)
class LocoREConfig:
    beta: float = 0.15
    window: int = 5
    renormalize: bool = False
    layout: Optional[TokenLayout] = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def gain_vector(P: int, layout: TokenLayout, beta: float, window: int) -> np.ndarray:
    """Gains for keys ``j`` in ``[layout.start, P)``: ``1 + beta`` when ``P - j <= window``."""
    j = np.arange(layout.start, max(layout.start, P))
    return 1.0 + beta * ((P - j) <= window)


def apply_gain(row, gains, start: int, renormalize: bool = False) -> np.ndarray:
    """Scale ``row[start:start + len(gains)]`` by ``gains``.

    Entries before ``start`` are only touched by the optional renormalization.
    """
    row = np.array(row, copy=True)
    gains = np.asarray(gains)
    stop = start + gains.shape[-1]
    if stop > row.shape[-1]:
        raise ShapeError(f"gain vector of length {gains.shape[-1]} does not fit row of length {row.shape[-1]}")
    if gains.size == 0:
        return row
    row[..., start:stop] = row[..., start:stop] * gains
    if renormalize:
        row = row / row.sum(axis=-1, keepdims=True)
    return row


class LocoREEdit(AttentionEdit):
    """Applies the gain to the last query row of every layer and head."""

    def __init__(self, cfg: LocoREConfig, layout: Optional[TokenLayout] = None):
        layout = layout if layout is not None else cfg.layout
        if layout is None:
            raise ValueError("LocoRE needs a token layout")
        self.cfg = cfg
        self.layout = layout

    def _gains(self, n):
        P = n - 1
        if self.cfg.beta == 0:
            return P, None
        # every layer of a forward asks for the same vector
        if getattr(self, "_cached", (None,))[0] != n:
            g = gain_vector(P, self.layout, self.cfg.beta, self.cfg.window)
            self._cached = (n, g if g.size else None)
        return P, self._cached[1]

    def apply(self, layer, A):
        P, g = self._gains(A.shape[-2])
        if g is None:
            return A
        A = A.copy()
        start = self.layout.start
        if self.cfg.renormalize:
            A[..., P, :] = apply_gain(A[..., P, :], g, start, True)
        else:
            A[..., P, start : start + g.size] *= g
        return A

    def vjp(self, layer, A, dA_out):
        P, g = self._gains(A.shape[-2])
        if g is None:
            return dA_out
        start, stop = self.layout.start, self.layout.start + g.size
        dA = dA_out.copy()
        dy = dA_out[..., P, :]
        if self.cfg.renormalize:
            u = A[..., P, :].copy()
            u[..., start:stop] *= g
            s = u.sum(axis=-1, keepdims=True)
            y = u / s
            dy = (dy - (dy * y).sum(axis=-1, keepdims=True)) / s
        row = dy.copy()
        row[..., start:stop] *= g
        dA[..., P, :] = row
        return dA


@dataclass
class LocoREHook:
    """Handle for a LocoRE edit installed on a model."""

    model: NanoModel
    edit: LocoREEdit
    active: bool = field(default=True)

    def remove(self) -> None:
        if not self.active:
            raise HookError("hook already removed")
        self.model.remove_edit(self.edit)
        self.active = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.active:
            self.remove()


def install_hook(model: NanoModel, cfg: LocoREConfig, layout: Optional[TokenLayout] = None) -> LocoREHook:
    """Install LocoRE on every forward of ``model`` until the hook is removed."""
    if any(isinstance(e, LocoREEdit) for e in model.installed_edits):
        raise HookError("a LocoRE hook is already installed on this model")
    edit = LocoREEdit(cfg, layout)
    model.install_edit(edit)
    return LocoREHook(model, edit)
