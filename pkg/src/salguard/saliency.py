"""Gradient-times-attention saliency maps and the candidate saliency score."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import NoHistoryError, ShapeError
from .layout import TokenLayout
from .model import AttentionTape

MAIN_TEXT = "main_text"
APPENDIX_TAYLOR = "appendix_taylor"
# Matrix norm used to normalize each layer's summed saliency.
NORM = "fro"


def per_head_saliency(A, G) -> np.ndarray:
    """``tril(|A * G|)``; the diagonal is kept."""
    A, G = np.asarray(A), np.asarray(G)
    if A.shape != G.shape:
        raise ShapeError(f"attention {A.shape} and gradient {G.shape} differ in shape")
    return np.tril(np.abs(A * G))


def layer_saliency(heads) -> tuple[np.ndarray, bool]:
    """Sum per-head maps and divide by the Frobenius norm of the sum.

    Returns ``(matrix, degenerate)``; a zero sum is returned unchanged with
    ``degenerate=True``.
    """
    heads = np.asarray(heads)
    if heads.ndim == 2:
        heads = heads[None]
    if heads.ndim != 3 or heads.shape[0] < 1 or heads.shape[1] != heads.shape[2]:
        raise ShapeError("expected one or more square head matrices")
    total = heads.sum(axis=0)
    norm = np.linalg.norm(total, NORM)
    if norm == 0:
        return total, True
    return total / norm, False


def appendix_saliency(A_heads, G_heads) -> np.ndarray:
    """``tril(|sum_h A_h * G_h|) / H``: absolute value taken after the head sum, no norm."""
    A_heads, G_heads = np.asarray(A_heads), np.asarray(G_heads)
    if A_heads.shape != G_heads.shape or A_heads.ndim != 3:
        raise ShapeError("attention and gradient stacks must both be (H, n, n)")
    H = A_heads.shape[0]
    return np.tril(np.abs((A_heads * G_heads).sum(axis=0))) / H


@dataclass
class SaliencyStack:
    layers: np.ndarray  # (L, n, n)
    mode: str = MAIN_TEXT
    degenerate: tuple = ()

    @property
    def n(self) -> int:
        return self.layers.shape[-1]

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.layers[layer]

    def scaled(self, a: float) -> "SaliencyStack":
        return SaliencyStack(self.layers * a, self.mode, self.degenerate)


def build_stack(tape: AttentionTape, mode: str = MAIN_TEXT) -> SaliencyStack:
    """Saliency stack from a tape whose gradients have been filled."""
    if tape.grad is None:
        from .errors import TapeStateError

        raise TapeStateError("tape has no gradients; run backward_attention first")
    layers, flags = [], []
    for l in range(tape.n_layers):
        if mode == MAIN_TEXT:
            heads = np.stack([per_head_saliency(tape.attn[l, h], tape.grad[l, h]) for h in range(tape.n_heads)])
            mat, deg = layer_saliency(heads)
        elif mode == APPENDIX_TAYLOR:
            mat = appendix_saliency(tape.attn[l], tape.grad[l])
            deg = not mat.any()
        else:
            raise ValueError(f"unknown aggregation mode {mode!r}")
        layers.append(mat)
        flags.append(deg)
    return SaliencyStack(np.stack(layers), mode, tuple(flags))


@dataclass(frozen=True)
class SaliencyScoreConfig:
    """Which layers and which key positions enter the candidate score.

    ``predecessor_only`` restricts the key set to the single position just
    before the query row.
    """

    target_layers: tuple = (2, 3)
    layout: TokenLayout = field(default_factory=TokenLayout)
    predecessor_only: bool = False
    mode: str = MAIN_TEXT

    def __post_init__(self):
        if not self.target_layers:
            raise ValueError("target_layers must be non-empty")
        object.__setattr__(self, "target_layers", tuple(int(l) for l in self.target_layers))

    def validate(self, n_layers: int) -> None:
        if any(l < 0 or l >= n_layers for l in self.target_layers):
            raise ValueError(f"target layers {self.target_layers} out of range for {n_layers} layers")

    def key_positions(self, P: int) -> range:
        if self.predecessor_only:
            j = P - 1
            return range(j, j + 1) if j >= self.layout.start else range(0)
        return self.layout.output_positions(P)


def default_target_layers(n_layers: int) -> tuple:
    """Upper half of the stack."""
    return tuple(range(n_layers // 2, n_layers))


def candidate_score(stack: SaliencyStack, cfg: SaliencyScoreConfig, P: int) -> float:
    """Mean of ``stack[l][P, j]`` over target layers ``l`` and key positions ``j``.

    Raises :class:`NoHistoryError` when the key set is empty.
    """
    J = cfg.key_positions(P)
    if len(J) == 0:
        raise NoHistoryError(f"no output positions before query {P}")
    cfg.validate(stack.n_layers)
    if P >= stack.n:
        raise IndexError(f"query {P} outside stack of size {stack.n}")
    rows = stack.layers[list(cfg.target_layers), P, J.start:J.stop]
    return float(rows.sum() / (len(cfg.target_layers) * len(J)))


# ---------------------------------------------------------------- export


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".layout.json")


def export_map(stack: SaliencyStack, layer: int, path, fmt: str = "triples", layout: Optional[TokenLayout] = None) -> Path:
    """Write one layer's map as CSV plus a JSON sidecar with the layout boundaries.

    ``fmt="triples"``: header ``i,j,value`` then one row per entry, row-major,
    zeros included. ``fmt="grid"``: ``n`` lines of ``n`` comma-separated values.
    """
    if not 0 <= layer < stack.n_layers:
        raise IndexError(f"layer {layer} out of range")
    mat = stack.layers[layer]
    n = mat.shape[0]
    if fmt == "triples":
        lines = ["i,j,value"] + [f"{i},{j},{mat[i, j]:.17g}" for i in range(n) for j in range(n)]
    elif fmt == "grid":
        lines = [",".join(f"{v:.17g}" for v in mat[i]) for i in range(n)]
    else:
        raise ValueError(f"unknown map format {fmt!r}")
    path = Path(path)
    _atomic_write(path, "\n".join(lines) + "\n")
    layout = layout or TokenLayout()
    meta = dict(layout.to_dict(), n=n, layer=layer, mode=stack.mode, format=fmt)
    _atomic_write(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_map(path, fmt: str = "triples") -> np.ndarray:
    text = Path(path).read_text().strip().splitlines()
    if fmt == "grid":
        return np.array([[float(v) for v in line.split(",")] for line in text])
    rows = [line.split(",") for line in text[1:]]
    n = int(round(len(rows) ** 0.5))
    mat = np.zeros((n, n))
    for i, j, v in rows:
        mat[int(i), int(j)] = float(v)
    return mat


def export_svg(mat: np.ndarray, path, layout: Optional[TokenLayout] = None, cell: int = 8) -> Path:
    """Grayscale grid, 10 fixed levels scaled to the matrix maximum, with layout lines."""
    mat = np.asarray(mat)
    n = mat.shape[0]
    peak = mat.max() if mat.size and mat.max() > 0 else 1.0
    size = n * cell
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">']
    for i in range(n):
        for j in range(n):
            level = min(9, int(mat[i, j] / peak * 10))
            shade = 255 - level * 255 // 9
            out.append(
                f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},{shade})"/>'
            )
    if layout is not None:
        for b in sorted({layout.sys_len, layout.sys_len + layout.img_len, layout.prefix_len}):
            if 0 < b < n:
                x = b * cell
                out.append(f'<line x1="{x}" y1="0" x2="{x}" y2="{size}" stroke="red" stroke-width="1"/>')
                out.append(f'<line x1="0" y1="{x}" x2="{size}" y2="{x}" stroke="red" stroke-width="1"/>')
    out.append("</svg>")
    path = Path(path)
    _atomic_write(path, "\n".join(out) + "\n")
    return path
