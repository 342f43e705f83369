from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..model import NanoModel, backward_attention
from ..saliency import SaliencyScoreConfig, build_stack, candidate_score, default_target_layers
from .task import SyntheticSample, is_content

CORRECT = "correct"
HALLUCINATED = "hallucinated"
NEUTRAL = "neutral"


@dataclass
class TokenLabel:
    position: int
    token: int
    label: str
    saliency_prev: Optional[float] = None
    saliency_prompt: Optional[float] = None
    sample_id: Optional[int] = None


def label_of(token: int, sample: SyntheticSample) -> str:
    if not is_content(token):
        return NEUTRAL
    return CORRECT if token in sample.gold else HALLUCINATED


def predecessor_config(sample: SyntheticSample, target_layers) -> SaliencyScoreConfig:
    return SaliencyScoreConfig(target_layers=tuple(target_layers), layout=sample.layout, predecessor_only=True)


def token_saliency(model: NanoModel, seq, position: int, score_cfg: SaliencyScoreConfig, prompt_cols=None):
    """Saliency of ``seq[position]`` read at query row ``position - 1``.

    Returns ``(score, prompt_score)``; ``score`` is None when the key set is empty.
    """
    q = position - 1
    if q < 0 or len(score_cfg.key_positions(q)) == 0:
        return None, None
    _, tape = model.forward(seq[:position], score_cfg.layout)
    stack = build_stack(backward_attention(tape, q, seq[position]), score_cfg.mode)
    score = candidate_score(stack, score_cfg, q)
    prompt = None
    if prompt_cols is not None and len(prompt_cols):
        rows = stack.layers[list(score_cfg.target_layers), q][:, prompt_cols]
        prompt = float(rows.mean())
    return score, prompt


def label_tokens(
    output_tokens,
    sample: SyntheticSample,
    model: Optional[NanoModel] = None,
    target_layers=None,
) -> list:
    """Mechanical labels for a decoded caption.

    With a model, each content token also gets the saliency from its
    immediately preceding token (key set ``{q - 1}`` at query row ``q``) and
    the mean saliency toward the prompt. Neutral tokens get neither.
    """
    prefix = sample.prefix
    seq = list(prefix) + list(output_tokens)
    cfg = None
    prompt_cols = None
    if model is not None:
        layers = target_layers if target_layers is not None else default_target_layers(model.config.n_layers)
        cfg = predecessor_config(sample, layers)
        lay = sample.layout
        prompt_cols = list(range(lay.sys_len + lay.img_len, lay.prefix_len))
    out = []
    for k, tok in enumerate(output_tokens):
        pos = len(prefix) + k
        lab = label_of(int(tok), sample)
        sal = prm = None
        if cfg is not None and lab != NEUTRAL:
            sal, prm = token_saliency(model, seq, pos, cfg, prompt_cols)
        out.append(TokenLabel(pos, int(tok), lab, sal, prm, sample.sample_id))
    return out


def hallucination_counts(output_tokens, sample: SyntheticSample) -> tuple[int, int]:
    """(hallucinated content tokens, content tokens)."""
    content = [t for t in output_tokens if is_content(t)]
    return sum(t not in sample.gold for t in content), len(content)


def recall(output_tokens, sample: SyntheticSample) -> tuple[int, int]:
    """(gold tokens mentioned, gold tokens)."""
    said = set(int(t) for t in output_tokens)
    return len(sample.gold & said), len(sample.gold)
