"""Synthetic grounded-captioning task with a mechanical hallucination oracle.

A scene is a set of (object, attribute) pairs. The "image" is the pairs laid
out as token ids in ``IMG_LEN`` slots, and the reference caption reads
``obj IS attr SEP obj IS attr ... EOS`` in image order. The prompt is
``DESCRIBE`` followed by zero or more hint attributes; hints that are not in
the scene are the distractors.

Captions in the training corpus carry annotator noise: with probability
``noise`` an attribute slot is filled by a prompt hint (or, when there are
no hints, by the object's typical attribute) instead of the image's value.
A model trained on this data learns to follow hints some of the time, which
is how it comes to hallucinate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..layout import TokenLayout

PAD, SYS0, SYS1, DESCRIBE, EOS, IS, SEP, IMG_PAD = range(8)
FUNCTION_TOKENS = frozenset(range(16))
OBJ_BASE, N_OBJ = 16, 24
ATTR_BASE, N_ATTR = 40, 40
VOCAB_SIZE = 96
SYS_LEN, IMG_LEN = 2, 8
MAX_OBJECTS = IMG_LEN // 2

OBJECTS = tuple(range(OBJ_BASE, OBJ_BASE + N_OBJ))
ATTRIBUTES = tuple(range(ATTR_BASE, ATTR_BASE + N_ATTR))


def typical_attribute(obj: int) -> int:
    """Fixed language prior: each object has a habitual attribute."""
    return ATTR_BASE + ((obj - OBJ_BASE) * 7) % N_ATTR


def is_content(token: int) -> bool:
    return OBJ_BASE <= token < ATTR_BASE + N_ATTR


@dataclass(frozen=True)
class Difficulty:
    min_objects: int
    max_objects: int
    max_distractors: int
    noise: float

    @classmethod
    def level(cls, difficulty: int) -> "Difficulty":
        if difficulty <= 0:
            return cls(1, 1, 0, 0.0)
        if difficulty == 1:
            return cls(1, 3, 1, 0.15)
        if difficulty == 2:
            return cls(2, 4, 2, 0.25)
        return cls(3, 4, 2, 0.35)


DEFAULT_DIFFICULTY = 2


@dataclass
class SyntheticSample:
    sample_id: int
    scene: list  # [(obj, attr), ...] in image order
    image_tokens: list
    prompt: list
    caption: list  # training target, may contain annotator noise, ends with EOS
    distractors: list = field(default_factory=list)

    @property
    def gold(self) -> frozenset:
        return frozenset(t for pair in self.scene for t in pair)

    @property
    def gold_attributes(self) -> frozenset:
        return frozenset(a for _, a in self.scene)

    @property
    def prefix(self) -> list:
        return [SYS0, SYS1] + list(self.image_tokens) + list(self.prompt)

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(SYS_LEN, IMG_LEN, len(self.prompt))

    def reference_caption(self) -> list:
        out = []
        for i, (o, a) in enumerate(self.scene):
            if i:
                out.append(SEP)
            out += [o, IS, a]
        return out + [EOS]

    def to_json(self) -> dict:
        return {
            "id": self.sample_id,
            "scene": [list(p) for p in self.scene],
            "image_tokens": list(self.image_tokens),
            "prompt": list(self.prompt),
            "caption": list(self.caption),
            "distractors": list(self.distractors),
            "gold": sorted(self.gold),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSample":
        return cls(d["id"], [tuple(p) for p in d["scene"]], d["image_tokens"], d["prompt"], d["caption"], d.get("distractors", []))


def _make_sample(rng: np.random.Generator, sample_id: int, diff: Difficulty) -> SyntheticSample:
    m = int(rng.integers(diff.min_objects, diff.max_objects + 1))
    objs = [int(o) for o in rng.choice(OBJECTS, size=m, replace=False)]
    attrs = [int(a) for a in rng.choice(ATTRIBUTES, size=m, replace=False)]
    for i, o in enumerate(objs):
        # half of the scenes follow the prior, when the prior is still free
        t = typical_attribute(o)
        if rng.random() < 0.5 and t not in attrs:
            attrs[i] = t
    scene = list(zip(objs, attrs))
    # pairs sit in random slots so that caption order cannot be read off positions
    slots = sorted(int(k) for k in rng.choice(MAX_OBJECTS, size=m, replace=False))
    image = [IMG_PAD] * IMG_LEN
    for k, (o, a) in zip(slots, scene):
        image[2 * k : 2 * k + 2] = [o, a]
    n_d = int(rng.integers(0, diff.max_distractors + 1))
    pool = [a for a in ATTRIBUTES if a not in attrs]
    distractors = [int(a) for a in rng.choice(pool, size=n_d, replace=False)] if n_d else []
    prompt = [DESCRIBE] + distractors
    caption = []
    for i, (o, a) in enumerate(scene):
        if i:
            caption.append(SEP)
        said = a
        if diff.noise and rng.random() < diff.noise:
            said = int(rng.choice(distractors)) if distractors else typical_attribute(o)
        caption += [o, IS, said]
    caption.append(EOS)
    return SyntheticSample(sample_id, scene, image, prompt, caption, distractors)


def gen_corpus(seed: int, n_samples: int, difficulty: int = DEFAULT_DIFFICULTY) -> list:
    """Deterministic corpus of ``n_samples`` scenes."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    diff = Difficulty.level(difficulty)
    rng = np.random.default_rng((int(seed), int(difficulty)))
    return [_make_sample(rng, i, diff) for i in range(n_samples)]


def training_sequences(corpus) -> tuple[list, list]:
    """``(sequences, target_start)``: full token sequences and the index of the first caption token."""
    seqs, starts = [], []
    for s in corpus:
        seqs.append(s.prefix + list(s.caption))
        starts.append(len(s.prefix))
    return seqs, starts


def write_corpus(corpus, path) -> None:
    from ..saliency import _atomic_write

    _atomic_write(Path(path), "".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in corpus))


def read_corpus(path) -> list:
    return [SyntheticSample.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
