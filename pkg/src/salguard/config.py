"""Flat ``key = value`` run configuration with dotted namespaces.

Example file::

    # comments start with '#'
    model.d_model = 64
    sgrs.alpha = 0.6
    locore.beta = 0.15
    harness.alphas = 0,0.6

Every key has a default; files and command-line overrides may only set known
keys. Values are parsed according to the type of the default.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    default: object
    kind: str  # int, float, bool, str, ints, floats, strs
    help: str


KEYS = {
    "model.n_layers": Key(4, "int", "transformer blocks"),
    "model.n_heads": Key(4, "int", "attention heads per block"),
    "model.d_model": Key(64, "int", "residual width"),
    "model.vocab_size": Key(96, "int", "vocabulary size"),
    "model.max_seq_len": Key(64, "int", "longest sequence"),
    "model.rng_seed": Key(0, "int", "initialization and shuffling seed"),
    "model.precision": Key(64, "int", "float width of the stored model (32 or 64)"),
    "train.samples": Key(4000, "int", "training corpus size"),
    "train.corpus_seed": Key(1, "int", "training corpus seed"),
    "train.epochs": Key(30, "int", "training epochs"),
    "train.lr": Key(3e-3, "float", "peak learning rate"),
    "train.batch_size": Key(64, "int", "minibatch size"),
    "train.precision": Key(32, "int", "float width used during optimization"),
    "layout.text_reading": Key(False, "bool", "output positions start after the prompt instead of after the image"),
    "saliency.target_layers": Key((2, 3), "ints", "layers averaged by the candidate score"),
    "saliency.mode": Key("main_text", "str", "main_text or appendix_taylor"),
    "sgrs.top_k": Key(5, "int", "candidates per step"),
    "sgrs.rounds": Key(0, "int", "rejection rounds (0 means top_k)"),
    "sgrs.alpha": Key(0.6, "float", "threshold sensitivity"),
    "sgrs.window": Key(10, "int", "history window in tokens"),
    "sgrs.temperature": Key(1.0, "float", "sampling temperature (0 is greedy)"),
    "sgrs.history_on_fallback": Key(True, "bool", "record fallback picks in the history"),
    "sgrs.score_with_locore": Key(False, "bool", "score candidates with the gain active"),
    "locore.beta": Key(0.15, "float", "gain strength"),
    "locore.window": Key(5, "int", "number of recent output positions boosted"),
    "locore.renormalize": Key(False, "bool", "renormalize the boosted row"),
    "harness.checkpoint": Key("", "str", "model file (empty: the bundled reference model)"),
    "harness.samples": Key(2000, "int", "evaluation corpus size"),
    "harness.corpus_seed": Key(999, "int", "evaluation corpus seed"),
    "harness.difficulty": Key(2, "int", "task difficulty level"),
    "harness.max_new_tokens": Key(16, "int", "decode budget per sample"),
    "harness.mode": Key("baseline", "str", "decode mode for the decode command"),
    "harness.factors": Key((1.0, 0.8, 0.6, 0.4, 0.2), "floats", "decay factors for the intervention"),
    "harness.quantile": Key(0.75, "float", "saliency quantile selecting intervention targets"),
    "harness.alphas": Key((0.0, 0.6), "floats", "sweep grid for sgrs.alpha"),
    "harness.betas": Key((0.0, 0.1, 0.15, 0.2, 1.0), "floats", "sweep grid for locore.beta"),
    "harness.modes": Key(("baseline", "sgrs", "locore", "sgrs+locore"), "strs", "sweep decode modes"),
    "map.sample": Key(0, "int", "corpus sample whose sequence is mapped"),
    "map.layer": Key(3, "int", "layer to export"),
    "map.position": Key(-1, "int", "query row of the loss (-1: last position)"),
    "map.format": Key("triples", "str", "triples or grid"),
}


def _parse(key: str, raw: str):
    kind = KEYS[key].kind
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if kind == "ints":
            return tuple(int(p) for p in parts)
        if kind == "floats":
            return tuple(float(p) for p in parts)
        return tuple(parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}", key=key) from None


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v.default for k, v in KEYS.items()})
    seed: int = 0

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        self.values[key] = _parse(key, raw) if isinstance(raw, str) else raw

    def update_text(self, text: str, source: str = "<config>") -> None:
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key = value", key=line)
            key, raw = line.split("=", 1)
            self.set(key.strip(), raw)

    def dump(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.values.items()))


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``(key, value)`` overrides."""
    cfg = RunConfig()
    if path:
        cfg.update_text(Path(path).read_text(), str(path))
    for key, raw in overrides:
        cfg.set(key, raw)
    return cfg


def key_help() -> str:
    width = max(len(k) for k in KEYS)
    return "\n".join(f"  {k:<{width}}  {format_value(v.default):<24} {v.help}" for k, v in KEYS.items())
