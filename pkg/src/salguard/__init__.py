"""Gradient x attention saliency, saliency-guided rejection sampling and
local coherence reinforcement on a small numpy transformer."""
from pathlib import Path

from .layout import TokenLayout
from .locore import LocoREConfig, install_hook
from .model import ModelConfig, NanoModel, backward_attention, loss_ce
from .saliency import SaliencyScoreConfig, build_stack, candidate_score
from .sgrs import SGRSConfig, decode, sgrs_step

__version__ = "0.1.0"

_DATA = Path(__file__).with_name("data")


def reference_checkpoint_path() -> Path:
    """The bundled checkpoint trained on the default synthetic task."""
    return _DATA / "reference.nmdl"


__all__ = [
    "LocoREConfig",
    "ModelConfig",
    "NanoModel",
    "SGRSConfig",
    "SaliencyScoreConfig",
    "TokenLayout",
    "backward_attention",
    "build_stack",
    "candidate_score",
    "decode",
    "install_hook",
    "loss_ce",
    "reference_checkpoint_path",
    "sgrs_step",
]
