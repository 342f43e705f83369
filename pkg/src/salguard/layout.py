from __future__ import annotations

from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True)
class TokenLayout:
    """Partition of a sequence into system, image, prompt and output tokens.

    ``output_start`` defaults to ``sys_len + img_len``, which places the prompt
    inside the output-position set. Setting it to
    ``sys_len + img_len + prompt_len`` restricts the set to generated tokens.
    """

    sys_len: int = 2
    img_len: int = 8
    prompt_len: int = 0
    output_start: Optional[int] = None

    def __post_init__(self):
        for name in ("sys_len", "img_len", "prompt_len"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.output_start is not None and self.output_start < 0:
            raise ValueError("output_start must be non-negative")

    @property
    def start(self) -> int:
        if self.output_start is None:
            return self.sys_len + self.img_len
        return self.output_start

    @property
    def prefix_len(self) -> int:
        """Length of system + image + prompt, i.e. where generation begins."""
        return self.sys_len + self.img_len + self.prompt_len

    def output_positions(self, query: int) -> range:
        """Positions ``j`` with ``start <= j < query``."""
        return range(self.start, max(self.start, query))

    def with_text_reading(self) -> "TokenLayout":
        """Copy whose output set excludes the prompt."""
        return TokenLayout(self.sys_len, self.img_len, self.prompt_len, self.prefix_len)

    def to_dict(self) -> dict:
        return {
            "sys_len": self.sys_len,
            "img_len": self.img_len,
            "prompt_len": self.prompt_len,
            "output_start": self.start,
        }
