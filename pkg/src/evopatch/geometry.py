"""Chromosome genome and nose-relative patch arithmetic."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


class DimensionError(ValueError):
    """Patch does not fit inside the image."""


@dataclass(frozen=True, order=True)
class PatchOffset:
    """Top-left corner of a patch, relative to the nose landmark."""

    x: int
    y: int


@dataclass(frozen=True)
class PatchRect:
    left: int
    top: int
    width: int
    height: int

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def bottom(self) -> int:
        return self.top + self.height

    def area(self) -> int:
        return self.width * self.height

    def iou(self, other: "PatchRect") -> float:
        ix = max(0, min(self.right, other.right) - max(self.left, other.left))
        iy = max(0, min(self.bottom, other.bottom) - max(self.top, other.top))
        inter = ix * iy
        union = self.area() + other.area() - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class Chromosome:
    """Patch size (alpha wide, beta high) plus an ordered list of offsets.

    Instances are immutable; the GA operators always build new ones.
    """

    alpha: int
    beta: int
    patches: tuple[PatchOffset, ...]

    def __post_init__(self):
        if self.alpha < 1 or self.beta < 1:
            raise ValueError(f"patch size must be positive, got {self.alpha}x{self.beta}")
        if len(self.patches) < 1:
            raise ValueError("a chromosome needs at least one patch")
        # accept lists / plain pairs from callers
        object.__setattr__(
            self, "patches", tuple(p if isinstance(p, PatchOffset) else PatchOffset(*p) for p in self.patches)
        )

    def __len__(self) -> int:
        return len(self.patches)

    def replace_patches(self, patches: Iterable[PatchOffset]) -> "Chromosome":
        return Chromosome(self.alpha, self.beta, tuple(patches))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "patches": [[p.x, p.y] for p in self.patches]}

    @classmethod
    def from_dict(cls, d: dict) -> "Chromosome":
        try:
            return cls(int(d["alpha"]), int(d["beta"]), tuple(PatchOffset(int(x), int(y)) for x, y in d["patches"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed chromosome: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Chromosome":
        return cls.from_dict(json.loads(Path(path).read_text()))


def resolve_rect(
    offset: PatchOffset,
    nose: Sequence[int],
    alpha: int,
    beta: int,
    image_dims: Sequence[int],
) -> PatchRect:
    """Place an alpha x beta window at ``nose + offset`` and clamp it into the image.

    ``image_dims`` is ``(width, height)``. Each coordinate is clamped on its own
    and the window is never shrunk, so the result always lies fully inside.
    """
    width, height = image_dims
    if width <= 0 or height <= 0:
        raise DimensionError(f"image dims must be positive, got {width}x{height}")
    if alpha > width or beta > height:
        raise DimensionError(f"patch {alpha}x{beta} larger than image {width}x{height}")
    left = int(nose[0]) + offset.x
    top = int(nose[1]) + offset.y
    left = max(0, min(left, width - alpha))
    top = max(0, min(top, height - beta))
    return PatchRect(left, top, alpha, beta)


def chromosome_rects(c: Chromosome, nose: Sequence[int], image_dims: Sequence[int]) -> list[PatchRect]:
    return [resolve_rect(p, nose, c.alpha, c.beta, image_dims) for p in c.patches]


def chromosome_signature(c: Chromosome) -> bytes:
    """Canonical byte key; permutations of the patch list map to the same key."""
    genes = sorted((p.x, p.y) for p in c.patches)
    flat = [c.alpha, c.beta, len(genes)] + [v for xy in genes for v in xy]
    return struct.pack(f"<{len(flat)}q", *flat)
