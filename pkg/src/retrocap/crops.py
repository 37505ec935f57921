"""Query region generation: the original image, five crops, and nine crops.

Geometry is integer-pixel and bit-exact across platforms: crop sizes use
round-half-up on ratio * extent, the five-crop center uses floored centering,
and nine-crop offsets are round-half-up of r * (extent - crop) for
r in {0, 0.5, 1} per axis.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

FIVE_RATIO = 0.6
NINE_RATIO = 0.5
MIN_SIDE = 4


class Granularity(enum.Enum):
    ORIGINAL = "original"
    FIVE = "five"
    NINE = "nine"


CROP_COUNTS = {Granularity.ORIGINAL: 1, Granularity.FIVE: 5, Granularity.NINE: 9}

#: (granularity, position) pairs in canonical order: original, five, nine.
ALL_CROP_IDS = [
    (g, j) for g in (Granularity.ORIGINAL, Granularity.FIVE, Granularity.NINE)
    for j in range(CROP_COUNTS[g])
]


@dataclass(frozen=True)
class CropId:
    granularity: Granularity
    position: int

    def __post_init__(self):
        if not 0 <= self.position < CROP_COUNTS[self.granularity]:
            raise ValueError(
                f"position {self.position} out of range for {self.granularity.value}"
            )

    def key(self) -> str:
        return f"{self.granularity.value}/{self.position}"


@dataclass(frozen=True)
class Region:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"region must have positive extent, got {self}")


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def generate_crops(
    width: int,
    height: int,
    granularity: Granularity,
    five_ratio: float = FIVE_RATIO,
    nine_ratio: float = NINE_RATIO,
) -> list[tuple[CropId, Region]]:
    """Deterministic crop regions for one image.

    five-crop order is [top-left, top-right, bottom-left, bottom-right,
    center]; nine-crop is the 3x3 grid row-major.
    """
    if width < MIN_SIDE or height < MIN_SIDE:
        raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE} px")

    if granularity is Granularity.ORIGINAL:
        return [(CropId(granularity, 0), Region(0, 0, width, height))]

    if granularity is Granularity.FIVE:
        w = _round_half_up(five_ratio * width)
        h = _round_half_up(five_ratio * height)
        anchors = [
            (0, 0),
            (width - w, 0),
            (0, height - h),
            (width - w, height - h),
            ((width - w) // 2, (height - h) // 2),
        ]
        return [
            (CropId(granularity, j), Region(x, y, w, h))
            for j, (x, y) in enumerate(anchors)
        ]

    w = _round_half_up(nine_ratio * width)
    h = _round_half_up(nine_ratio * height)
    xs = [_round_half_up(r * (width - w)) for r in (0.0, 0.5, 1.0)]
    ys = [_round_half_up(r * (height - h)) for r in (0.0, 0.5, 1.0)]
    out = []
    for j, (y, x) in enumerate((y, x) for y in ys for x in xs):
        out.append((CropId(granularity, j), Region(x, y, w, h)))
    return out


def generate_all_crops(
    width: int,
    height: int,
    five_ratio: float = FIVE_RATIO,
    nine_ratio: float = NINE_RATIO,
) -> list[tuple[CropId, Region]]:
    """All 15 crops in canonical order (original, five, nine)."""
    out = []
    for g in (Granularity.ORIGINAL, Granularity.FIVE, Granularity.NINE):
        out.extend(generate_crops(width, height, g, five_ratio, nine_ratio))
    return out
