"""Point and box prompts for a promptable segmenter, built from a coarse grid mask.

Positive points come from the coarse mask inside the predicted box, negative
points from the coarse mask outside it.  When neither region has a pixel the
prompt falls back to the box alone.

Negatives are taken from the mask outside the box rather than from background;
this inverts the usual convention and is kept on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import geometry as geo
from .geometry import HBB, GridMask

MAX_POINTS = 3


@dataclass(frozen=True)
class SamPrompt:
    positive_points: Tuple[Tuple[int, int], ...]
    negative_points: Tuple[Tuple[int, int], ...]
    box: Tuple[float, float, float, float]  # pixels, x1 y1 x2 y2
    fallback_box_only: bool

    def to_json(self, image: str = "") -> dict:
        points = list(self.positive_points) + list(self.negative_points)
        return {
            "image": image,
            "box": list(self.box),
            "point_coords": [list(p) for p in points],
            "point_labels": [1] * len(self.positive_points) + [0] * len(self.negative_points),
            "fallback_box_only": self.fallback_box_only,
        }


def box_region(box: HBB, width: int, height: int) -> np.ndarray:
    """Pixels whose centers lie inside the box (edges inclusive)."""
    x1, y1, x2, y2 = box.to_pixels(width, height)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    inx = (xs >= x1) & (xs <= x2)
    iny = (ys >= y1) & (ys <= y2)
    return iny[:, None] & inx[None, :]


def prompt_regions(grid: GridMask, box: HBB, width: int, height: int):
    coarse = geo.upsample(grid, width, height).bits.astype(bool)
    inside = box_region(box, width, height)
    return coarse & inside, coarse & ~inside


def _sample(region: np.ndarray, rng: np.random.Generator) -> Tuple[Tuple[int, int], ...]:
    flat = np.flatnonzero(region)
    if flat.size == 0:
        return ()
    picks = rng.choice(flat, size=min(MAX_POINTS, flat.size), replace=False)
    w = region.shape[1]
    return tuple((int(i % w), int(i // w)) for i in picks)


def make_prompt(grid: GridMask, pred_box: HBB, image_dims, rng_seed=0) -> SamPrompt:
    """Build the prompt bundle; ``image_dims`` is ``(width, height)`` in pixels."""
    width, height = image_dims
    positive, negative = prompt_regions(grid, pred_box, width, height)
    rng = np.random.default_rng(rng_seed)
    pos = _sample(positive, rng)
    neg = _sample(negative, rng)
    return SamPrompt(pos, neg, pred_box.to_pixels(width, height), not pos and not neg)
