"""Value types for grounding signals (HBB, OBB, mask) and the geometry between them.

All coordinates are normalized to the image: ``x`` is a fraction of the width and
``y`` a fraction of the height, with the origin at the top-left corner and ``y``
pointing down.  Angles of oriented boxes are in degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

Point = Tuple[float, float]

# Relative overshoot tolerated when building boxes from pixel annotations.
PIXEL_OVERSHOOT = 0.01

DOWNSAMPLE_MODES = ("max_pool", "nearest")


class EmptyMaskError(ValueError):
    """The mask has no foreground, so the referred object vanished."""


def _clamp01(v: float) -> float:
    return min(max(v, 0.0), 1.0)


def _normalize_pixel(v: float, size: float, name: str) -> float:
    frac = v / size
    if frac < -PIXEL_OVERSHOOT or frac > 1.0 + PIXEL_OVERSHOOT:
        raise ValueError(f"{name}={v} is outside the image extent {size}")
    return _clamp01(frac)


@dataclass(frozen=True)
class HBB:
    """Axis-aligned box ``(x1, y1, x2, y2)`` in normalized coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite HBB coordinates {vals}")
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValueError(f"invalid HBB {vals}")

    @classmethod
    def from_pixels(cls, x1, y1, x2, y2, width, height) -> "HBB":
        """Normalize a pixel box, clamping small overshoot and reordering corners."""
        xs = sorted((_normalize_pixel(x1, width, "x1"), _normalize_pixel(x2, width, "x2")))
        ys = sorted((_normalize_pixel(y1, height, "y1"), _normalize_pixel(y2, height, "y2")))
        return cls(xs[0], ys[0], xs[1], ys[1])

    @classmethod
    def enclosing(cls, xs: Iterable[float], ys: Iterable[float]) -> "HBB":
        xs, ys = list(xs), list(ys)
        return cls(_clamp01(min(xs)), _clamp01(min(ys)), _clamp01(max(xs)), _clamp01(max(ys)))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_pixels(self, width, height) -> tuple:
        return (self.x1 * width, self.y1 * height, self.x2 * width, self.y2 * height)

    def contains(self, x: float, y: float, tol: float = 0.0) -> bool:
        return (self.x1 - tol <= x <= self.x2 + tol) and (self.y1 - tol <= y <= self.y2 + tol)


@dataclass(frozen=True)
class OBB:
    """Oriented box: center, side lengths and an angle in ``[0, 90)`` degrees.

    ``lw`` is the side running along ``theta`` and ``sw`` the perpendicular one.
    Every rectangle has exactly one side whose direction lies in ``[0, 90)``
    degrees, which makes the form unique; ``lw >= sw`` holds whenever the long
    side is that one.  Use :func:`canonical_obb` to build one from an arbitrary
    ``(w, h, angle)`` triple.
    """

    cx: float
    cy: float
    lw: float
    sw: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.lw, self.sw, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite OBB fields {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"OBB center outside the image: {vals}")
        if self.lw < 0 or self.sw < 0:
            raise ValueError(f"negative OBB side: {vals}")
        if not 0.0 <= self.theta < 90.0:
            raise ValueError(f"OBB angle must lie in [0, 90): {vals}")

    @classmethod
    def from_pixels(cls, cx, cy, w, h, theta_deg, width, height) -> "OBB":
        """Normalize a pixel-space rotated box.

        For square images this is a plain rescale.  Otherwise the normalized
        corners form a parallelogram and the minimum-area rectangle around them
        is returned.
        """
        ncx = _normalize_pixel(cx, width, "cx")
        ncy = _normalize_pixel(cy, height, "cy")
        if width == height:
            return canonical_obb(ncx, ncy, w / width, h / height, theta_deg)
        pix = canonical_obb(0.5, 0.5, w, h, theta_deg)
        pts = [((x - 0.5 + cx) / width, (y - 0.5 + cy) / height) for x, y in _rect_corners(pix)]
        fitted = min_area_rect(pts)
        return replace_center(fitted, ncx, ncy)

    @property
    def area(self) -> float:
        return self.lw * self.sw

    def as_tuple(self) -> tuple:
        return (self.cx, self.cy, self.lw, self.sw, self.theta)


def replace_center(obb: OBB, cx: float, cy: float) -> OBB:
    return OBB(cx, cy, obb.lw, obb.sw, obb.theta)


def canonical_obb(cx: float, cy: float, w: float, h: float, theta: float) -> OBB:
    """Fold ``(w along theta, h perpendicular)`` into the unique ``[0, 90)`` form."""
    if w < 0 or h < 0:
        raise ValueError("side lengths must be non-negative")
    if w == h:
        return OBB(_clamp01(cx), _clamp01(cy), w, h, _fold(theta % 90.0, 90.0))
    phi = _fold(theta % 180.0, 180.0)
    if phi >= 90.0:
        w, h, phi = h, w, _fold(phi - 90.0, 90.0)
    return OBB(_clamp01(cx), _clamp01(cy), w, h, phi)


def _fold(a: float, period: float) -> float:
    # float modulo can return the period itself for tiny negative inputs
    return 0.0 if a >= period else a


@dataclass(frozen=True)
class Quad:
    """Four vertices, counter-clockwise in the usual math orientation."""

    points: Tuple[Point, Point, Point, Point]

    def __post_init__(self):
        if len(self.points) != 4:
            raise ValueError(f"a quad needs exactly 4 vertices, got {len(self.points)}")

    def __iter__(self):
        return iter(self.points)

    @property
    def area(self) -> float:
        return abs(polygon_area(self.points))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)


def _rect_corners(obb: OBB) -> list:
    t = math.radians(obb.theta)
    c, s = math.cos(t), math.sin(t)
    hw, hh = obb.lw / 2.0, obb.sw / 2.0
    out = []
    for dx, dy in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)):
        out.append((obb.cx + c * dx - s * dy, obb.cy + s * dx + c * dy))
    return out


def obb_corners(obb: OBB) -> Quad:
    return Quad(tuple(_rect_corners(obb)))


def obb_to_hbb(obb: OBB) -> HBB:
    """Enclosing HBB from the min/max of the four corners, clamped into the image."""
    pts = _rect_corners(obb)
    return HBB.enclosing((p[0] for p in pts), (p[1] for p in pts))


def hbb_to_obb(box: HBB) -> OBB:
    return canonical_obb(
        (box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0, box.width, box.height, 0.0
    )


def hbb_iou(a: HBB, b: HBB) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union) if union > 0 else 0.0


def polygon_area(points: Sequence[Point]) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    n = len(points)
    acc = 0.0
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return acc / 2.0


def clip_convex(subject: Sequence[Point], clip: Sequence[Point]) -> list:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = list(subject)
    m = len(clip)
    for i in range(m):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % m]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs, output = output, []
        prev = inputs[-1]
        sp = side(prev)
        for cur in inputs:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    output.append(_intersect(prev, cur, sp, sc))
                output.append(cur)
            elif sp >= 0:
                output.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(a: OBB, b: OBB) -> float:
    area_a, area_b = a.area, b.area
    if area_a <= 0 or area_b <= 0:
        return 0.0
    if a.theta == 0.0 and b.theta == 0.0:
        # exact axis-aligned path; keeps agreement with hbb_iou at machine precision
        return _axis_aligned_iou(a, b)
    inter_poly = clip_convex(_rect_corners(a), _rect_corners(b))
    inter = abs(polygon_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    union = area_a + area_b - inter
    return min(1.0, max(0.0, inter / union)) if union > 0 else 0.0


def _axis_aligned_iou(a: OBB, b: OBB) -> float:
    iw = min(a.cx + a.lw / 2, b.cx + b.lw / 2) - max(a.cx - a.lw / 2, b.cx - b.lw / 2)
    ih = min(a.cy + a.sw / 2, b.cy + b.sw / 2) - max(a.cy - a.sw / 2, b.cy - b.sw / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (a.area + b.area - inter))


# --------------------------------------------------------------------------- masks


def _as_bits(arr, shape) -> np.ndarray:
    a = np.asarray(arr)
    if a.size != shape[0] * shape[1]:
        raise ValueError(f"expected {shape[0] * shape[1]} values, got {a.size}")
    if a.dtype != bool:
        if a.size and not ((a == 0) | (a == 1)).all():
            raise ValueError("mask values must be 0 or 1")
    a = a.reshape(shape).astype(np.uint8)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridMask:
    """``n`` x ``n`` binary occupancy grid, stored as a read-only uint8 array."""

    n: int
    cells: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid resolution must be >= 1")
        object.__setattr__(self, "cells", _as_bits(self.cells, (self.n, self.n)))

    @classmethod
    def from_rows(cls, rows: Sequence[str]) -> "GridMask":
        n = len(rows)
        if any(len(r) != n for r in rows):
            raise ValueError("grid rows must form a square")
        flat = np.frombuffer("".join(rows).encode("ascii"), dtype=np.uint8) - ord("0")
        if flat.size and flat.max() > 1:
            raise ValueError("grid rows may only contain '0' and '1'")
        return cls(n, flat.reshape(n, n))

    def rows(self) -> list:
        text = (self.cells + ord("0")).tobytes().decode("ascii")
        return [text[i : i + self.n] for i in range(0, self.n * self.n, self.n)]

    @property
    def count(self) -> int:
        return int(self.cells.sum())

    @property
    def empty(self) -> bool:
        return not self.cells.any()

    def __eq__(self, other):
        if not isinstance(other, GridMask):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.cells, other.cells)

    def __hash__(self):
        return hash((self.n, self.cells.tobytes()))


@dataclass(frozen=True, eq=False)
class PixelMask:
    """Full-resolution binary mask; ``bits`` has shape ``(height, width)``."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("mask dimensions must be >= 1")
        object.__setattr__(self, "bits", _as_bits(self.bits, (self.height, self.width)))

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def empty(self) -> bool:
        return not self.bits.any()

    def __eq__(self, other):
        if not isinstance(other, PixelMask):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.bits, other.bits
        )

    def __hash__(self):
        return hash((self.width, self.height, self.bits.tobytes()))


def _cell_bounds(n: int, size: int):
    r = np.arange(n)
    lo = (r * size) // n
    hi = -((-(r + 1) * size) // n)  # ceil((r+1)*size/n), exclusive end
    return lo, hi


def downsample(mask: PixelMask, n: int, mode: str = "max_pool") -> GridMask:
    """Reduce a pixel mask to an ``n`` x ``n`` grid.

    Cell ``(r, c)`` covers pixel rows ``floor(r*H/n)`` to ``ceil((r+1)*H/n) - 1``
    and likewise for columns.  ``max_pool`` marks a cell if any covered pixel is
    set; ``nearest`` copies the pixel under the cell center.
    """
    if n <= 0:
        raise ValueError(f"grid resolution must be positive, got {n}")
    if mode not in DOWNSAMPLE_MODES:
        raise ValueError(f"unknown downsampling mode {mode!r}")
    h, w = mask.height, mask.width
    if mode == "nearest":
        rows = np.minimum(((2 * np.arange(n) + 1) * h) // (2 * n), h - 1)
        cols = np.minimum(((2 * np.arange(n) + 1) * w) // (2 * n), w - 1)
        return GridMask(n, mask.bits[np.ix_(rows, cols)])
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = mask.bits.cumsum(0).cumsum(1)
    r0, r1 = _cell_bounds(n, h)
    c0, c1 = _cell_bounds(n, w)
    sums = (
        integral[np.ix_(r1, c1)]
        - integral[np.ix_(r0, c1)]
        - integral[np.ix_(r1, c0)]
        + integral[np.ix_(r0, c0)]
    )
    return GridMask(n, (sums > 0).astype(np.uint8))


def upsample(grid: GridMask, width: int, height: int) -> PixelMask:
    """Nearest-neighbour expansion; pixel ``(y, x)`` reads cell ``(y*n//H, x*n//W)``."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be positive, got {width}x{height}")
    n = grid.n
    rows = (np.arange(height) * n) // height
    cols = (np.arange(width) * n) // width
    return PixelMask(width, height, grid.cells[np.ix_(rows, cols)])


Mask = Union[GridMask, PixelMask]


def _mask_array(mask: Mask):
    if isinstance(mask, GridMask):
        return mask.cells, mask.n, mask.n
    return mask.bits, mask.width, mask.height


def mask_to_hbb(mask: Mask) -> HBB:
    """Enclosing HBB of the outer edges of the extreme foreground cells (or pixels)."""
    arr, w, h = _mask_array(mask)
    ys = np.flatnonzero(arr.any(axis=1))
    xs = np.flatnonzero(arr.any(axis=0))
    if ys.size == 0:
        raise EmptyMaskError("empty-mask: no foreground cell")
    return HBB(float(xs[0] / w), float(ys[0] / h), float((xs[-1] + 1) / w), float((ys[-1] + 1) / h))


def mask_iou(a: PixelMask, b: PixelMask) -> float:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    return inter / union if union else 0.0


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Iterable[Point]) -> list:
    """Andrew's monotone chain; returns CCW hull without collinear points."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _first_quadrant(dx, dy):
    # rotate by 90 degrees until the direction lies in [0, 90)
    while not (dx > 0 and dy >= 0):
        dx, dy = -dy, dx
    return dx, dy


def _min_area_rect_scaled(hull: list, scale_x: float, scale_y: float):
    best = None
    m = len(hull)
    for i in range(m):
        (x0, y0), (x1, y1) = hull[i], hull[(i + 1) % m]
        dx, dy = (x1 - x0) * scale_x, (y1 - y0) * scale_y
        if dx == 0 and dy == 0:
            continue
        dx, dy = _first_quadrant(dx, dy)
        norm = math.hypot(dx, dy)
        ux, uy = dx / norm, dy / norm
        us = [(px * scale_x) * ux + (py * scale_y) * uy for px, py in hull]
        vs = [-(px * scale_x) * uy + (py * scale_y) * ux for px, py in hull]
        lw, sw = max(us) - min(us), max(vs) - min(vs)
        area = lw * sw
        if best is None or area < best[0] - 1e-15:
            cu, cv = (max(us) + min(us)) / 2, (max(vs) + min(vs)) / 2
            cx, cy = cu * ux - cv * uy, cu * uy + cv * ux
            theta = 0.0 if dy == 0 else math.degrees(math.atan2(dy, dx))
            best = (area, cx, cy, lw, sw, theta)
    return best


def min_area_rect(points: Iterable[Point]) -> OBB:
    """Minimum-area enclosing rectangle by rotating calipers over the convex hull."""
    hull = convex_hull(points)
    if not hull:
        raise ValueError("no points")
    if len(hull) == 1:
        (x, y), = hull
        return OBB(_clamp01(x), _clamp01(y), 0.0, 0.0, 0.0)
    _, cx, cy, lw, sw, theta = _min_area_rect_scaled(hull, 1.0, 1.0)
    return canonical_obb(cx, cy, lw, sw, theta)


def mask_to_obb(mask: GridMask) -> OBB:
    """Minimum-area rotated rectangle around the corners of every foreground cell."""
    arr, w, h = _mask_array(mask)
    ys = np.flatnonzero(arr.any(axis=1))
    if ys.size == 0:
        raise EmptyMaskError("empty-mask: no foreground cell")
    # the hull only depends on the left- and right-most cell of each row
    pts = []
    for r in ys:
        cols = np.flatnonzero(arr[r])
        for c in (int(cols[0]), int(cols[-1]) + 1):
            pts.append((c, int(r)))
            pts.append((c, int(r) + 1))
    hull = convex_hull(pts)
    _, cx, cy, lw, sw, theta = _min_area_rect_scaled(hull, 1.0 / w, 1.0 / h)
    return canonical_obb(cx, cy, lw, sw, theta)


def rasterize_quad(quad: Quad, width: int, height: int) -> PixelMask:
    """Pixel mask of the pixels whose centers fall inside a convex quad (given normalized)."""
    pts = quad.as_array() * np.array([width, height], dtype=float)
    if polygon_area(pts.tolist()) < 0:
        pts = pts[::-1]
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    inside = np.ones((height, width), dtype=bool)
    for i in range(4):
        ax, ay = pts[i]
        bx, by = pts[(i + 1) % 4]
        inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0
    return PixelMask(width, height, inside)


def rasterize_obb(obb: OBB, width: int, height: int) -> PixelMask:
    return rasterize_quad(obb_corners(obb), width, height)


def rasterize_hbb(box: HBB, width: int, height: int) -> PixelMask:
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = (xs + 0.5) / width, (ys + 0.5) / height
    inside = (px >= box.x1) & (px <= box.x2) & (py >= box.y1) & (py <= box.y2)
    return PixelMask(width, height, inside)
