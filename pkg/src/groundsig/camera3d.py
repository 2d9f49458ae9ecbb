"""Pinhole camera over a flat ground plane.

Camera frame: +Z along the optical axis, +X to the right, +Y down in the image.
The camera is pitched down by ``theta`` from horizontal at height ``H`` above
the ground, so ground points satisfy ``-cos(theta)*Y - sin(theta)*Z + H = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Mapping, Tuple

import numpy as np

from .geometry import HBB


class NoGroundIntersection(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    p: float  # pixel pitch, m/px
    f: float  # focal length, m
    w: int
    h: int
    theta: float  # pitch below horizontal, rad
    H: float  # height above ground, m

    def __post_init__(self):
        if not (self.p > 0 and self.f > 0 and self.H > 0):
            raise ValueError("p, f and H must be positive")
        if self.w < 1 or self.h < 1:
            raise ValueError("image size must be at least 1x1")
        if not 0 < self.theta <= math.pi / 2:
            raise ValueError("pitch angle must lie in (0, pi/2]")

    @classmethod
    def from_record(cls, rec: Mapping) -> "CameraModel":
        """Build from a flat record with keys ``p, f, w, h, theta_deg, H``."""
        missing = {"p", "f", "w", "h", "theta_deg", "H"} - set(rec)
        if missing:
            raise ValueError(f"camera record lacks {sorted(missing)}")
        return cls(
            p=float(rec["p"]),
            f=float(rec["f"]),
            w=int(rec["w"]),
            h=int(rec["h"]),
            theta=math.radians(float(rec["theta_deg"])),
            H=float(rec["H"]),
        )

    def to_record(self) -> dict:
        return {
            "p": self.p,
            "f": self.f,
            "w": self.w,
            "h": self.h,
            "theta_deg": math.degrees(self.theta),
            "H": self.H,
        }

    @property
    def ground_normal(self) -> np.ndarray:
        """Unit normal pointing from the camera towards the ground."""
        return np.array([0.0, math.cos(self.theta), math.sin(self.theta)])

    @property
    def ground_forward(self) -> np.ndarray:
        """Horizontal forward direction lying in the ground plane."""
        return np.array([0.0, -math.sin(self.theta), math.cos(self.theta)])


@dataclass(frozen=True)
class Point3:
    X: float
    Y: float
    Z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.X, self.Y, self.Z)):
            raise ValueError("non-finite 3D point")

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.Z])


@dataclass(frozen=True)
class Box3:
    """Upright box; ``center`` is the volumetric center, ``yaw`` in radians.

    Yaw is measured in the ground plane from the camera's +X axis towards the
    horizontal forward direction.
    """

    center: Point3
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.length, self.width, self.height) < 0:
            raise ValueError("box dimensions must be non-negative")

    @classmethod
    def on_ground(cls, footprint: Point3, length, width, height, yaw, cam: CameraModel) -> "Box3":
        """Box standing on the ground with its footprint centered at ``footprint``."""
        up = -cam.ground_normal
        c = footprint.as_array() + up * (height / 2.0)
        return cls(Point3(*c), length, width, height, yaw)


def pixel_to_image(xp: float, yp: float, cam: CameraModel) -> Tuple[float, float]:
    return (xp - cam.w / 2) * cam.p, (yp - cam.h / 2) * cam.p


def image_to_pixel(xi: float, yi: float, cam: CameraModel) -> Tuple[float, float]:
    return xi / cam.p + cam.w / 2, yi / cam.p + cam.h / 2


def ray_parameter(yi: float, cam: CameraModel) -> float:
    """Scale ``t`` at which the ray through image row ``yi`` meets the ground."""
    denom = yi * math.cos(cam.theta) + cam.f * math.sin(cam.theta)
    if denom <= 0:
        raise NoGroundIntersection("no-ground-intersection: ray points at or above the horizon")
    return cam.H / denom


def pixel_to_ground(xp: float, yp: float, cam: CameraModel) -> Point3:
    xi, yi = pixel_to_image(xp, yp, cam)
    t = ray_parameter(yi, cam)
    return Point3(xi * t, yi * t, cam.f * t)


def ground_residual(pt: Point3, cam: CameraModel) -> float:
    return -math.cos(cam.theta) * pt.Y - math.sin(cam.theta) * pt.Z + cam.H


def camera_to_pixel(pt: Point3, cam: CameraModel) -> Tuple[float, float]:
    if pt.Z <= 0:
        raise BehindCameraError(f"point at depth {pt.Z} is behind the camera")
    return image_to_pixel(cam.f * pt.X / pt.Z, cam.f * pt.Y / pt.Z, cam)


def box3_corners(box: Box3, cam: CameraModel) -> List[Point3]:
    """Eight corners: bottom face first (CCW seen from above), then top face."""
    up = -cam.ground_normal
    ex = np.array([1.0, 0.0, 0.0])
    ey = cam.ground_forward
    u = math.cos(box.yaw) * ex + math.sin(box.yaw) * ey
    v = -math.sin(box.yaw) * ex + math.cos(box.yaw) * ey
    c = box.center.as_array()
    hl, hw, hh = box.length / 2, box.width / 2, box.height / 2
    out = []
    for dz in (-hh, hh):
        for dl, dw in ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)):
            out.append(Point3(*(c + dl * u + dw * v + dz * up)))
    return out


def project_box3(box: Box3, cam: CameraModel):
    """Project the corners to pixels; returns ``(pixels, enclosing normalized HBB)``."""
    pixels = [camera_to_pixel(p, cam) for p in box3_corners(box, cam)]
    xs = [p[0] / cam.w for p in pixels]
    ys = [p[1] / cam.h for p in pixels]
    return pixels, HBB.enclosing(xs, ys)
