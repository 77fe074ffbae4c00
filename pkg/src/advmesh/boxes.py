"""Oriented 2D/3D box types shared by the detector, placement, and metrics code.

Box3D lives in the z-up sensor frame (x forward, y left, z up); yaw rotates
about +z. Box2D lives in pixel coordinates with the origin at the top-left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass
class Box2D:
    """Axis-aligned image box with a detection score."""

    left: float
    top: float
    right: float
    bottom: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.left < self.right and self.top < self.bottom):
            raise ValueError(f"degenerate 2D box: {self}")

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    def area(self) -> float:
        return self.width * self.height

    def iou(self, other: "Box2D") -> float:
        ix = max(0.0, min(self.right, other.right) - max(self.left, other.left))
        iy = max(0.0, min(self.bottom, other.bottom) - max(self.top, other.top))
        inter = ix * iy
        union = self.area() + other.area() - inter
        return inter / union if union > 0.0 else 0.0


@dataclass
class Box3D:
    """Oriented 3D box: center is the geometric centroid, yaw about +z."""

    center: np.ndarray  # (3,) meters
    height: float
    width: float
    length: float
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.center.shape != (3,):
            raise ValueError("center must be a 3-vector")
        if not (self.height > 0 and self.width > 0 and self.length > 0):
            raise ValueError("box dimensions must be positive")
        self.yaw = wrap_angle(float(self.yaw))

    @property
    def dims(self) -> tuple[float, float, float]:
        return (self.height, self.width, self.length)

    def bev_corners(self) -> np.ndarray:
        """Footprint corners (4, 2) in the ground plane, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = self.length / 2.0, self.width / 2.0
        local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        """All 8 corners (8, 3); first four at the bottom face."""
        bev = self.bev_corners()
        lo = self.center[2] - self.height / 2.0
        hi = self.center[2] + self.height / 2.0
        bot = np.column_stack([bev, np.full(4, lo)])
        top = np.column_stack([bev, np.full(4, hi)])
        return np.vstack([bot, top])

    def z_range(self) -> tuple[float, float]:
        return (self.center[2] - self.height / 2.0, self.center[2] + self.height / 2.0)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box, optionally grown by margin."""
        pts = np.asarray(points, dtype=np.float64)
        rel = pts[:, :3] - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # rotate into the box frame (inverse yaw)
        lx = c * rel[:, 0] + s * rel[:, 1]
        ly = -s * rel[:, 0] + c * rel[:, 1]
        return (
            (np.abs(lx) <= self.length / 2.0 + margin)
            & (np.abs(ly) <= self.width / 2.0 + margin)
            & (np.abs(rel[:, 2]) <= self.height / 2.0 + margin)
        )
