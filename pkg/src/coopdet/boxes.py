"""Detection boxes and rotated BEV overlap.

Boxes carry 7 attributes: center (x, y, z), size (h, w, l) and yaw.
``l`` is the extent along the heading direction, ``w`` the lateral one.
IoU is computed on the bird's-eye rectangles via Sutherland-Hodgman
polygon clipping; ``monte_carlo_iou`` is the independent sampling
estimate used to verify it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backend import kernels
from .errors import ContractViolation
from .grid import wrap_pi


@dataclass(frozen=True)
class DetectionBox:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    yaw: float
    confidence: float = 1.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.h, self.w, self.l, self.yaw, self.confidence)
        if not all(math.isfinite(v) for v in vals):
            raise ContractViolation("box attributes must be finite")
        if min(self.h, self.w, self.l) <= 0:
            raise ContractViolation("box dimensions must be positive")
        if not -math.pi < self.yaw <= math.pi:
            raise ContractViolation("yaw must be normalized to (-pi, pi]")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractViolation("confidence must lie in [0, 1]")

    def corners(self) -> np.ndarray:
        """BEV corner loop, counter-clockwise, shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array(
            [
                [self.l / 2, self.w / 2],
                [-self.l / 2, self.w / 2],
                [-self.l / 2, -self.w / 2],
                [self.l / 2, -self.w / 2],
            ]
        )
        out = np.empty_like(local)
        out[:, 0] = self.x + local[:, 0] * c - local[:, 1] * s
        out[:, 1] = self.y + local[:, 0] * s + local[:, 1] * c
        return out

    def bev_area(self) -> float:
        return self.w * self.l

    def bev_tuple(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.l, self.yaw])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a counter-clockwise polygon."""
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by convex ``clipper`` (ccw)."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        for j in range(len(inputs)):
            px, py = inputs[j]
            qx, qy = inputs[(j + 1) % len(inputs)]
            p_in = ex * (py - ay) - ey * (px - ax) >= 0
            q_in = ex * (qy - ay) - ey * (qx - ax) >= 0
            if p_in:
                output.append((px, py))
            if p_in != q_in:
                # intersection of pq with the clip edge
                dx, dy = qx - px, qy - py
                denom = ex * dy - ey * dx
                if denom != 0:
                    t = (ex * (ay - py) - ey * (ax - px)) / denom
                    output.append((px + t * dx, py + t * dy))
    return np.array(output) if output else np.zeros((0, 2))


def rotated_iou(a: DetectionBox, b: DetectionBox) -> float:
    """BEV intersection-over-union of two yaw-rotated rectangles."""
    if a.bev_area() <= 0 or b.bev_area() <= 0:
        raise ContractViolation("degenerate box")
    # canonical argument order makes the result exactly symmetric
    ka = (a.x, a.y, a.w, a.l, a.yaw)
    kb = (b.x, b.y, b.w, b.l, b.yaw)
    if kb < ka:
        a, b = b, a
    inter = polygon_area(clip_polygon(a.corners(), b.corners()))
    union = a.bev_area() + b.bev_area() - inter
    return min(max(inter / union, 0.0), 1.0)


def monte_carlo_iou(a: DetectionBox, b: DetectionBox, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """Sampling estimate of the BEV IoU; verification oracle for rotated_iou."""
    return float(kernels().mc_iou(a.bev_tuple(), b.bev_tuple(), n_samples, seed))


def make_box(x, y, z, h, w, l, yaw, confidence=1.0) -> DetectionBox:
    """DetectionBox constructor that normalizes yaw first."""
    return DetectionBox(x, y, z, h, w, l, wrap_pi(yaw), confidence)
