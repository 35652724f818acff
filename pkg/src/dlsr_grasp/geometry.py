"""Oriented grasp rectangles, polygon overlap and the rectangle metric.

Coordinates are continuous image coordinates: x runs along columns, y along
rows, and pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)``.
Angles are in degrees measured from the image x-axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyGroundTruth, NotARectangle

ANGLE_THRESHOLD = 30.0
JACCARD_THRESHOLD = 0.25

# polygon_to_rect tolerances
_PARALLEL_TOL_DEG = 1.0
_LENGTH_TOL_PX = 1.0


@dataclass(frozen=True)
class GraspRect:
    """Five-parameter grasp rectangle ``{x, y, theta, w, h}``.

    ``w`` is the gripper-opening edge (along ``theta``) and ``h`` the plate
    edge. ``theta`` is folded into ``[0, 180)`` on construction.
    """

    x: float
    y: float
    theta: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"rectangle extents must be positive, got w={self.w}, h={self.h}")
        for name in ("x", "y", "theta", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite rectangle field {name}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_tuple(self):
        return (self.x, self.y, self.theta, self.w, self.h)

    @property
    def area(self):
        return self.w * self.h


def normalize_angle(theta):
    t = math.fmod(float(theta), 180.0)
    if t < 0:
        t += 180.0
    if t >= 180.0:
        t = 0.0
    return t


def angular_diff(a, b):
    """Smallest difference between two rectangle orientations, in ``[0, 90]``."""
    d = abs(normalize_angle(a) - normalize_angle(b))
    return min(d, 180.0 - d)


def rect_to_polygon(r: GraspRect) -> np.ndarray:
    """Corners of ``r`` as a (4, 2) array, counter-clockwise.

    The first corner is the one at ``(+w/2, +h/2)`` in the rectangle frame,
    so the first edge has length ``w`` and runs along the rectangle axis.
    """
    t = math.radians(r.theta)
    c, s = math.cos(t), math.sin(t)
    hw, hh = r.w / 2.0, r.h / 2.0
    local = ((hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh))
    return np.array([(r.x + c * u - s * v, r.y + s * u + c * v) for u, v in local])


def polygon_to_rect(p) -> GraspRect:
    """Inverse of :func:`rect_to_polygon` for 4-vertex near-rectangles.

    Raises NotARectangle when opposite edges are not parallel within 1 degree,
    differ in length by more than 1 px, or adjacent edges are not
    perpendicular within 1 degree.
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (4, 2):
        raise NotARectangle(f"expected 4 vertices, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NotARectangle("non-finite vertex coordinates")
    edges = np.roll(p, -1, axis=0) - p
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    if np.any(lengths <= 0):
        raise NotARectangle("degenerate edge")
    angles = np.degrees(np.arctan2(edges[:, 1], edges[:, 0]))
    for i in (0, 1):
        if angular_diff(angles[i], angles[i + 2]) > _PARALLEL_TOL_DEG:
            raise NotARectangle(f"edges {i} and {i + 2} are not parallel")
        if abs(lengths[i] - lengths[i + 2]) > _LENGTH_TOL_PX:
            raise NotARectangle(f"edges {i} and {i + 2} differ in length")
    if abs(90.0 - angular_diff(angles[0], angles[1])) > _PARALLEL_TOL_DEG:
        raise NotARectangle("adjacent edges are not perpendicular")
    cx, cy = p.mean(axis=0)
    w = 0.5 * (lengths[0] + lengths[2])
    h = 0.5 * (lengths[1] + lengths[3])
    return GraspRect(float(cx), float(cy), float(angles[0]), float(w), float(h))


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _clip(subject: Sequence, a, b):
    """One Sutherland-Hodgman pass: keep the part of ``subject`` left of a->b."""
    out = []
    ax, ay = a
    ex, ey = b[0] - ax, b[1] - ay

    def side(pt):
        return ex * (pt[1] - ay) - ey * (pt[0] - ax)

    n = len(subject)
    for i in range(n):
        cur = subject[i]
        prev = subject[i - 1]
        sc, sp = side(cur), side(prev)
        if sc >= 0:
            if sp < 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif sp >= 0:
            t = sp / (sp - sc)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
    return out


def convex_intersection(p1, p2) -> list:
    """Intersection polygon of two convex counter-clockwise polygons."""
    subject = [tuple(v) for v in np.asarray(p1, dtype=float)]
    clipper = [tuple(v) for v in np.asarray(p2, dtype=float)]
    for i in range(len(clipper)):
        if not subject:
            break
        subject = _clip(subject, clipper[i], clipper[(i + 1) % len(clipper)])
    return subject


def intersection_area(r1: GraspRect, r2: GraspRect) -> float:
    poly = convex_intersection(rect_to_polygon(r1), rect_to_polygon(r2))
    return max(0.0, polygon_area(poly))


def jaccard(r1: GraspRect, r2: GraspRect) -> float:
    """Intersection-over-union of two oriented rectangles."""
    # canonical argument order makes the result exactly symmetric
    if r2.as_tuple() < r1.as_tuple():
        r1, r2 = r2, r1
    inter = intersection_area(r1, r2)
    union = r1.area + r2.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def rectangle_metric(candidate: GraspRect, ground_truths: Iterable[GraspRect]) -> bool:
    """True when some ground truth is within 30 degrees and overlaps by more than 25%."""
    gts = list(ground_truths)
    if not gts:
        raise EmptyGroundTruth("rectangle metric needs at least one ground-truth rectangle")
    for g in gts:
        if angular_diff(candidate.theta, g.theta) < ANGLE_THRESHOLD and jaccard(candidate, g) > JACCARD_THRESHOLD:
            return True
    return False


def rigid_transform(r: GraspRect, angle_deg: float, tx: float, ty: float, origin=(0.0, 0.0)) -> GraspRect:
    """Rotate ``r`` about ``origin`` by ``angle_deg`` then translate."""
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    dx, dy = r.x - origin[0], r.y - origin[1]
    return GraspRect(origin[0] + c * dx - s * dy + tx, origin[1] + s * dx + c * dy + ty,
                     r.theta + angle_deg, r.w, r.h)
