"""Axis-aligned corridor geometry: polytopes, unsafe-region carving, penalty.

The feasible space is an ordered chain of overlapping axis boxes. Unsafe
regions are axis boxes too, grown by a semantic buffer and subtracted from
the corridor (exact axis-aligned difference), so the refined corridor never
meets the interior of an unsafe region. The planner's soft penalty is the
squared Euclidean distance to the nearest safe box, zero on the safe set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONTAIN_TOL = 1e-9


class FullyBlocked(Exception):
    """The unsafe box covers the whole corridor box; nothing is left."""


@dataclass(frozen=True, eq=False)
class AxisBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if np.any(self.lo > self.hi):
            raise ValueError(f"box lo must not exceed hi: {self.lo} vs {self.hi}")

    def contains(self, p: np.ndarray, tol: float = CONTAIN_TOL) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def inflated(self, margin: float) -> "AxisBox":
        return AxisBox(self.lo - margin, self.hi + margin)

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def intersects(self, other: "AxisBox") -> bool:
        """Open-interior overlap; touching faces do not count."""
        return bool(np.all(self.lo < other.hi) and np.all(other.lo < self.hi))

    def sq_distance(self, p: np.ndarray) -> float:
        p = np.asarray(p, dtype=float)
        d = np.maximum(self.lo - p, 0.0) + np.maximum(p - self.hi, 0.0)
        return float(d @ d)

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "AxisBox":
        return AxisBox(np.array(obj["lo"], dtype=float), np.array(obj["hi"], dtype=float))


@dataclass(frozen=True, eq=False)
class Polytope:
    """Half-space intersection {x : A x <= b}."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        norms = np.linalg.norm(self.A, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("polytope rows must be non-zero")

    def to_json(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}


@dataclass(frozen=True)
class UnsafeRegion:
    box: AxisBox
    semantic_class: str
    buffer: float
    is_dynamic: bool
    created_at: float = 0.0

    def __post_init__(self):
        if self.buffer < 0.0:
            raise ValueError("buffer must be non-negative")


@dataclass(frozen=True, eq=False)
class Corridor:
    """Ordered overlapping boxes from start to goal."""

    boxes: tuple[AxisBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for a, b in zip(self.boxes, self.boxes[1:]):
            if not a.intersects(b):
                raise ValueError("consecutive corridor boxes must overlap")

    def bounding_box(self) -> AxisBox:
        lo = np.min([b.lo for b in self.boxes], axis=0)
        hi = np.max([b.hi for b in self.boxes], axis=0)
        return AxisBox(lo, hi)


def contains(poly: Polytope, p: np.ndarray, tol: float = CONTAIN_TOL) -> bool:
    return bool(np.all(poly.A @ np.asarray(p, dtype=float) <= poly.b + tol))


def inflate(region: UnsafeRegion) -> AxisBox:
    """Grow the region's box by its buffer on all six faces."""
    return region.box.inflated(region.buffer)


def carve(corridor_box: AxisBox, unsafe: AxisBox) -> list[AxisBox]:
    """Axis-aligned difference corridor_box \\ unsafe as at most 6 boxes.

    The output boxes have pairwise disjoint interiors, stay inside
    corridor_box, avoid the interior of unsafe, and their union covers
    everything in corridor_box outside unsafe.
    """
    if not corridor_box.intersects(unsafe):
        return [corridor_box]
    if np.all(unsafe.lo <= corridor_box.lo) and np.all(unsafe.hi >= corridor_box.hi):
        raise FullyBlocked(f"unsafe box covers corridor box {corridor_box.lo}..{corridor_box.hi}")

    cut_lo = np.maximum(unsafe.lo, corridor_box.lo)
    cut_hi = np.minimum(unsafe.hi, corridor_box.hi)
    out: list[AxisBox] = []
    lo = corridor_box.lo.copy()
    hi = corridor_box.hi.copy()
    # Peel slabs off one axis at a time; the remaining core shrinks onto the cut.
    for d in range(3):
        if cut_lo[d] > lo[d]:
            slab_hi = hi.copy()
            slab_hi[d] = cut_lo[d]
            out.append(AxisBox(lo.copy(), slab_hi))
            lo = lo.copy()
            lo[d] = cut_lo[d]
        if cut_hi[d] < hi[d]:
            slab_lo = lo.copy()
            slab_lo[d] = cut_hi[d]
            out.append(AxisBox(slab_lo, hi.copy()))
            hi = hi.copy()
            hi[d] = cut_hi[d]
    return [b for b in out if np.all(b.hi - b.lo > 0.0)]


def carve_corridor(corridor: Corridor, unsafe_boxes: list[AxisBox]) -> list[AxisBox]:
    """Subtract every unsafe box from every corridor box.

    Fully blocked corridor boxes simply drop out of the result; callers deal
    with an empty safe set (no plan can exist there).
    """
    fragments = list(corridor.boxes)
    for ub in unsafe_boxes:
        nxt: list[AxisBox] = []
        for frag in fragments:
            try:
                nxt.extend(carve(frag, ub))
            except FullyBlocked:
                continue
        fragments = nxt
    return fragments


def penalty(
    p: np.ndarray,
    safe_boxes: list[AxisBox],
    clearances: list[AxisBox] = (),
    eps: float = 1e-3,
) -> float:
    """Soft cost for leaving the safe corridor.

    Zero inside any safe or clearance box (closed); otherwise the smallest
    per-axis squared violation against the safe boxes, plus eps. The per-box
    term equals the squared Euclidean distance to that box, so the multi-box
    value is a convex-per-box lower bound on distance to the safe union.
    """
    if not safe_boxes:
        raise ValueError("safe_boxes must be non-empty")
    p = np.asarray(p, dtype=float)
    for box in safe_boxes:
        if box.contains(p, tol=0.0):
            return 0.0
    for box in clearances:
        if box.contains(p, tol=0.0):
            return 0.0
    return min(box.sq_distance(p) for box in safe_boxes) + eps


def segment_intersects_box(p0: np.ndarray, p1: np.ndarray, box: AxisBox) -> bool:
    """Slab test: does the closed segment meet the closed box?"""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = p1 - p0
    tmin, tmax = 0.0, 1.0
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if p0[k] < box.lo[k] or p0[k] > box.hi[k]:
                return False
            continue
        t1 = (box.lo[k] - p0[k]) / d[k]
        t2 = (box.hi[k] - p0[k]) / d[k]
        if t1 > t2:
            t1, t2 = t2, t1
        tmin = max(tmin, t1)
        tmax = min(tmax, t2)
        if tmin > tmax:
            return False
    return True


def segments_intersect_boxes(points: np.ndarray, boxes_lo: np.ndarray, boxes_hi: np.ndarray) -> bool:
    """Vectorized slab test for a polyline against many boxes.

    points is (S+1, 3); boxes_lo/hi are (B, 3). True if any of the S segments
    meets any box. Used on the planner's hot path.
    """
    if len(boxes_lo) == 0 or len(points) < 2:
        return False
    p0 = points[:-1, None, :]  # (S, 1, 3)
    d = points[1:, None, :] - p0
    lo = boxes_lo[None, :, :]
    hi = boxes_hi[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - p0) / d
        t2 = (hi - p0) / d
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    # Parallel axes: the whole line is inside the slab or misses it entirely.
    par = np.abs(d) < 1e-15
    inside = (p0 >= lo) & (p0 <= hi)
    tlo = np.where(par, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(par, np.where(inside, np.inf, -np.inf), thi)
    tmin = np.maximum(tlo.max(axis=2), 0.0)
    tmax = np.minimum(thi.min(axis=2), 1.0)
    return bool(np.any(tmin <= tmax))


def box_to_polytope(box: AxisBox) -> Polytope:
    """Six axis-aligned half-spaces equivalent to the box."""
    eye = np.eye(3)
    A = np.vstack([eye, -eye])
    b = np.concatenate([box.hi, -box.lo])
    return Polytope(A, b)
