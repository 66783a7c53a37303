"""Kinodynamic front-end: best-first search over motion primitives.

Nodes are (position, velocity) pairs of a double integrator; edges apply a
constant per-axis acceleration from {-a_max, 0, +a_max} for a fixed duration.
Edge cost is (||a||^2 + rho) * tau, so rho prices time and the quadratic term
prices effort. The priority adds an admissible time-to-go heuristic and a
soft penalty for leaving the safe corridor; segments that meet an inflated
unsafe box are discarded outright.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    AxisBox,
    Corridor,
    UnsafeRegion,
    carve_corridor,
    inflate,
    segment_intersects_box,
)

COLLISION_RESOLUTION = 0.05


class NoPath(Exception):
    """Open set exhausted or expansion budget reached without a goal node."""


class StartBlocked(Exception):
    """Start position lies inside an unsafe footprint."""


class GoalBlocked(Exception):
    """Goal position lies inside an unsafe footprint."""


@dataclass(frozen=True)
class PlannerConfig:
    a_max: float = 2.0
    v_max: float = 2.0
    tau: float = 0.4
    rho: float = 10.0
    lam: float = 10.0
    eps: float = 1e-3
    goal_tol: float = 0.2
    max_expansions: int = 20000
    clearance_radius: float = 0.4
    # dedup grid for pruning revisited states
    prune_pos_res: float = 0.1
    prune_vel_res: float = 0.2
    # >1 trades optimality for speed by inflating the heuristic terms;
    # keep at 1.0 wherever cost-optimality matters
    w_heuristic: float = 1.0


@dataclass(eq=False)
class ReferenceTrajectory:
    """Time-stamped position + yaw references with a per-sample corridor box."""

    times: np.ndarray
    positions: np.ndarray
    yaws: np.ndarray
    boxes: list[AxisBox | None]
    cost: float = 0.0

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("sample times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def samples(self) -> list[tuple[float, np.ndarray, float]]:
        return [(float(t), p, float(y)) for t, p, y in zip(self.times, self.positions, self.yaws)]

    def to_json(self) -> dict:
        return {
            "times": self.times.tolist(),
            "positions": self.positions.tolist(),
            "yaws": self.yaws.tolist(),
            "boxes": [b.to_json() if b is not None else None for b in self.boxes],
            "cost": self.cost,
        }


@dataclass(eq=False)
class PrimitivePath:
    """Chain of constant-acceleration arcs, each of duration tau."""

    p0: np.ndarray
    v0: np.ndarray
    accels: np.ndarray  # (K, 3); K may be 0 when start satisfies the goal
    tau: float
    cost: float

    def endpoints(self) -> np.ndarray:
        """Positions at arc boundaries, (K+1, 3)."""
        pts = [self.p0]
        p, v = self.p0.copy(), self.v0.copy()
        for a in self.accels:
            p = p + v * self.tau + 0.5 * a * self.tau**2
            v = v + a * self.tau
            pts.append(p)
        return np.array(pts)


def h0(p: np.ndarray, goal: np.ndarray, cfg: PlannerConfig) -> float:
    """Admissible time-cost lower bound: straight line at the speed limit."""
    return cfg.rho * float(np.linalg.norm(np.asarray(p) - np.asarray(goal))) / cfg.v_max


def _boxes_as_arrays(boxes: list[AxisBox]) -> tuple[np.ndarray, np.ndarray]:
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.array([b.lo for b in boxes]), np.array([b.hi for b in boxes])


def _segments_hit(pts: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test per segment: pts (C, n, 3) against boxes (B, 3) -> (C, n-1)."""
    if lo.shape[0] == 0:
        return np.zeros(pts.shape[:1] + (pts.shape[1] - 1,), dtype=bool)
    p0 = pts[:, :-1, None, :]
    d = pts[:, 1:, None, :] - p0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, None] - p0) / d
        t2 = (hi[None, None] - p0) / d
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    par = np.abs(d) < 1e-15
    inside = (p0 >= lo[None, None]) & (p0 <= hi[None, None])
    tlo = np.where(par, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(par, np.where(inside, np.inf, -np.inf), thi)
    tmin = np.maximum(tlo.max(axis=3), 0.0)
    tmax = np.minimum(thi.min(axis=3), 1.0)
    return np.any(tmin <= tmax, axis=2)


def _points_in_union(pts: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Membership of pts (..., 3) in the closed union of boxes (B, 3)."""
    if lo.shape[0] == 0:
        return np.zeros(pts.shape[:-1], dtype=bool)
    inside = np.all((pts[..., None, :] >= lo) & (pts[..., None, :] <= hi), axis=-1)
    return np.any(inside, axis=-1)


def _endpoint_blocked(p: np.ndarray, raw: list[AxisBox], inflated: list[AxisBox], cfg: PlannerConfig) -> bool:
    """An endpoint is blocked inside an unsafe footprint, or when an inflated
    box swallows its whole clearance region so the exemption cannot reach
    free space."""
    if any(b.contains(p, tol=0.0) for b in raw):
        return True
    clear = AxisBox(np.asarray(p) - cfg.clearance_radius, np.asarray(p) + cfg.clearance_radius)
    for box in inflated:
        if box.contains(p, tol=0.0) and np.all(box.lo <= clear.lo) and np.all(box.hi >= clear.hi):
            return True
    return False


def plan(
    start_p: np.ndarray,
    start_v: np.ndarray,
    goal: np.ndarray,
    corridor: Corridor,
    unsafe: list[UnsafeRegion],
    cfg: PlannerConfig,
    dt: float = 0.05,
    yaw: float = 0.0,
) -> ReferenceTrajectory:
    """Search for a collision-free reference from (start_p, start_v) to goal.

    Raises StartBlocked/GoalBlocked when an endpoint is inside an unsafe
    footprint, and NoPath when the expansion budget runs out. The returned
    trajectory is densified at dt and never samples inside an inflated
    unsafe box outside the endpoint clearance zones.
    """
    start_p = np.asarray(start_p, dtype=float)
    start_v = np.asarray(start_v, dtype=float)
    goal = np.asarray(goal, dtype=float)

    raw_boxes = [r.box for r in unsafe]
    inflated = [inflate(r) for r in unsafe]
    raw_lo, raw_hi = _boxes_as_arrays(raw_boxes)
    inf_lo, inf_hi = _boxes_as_arrays(inflated)

    if _endpoint_blocked(start_p, raw_boxes, inflated, cfg):
        raise StartBlocked("start lies inside an unsafe region beyond its clearance")
    if _endpoint_blocked(goal, raw_boxes, inflated, cfg):
        raise GoalBlocked("goal lies inside an unsafe region beyond its clearance")

    clearances = [
        AxisBox(start_p - cfg.clearance_radius, start_p + cfg.clearance_radius),
        AxisBox(goal - cfg.clearance_radius, goal + cfg.clearance_radius),
    ]
    clr_lo, clr_hi = _boxes_as_arrays(clearances)

    safe_boxes = carve_corridor(corridor, inflated)
    if not safe_boxes:
        raise NoPath("corridor fully blocked by unsafe regions")
    safe_lo, safe_hi = _boxes_as_arrays(safe_boxes)

    tau = cfg.tau
    accels = np.array(list(itertools.product((-cfg.a_max, 0.0, cfg.a_max), repeat=3)))
    acc_costs = (np.sum(accels**2, axis=1) + cfg.rho) * tau
    n_samp = max(2, int(math.ceil(cfg.v_max * tau / COLLISION_RESOLUTION)) + 1)
    ts = np.linspace(0.0, tau, n_samp)
    acc_arc = 0.5 * accels[:, None, :] * ts[None, :, None] ** 2  # (27, n, 3), constant
    have_unsafe = inf_lo.shape[0] > 0
    h_scale = cfg.w_heuristic * cfg.rho / cfg.v_max
    w_lam = cfg.w_heuristic * cfg.lam

    def node_penalty(pts: np.ndarray) -> np.ndarray:
        """Vectorized corridor penalty for candidate node positions (C, 3)."""
        in_safe = _points_in_union(pts, safe_lo, safe_hi)
        in_clear = _points_in_union(pts, clr_lo, clr_hi)
        d = np.maximum(safe_lo[None] - pts[:, None, :], 0.0) + np.maximum(
            pts[:, None, :] - safe_hi[None], 0.0
        )
        sq = np.min(np.einsum("cbk,cbk->cb", d, d), axis=1) + cfg.eps
        return np.where(in_safe | in_clear, 0.0, sq)

    # node store: parallel lists keyed by integer id
    node_p: list[np.ndarray] = [start_p]
    node_v: list[np.ndarray] = [start_v]
    node_g: list[float] = [0.0]
    node_parent: list[int] = [-1]
    node_accel: list[np.ndarray | None] = [None]

    inv_pos = 1.0 / cfg.prune_pos_res
    inv_vel = 1.0 / cfg.prune_vel_res

    def key_of(p: np.ndarray, v: np.ndarray) -> tuple:
        return (
            round(p[0] * inv_pos),
            round(p[1] * inv_pos),
            round(p[2] * inv_pos),
            round(v[0] * inv_vel),
            round(v[1] * inv_vel),
            round(v[2] * inv_vel),
        )

    best_g: dict[tuple, float] = {key_of(start_p, start_v): 0.0}
    phi0 = float(node_penalty(start_p[None])[0])
    heap: list[tuple[float, float, int, int]] = []
    counter = itertools.count()
    f0 = h_scale * float(np.linalg.norm(start_p - goal)) + w_lam * phi0
    heapq.heappush(heap, (f0, 0.0, next(counter), 0))

    expansions = 0
    goal_id = -1
    goal_tol_sq = cfg.goal_tol**2
    while heap:
        f, g, _, nid = heapq.heappop(heap)
        p, v = node_p[nid], node_v[nid]
        if g > best_g.get(key_of(p, v), math.inf) + 1e-12:
            continue
        dgoal = p - goal
        if dgoal @ dgoal <= goal_tol_sq:
            goal_id = nid
            break
        expansions += 1
        if expansions > cfg.max_expansions:
            raise NoPath(f"expansion budget {cfg.max_expansions} exhausted")

        child_v = v[None] + accels * tau
        ok = np.einsum("ck,ck->c", child_v, child_v) <= (cfg.v_max + 1e-9) ** 2
        # arc samples p(t) = p + v t + a t^2 / 2 for every candidate child
        pts = (p[None, :] + v[None, :] * ts[:, None])[None] + acc_arc
        if have_unsafe:
            hit_inf = _segments_hit(pts, inf_lo, inf_hi)
            if np.any(hit_inf[ok]):
                in_clear = _points_in_union(pts, clr_lo, clr_hi)
                exempt = in_clear[:, :-1] & in_clear[:, 1:]
                hit_raw = _segments_hit(pts, raw_lo, raw_hi)
                ok &= ~np.any((hit_inf & ~exempt) | (hit_raw & exempt), axis=1)
            else:
                ok &= ~np.any(hit_inf, axis=1)
        if not np.any(ok):
            continue

        child_p = pts[:, -1, :]
        idxs = np.nonzero(ok)[0]
        phis = node_penalty(child_p[idxs])
        hs = h_scale * np.linalg.norm(child_p[idxs] - goal, axis=1) + w_lam * phis
        child_g = g + acc_costs[idxs]
        keys = np.empty((len(idxs), 6))
        keys[:, 0:3] = child_p[idxs] * inv_pos
        keys[:, 3:6] = child_v[idxs] * inv_vel
        keys = np.round(keys).astype(np.int64)
        for j, ci in enumerate(idxs):
            cg = child_g[j]
            ckey = tuple(keys[j])
            if cg >= best_g.get(ckey, math.inf) - 1e-12:
                continue
            best_g[ckey] = cg
            cid = len(node_p)
            node_p.append(child_p[ci])
            node_v.append(child_v[ci])
            node_g.append(cg)
            node_parent.append(nid)
            node_accel.append(accels[ci])
            heapq.heappush(heap, (cg + hs[j], cg, next(counter), cid))

    if goal_id < 0:
        raise NoPath("open set exhausted")

    chain: list[np.ndarray] = []
    nid = goal_id
    while node_parent[nid] >= 0:
        chain.append(node_accel[nid])
        nid = node_parent[nid]
    chain.reverse()
    path = PrimitivePath(
        p0=start_p.copy(),
        v0=start_v.copy(),
        accels=np.array(chain).reshape(len(chain), 3),
        tau=tau,
        cost=node_g[goal_id],
    )
    return densify(path, dt, safe_boxes=safe_boxes, yaw=yaw)


def densify(
    path: PrimitivePath,
    dt: float,
    safe_boxes: list[AxisBox] = (),
    yaw: float = 0.0,
) -> ReferenceTrajectory:
    """Sample the primitive chain every dt using the closed-form arc.

    Yaw is held constant. Each sample is assigned the safe box containing it
    (sticky to the previous sample's box), or the nearest box otherwise.
    """
    if dt > path.tau and len(path.accels) > 0:
        raise ValueError("dt must not exceed the primitive duration")
    total = len(path.accels) * path.tau
    n = int(math.ceil(total / dt - 1e-12)) + 1 if total > 0 else 1
    times = np.minimum(np.arange(n) * dt, total)

    seg_p = [path.p0]
    seg_v = [path.v0]
    for a in path.accels:
        seg_p.append(seg_p[-1] + seg_v[-1] * path.tau + 0.5 * a * path.tau**2)
        seg_v.append(seg_v[-1] + a * path.tau)

    positions = np.empty((n, 3))
    for i, t in enumerate(times):
        k = min(int(t / path.tau), len(path.accels) - 1) if len(path.accels) else 0
        s = t - k * path.tau
        if len(path.accels):
            positions[i] = seg_p[k] + seg_v[k] * s + 0.5 * path.accels[k] * s**2
        else:
            positions[i] = path.p0

    boxes: list[AxisBox | None] = []
    prev: AxisBox | None = None
    for i in range(n):
        boxes.append(assign_box(positions[i], safe_boxes, prev))
        prev = boxes[-1]
    return ReferenceTrajectory(
        times=times,
        positions=positions,
        yaws=np.full(n, yaw),
        boxes=boxes,
        cost=path.cost,
    )


def assign_box(p: np.ndarray, safe_boxes: list[AxisBox], prev: AxisBox | None = None) -> AxisBox | None:
    """Containing safe box for p, sticky to prev; nearest box as fallback."""
    if not safe_boxes:
        return None
    if prev is not None and prev.contains(p):
        return prev
    for box in safe_boxes:
        if box.contains(p):
            return box
    return min(safe_boxes, key=lambda b: b.sq_distance(p))


def validate_trajectory(
    traj: ReferenceTrajectory,
    inflated_boxes: list[AxisBox],
    exempt_boxes: list[AxisBox] = (),
) -> bool:
    """Re-check a reference against inflated unsafe boxes, segment by segment."""
    for i in range(len(traj) - 1):
        a, b = traj.positions[i], traj.positions[i + 1]
        if any(e.contains(a) and e.contains(b) for e in exempt_boxes):
            continue
        if any(segment_intersects_box(a, b, box) for box in inflated_boxes):
            return False
    if len(traj) == 1 and any(box.contains(traj.positions[0]) for box in inflated_boxes):
        return any(e.contains(traj.positions[0]) for e in exempt_boxes)
    return True
