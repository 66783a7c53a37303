"""Closed-loop landing simulator and Monte Carlo experiment runner.

One deterministic event loop per trial: templated ground-truth captions
stand in for the camera + captioner, the reasoning backend's verdicts become
available only after the configured latency, dynamic verdicts carve the
corridor and trigger replanning, and the tracker runs every tick. All
randomness flows from the trial seed through fixed per-subsystem offsets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics, mpc, search, semantics
from .dynamics import ControlInput, DynamicsParams, State
from .geometry import AxisBox, Corridor, Polytope, UnsafeRegion, box_to_polytope, carve_corridor, inflate
from .search import PlannerConfig
from .semantics import Caption, KnowledgeBase, SafetySpec

SCHEMA_VERSION = 1

VARIANT_BASELINE = "baseline"
VARIANT_NOISY = "noisy"
VARIANT_FULL = "full"

BASELINE_INFLATION = 0.3
CLOSE_CALL_RADIUS = 1.0
SUCCESS_RADIUS = 0.5
TOUCHDOWN_HEIGHT = 0.02
TOUCHDOWN_SPEED = 0.2
FLOOR_ACTIVATION_MARGIN = 1.0
# final approach: plan to this height above the pad, then ramp down slowly;
# the ramp rate must undercut the touchdown speed gate
APPROACH_HEIGHT = 0.5
DESCENT_RATE = 0.15

# seed offsets per subsystem
SEED_AGENTS = 10_000
SEED_BACKEND = 20_000


class ScenarioInfeasible(Exception):
    """No initial plan exists for the scenario."""


@dataclass(frozen=True)
class CameraModel:
    fov_deg: float = 100.0
    range_m: float = 10.0
    tilt_deg: float = 30.0


@dataclass(eq=False)
class DynamicAgent:
    p0: np.ndarray  # ground position, z ignored
    speed: float
    motion: dict  # {"type": "waypoints", "points": [...]} or {"type": "random_walk", "sigma": s, "bounds": [lo2, hi2]}
    half_extents: np.ndarray  # (hx, hy, hz); footprint spans z in [0, 2*hz]
    class_name: str = "person"

    def footprint(self, xy: np.ndarray) -> AxisBox:
        hx, hy, hz = self.half_extents
        return AxisBox(
            [xy[0] - hx, xy[1] - hy, 0.0],
            [xy[0] + hx, xy[1] + hy, 2.0 * hz],
        )

    def center(self, xy: np.ndarray) -> np.ndarray:
        return np.array([xy[0], xy[1], float(self.half_extents[2])])


@dataclass(eq=False)
class Scenario:
    name: str
    world_bounds: AxisBox
    target: np.ndarray
    start: State
    corridor: Corridor
    static_obstacles: list[tuple[AxisBox, str]] = field(default_factory=list)
    agents: list[DynamicAgent] = field(default_factory=list)
    perception_period: float = 0.5
    perception_latency: float = 0.3
    camera: CameraModel = field(default_factory=CameraModel)
    trial_timeout: float = 20.0
    seed: int = 0
    params: DynamicsParams = field(default_factory=DynamicsParams)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    mpc_cfg: mpc.MpcConfig = field(default_factory=mpc.MpcConfig)
    z_max: float = semantics.DEFAULT_Z_MAX
    kb_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        if not self.world_bounds.contains(self.target) or not self.world_bounds.contains(self.start.p):
            raise ValueError("start and target must lie inside world bounds")
        if self.perception_latency < 0.0:
            raise ValueError("perception latency must be non-negative")


def scenario_from_json(obj: dict) -> Scenario:
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported scenario schema {obj.get('schema_version')!r}")
    start = obj["start"]
    cam = obj.get("camera", {})
    agents = [
        DynamicAgent(
            p0=np.array(a["p"], dtype=float),
            speed=float(a["speed"]),
            motion=a["motion"],
            half_extents=np.array(a["half_extents"], dtype=float),
            class_name=a.get("class", "person"),
        )
        for a in obj.get("agents", [])
    ]
    return Scenario(
        name=obj.get("name", "scenario"),
        world_bounds=AxisBox.from_json(obj["world_bounds"]),
        target=np.array(obj["target"], dtype=float),
        start=State(
            p=np.array(start["p"], dtype=float),
            v=np.array(start.get("v", [0, 0, 0]), dtype=float),
            att=np.array(start.get("att", [0, 0, 0]), dtype=float),
        ),
        corridor=Corridor(tuple(AxisBox.from_json(b) for b in obj["corridor"]["boxes"])),
        static_obstacles=[
            (AxisBox.from_json(s["box"]), s.get("class", "building"))
            for s in obj.get("static_obstacles", [])
        ],
        agents=agents,
        perception_period=float(obj.get("perception_period", 0.5)),
        perception_latency=float(obj.get("perception_latency", 0.3)),
        camera=CameraModel(
            fov_deg=float(cam.get("fov_deg", 100.0)),
            range_m=float(cam.get("range_m", 10.0)),
            tilt_deg=float(cam.get("tilt_deg", 30.0)),
        ),
        trial_timeout=float(obj.get("trial_timeout", 20.0)),
        seed=int(obj.get("seed", 0)),
        params=DynamicsParams(**obj.get("dynamics", {})),
        planner=PlannerConfig(**obj.get("planner", {})),
        mpc_cfg=mpc.MpcConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.get("mpc", {}).items()}),
        z_max=float(obj.get("z_max", semantics.DEFAULT_Z_MAX)),
        kb_overrides=obj.get("kb_overrides", {}),
    )


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_json(json.load(fh))


def apply_kb_overrides(kb: KnowledgeBase, overrides: dict) -> KnowledgeBase:
    """Per-scenario safety parameter overrides, keyed by KB class name."""
    if not overrides:
        return kb
    entries = []
    for e in kb.entries:
        if e.class_name in overrides:
            entries.append(replace(e, **overrides[e.class_name]))
        else:
            entries.append(e)
    return semantics.index(entries)


@dataclass(eq=False)
class TrialResult:
    success: bool
    close_call: bool
    collision: bool
    touchdown_error: float
    duration: float
    min_agent_distance: float
    replan_count: int
    spec_log: list[SafetySpec]
    trace_path: str | None = None
    touched_down: bool = False
    timed_out: bool = False
    end_reason: str = ""

    def to_json(self) -> dict:
        return {
            "success": self.success,
            "close_call": self.close_call,
            "collision": self.collision,
            "touchdown_error": None if math.isnan(self.touchdown_error) else self.touchdown_error,
            "duration": self.duration,
            "min_agent_distance": None
            if math.isinf(self.min_agent_distance)
            else self.min_agent_distance,
            "replan_count": self.replan_count,
            "specs": [s.to_json() for s in self.spec_log],
            "trace_path": self.trace_path,
            "touched_down": self.touched_down,
            "timed_out": self.timed_out,
            "end_reason": self.end_reason,
        }


CLASS_PHRASES = {
    "person": "walking near the landing area",
    "animal": "moving near the landing area",
    "bicycle": "riding past the landing area",
    "vehicle": "parked by the landing area",
    "building": "standing beside the landing area",
    "tree": "beside the landing area",
}
EMPTY_SCENE_CAPTION = "an open area with no obstacles"


def _camera_axis(uav: State, target: np.ndarray, tilt_deg: float) -> np.ndarray:
    to_target = target[:2] - uav.p[:2]
    norm = np.linalg.norm(to_target)
    bearing = to_target / norm if norm > 1e-9 else np.array([1.0, 0.0])
    tilt = math.radians(tilt_deg)
    axis = np.array([bearing[0] * math.cos(tilt), bearing[1] * math.cos(tilt), -math.sin(tilt)])
    return axis


def visible_entities(
    scenario: Scenario, uav: State, agent_xy: list[np.ndarray]
) -> list[tuple[float, str, int]]:
    """Entities inside the camera cone as (distance, class, agent_index).

    agent_index is -1 for static obstacles. Sorted nearest-first; ties keep
    agent order.
    """
    cam = scenario.camera
    axis = _camera_axis(uav, scenario.target, cam.tilt_deg)
    half = math.radians(cam.fov_deg) / 2.0
    found = []
    centers: list[tuple[np.ndarray, str, int]] = [
        (agent.center(agent_xy[i]), agent.class_name, i) for i, agent in enumerate(scenario.agents)
    ]
    centers += [(box.center(), cls, -1) for box, cls in scenario.static_obstacles]
    for center, cls, idx in centers:
        rel = center - uav.p
        dist = float(np.linalg.norm(rel))
        if dist > cam.range_m or dist < 1e-9:
            continue
        cos_angle = float(rel @ axis) / dist
        if math.acos(np.clip(cos_angle, -1.0, 1.0)) <= half:
            found.append((dist, cls, idx))
    found.sort(key=lambda e: (e[0], e[2]))
    return found


def generate_caption(scenario: Scenario, uav: State, agent_xy: list[np.ndarray], t: float) -> Caption:
    """Ground-truth templated caption of what the camera cone contains."""
    ents = visible_entities(scenario, uav, agent_xy)
    if not ents:
        return Caption(text=EMPTY_SCENE_CAPTION, capture_time=t)
    phrases = [
        f"a {cls} {CLASS_PHRASES.get(cls, 'near the landing area')}" for _, cls, _ in ents
    ]
    return Caption(text=" and ".join(phrases), capture_time=t)


class NoisyBackend:
    """Misbehaving reasoner: with probability 0.5 the reply is free text or
    random-but-valid JSON; otherwise it defers to the deterministic backend."""

    def __init__(self, rng: np.random.Generator, z_max: float):
        self.rng = rng
        self.z_max = z_max
        self._det = semantics.DeterministicBackend()

    def infer(self, prompt: str, deadline_s: float = 2.0) -> str:
        r = self.rng.random()
        if r < 0.1:
            return "The area looks safe to land."
        if r < 0.5:
            flag = "yes" if self.rng.random() < 0.5 else "no"
            z = round(float(self.rng.uniform(0.0, 1.9 * self.z_max)), 2)
            return json.dumps({"is_dynamic": flag, "z_min": z})
        return self._det.infer(prompt, deadline_s)


@dataclass(eq=False)
class PipelineConfig:
    variant: str = VARIANT_FULL
    backend: object | None = None  # defaults to the deterministic backend
    latency_s: float | None = None  # overrides the scenario latency
    record_trace: bool = True


@dataclass(eq=False)
class _ActiveRegion:
    region: UnsafeRegion
    z_min: float
    agent_idx: int
    confirmed_at: float


class _AgentState:
    def __init__(self, agent: DynamicAgent, rng: np.random.Generator):
        self.agent = agent
        self.xy = agent.p0[:2].astype(float).copy()
        self.prev_xy = self.xy.copy()
        self.rng = rng
        self.heading = 0.0
        self.wp_index = 0
        motion = agent.motion
        if motion.get("type") == "random_walk":
            self.heading = float(rng.uniform(-math.pi, math.pi))

    def observed_velocity(self, dt: float) -> np.ndarray:
        return (self.xy - self.prev_xy) / dt

    def step(self, dt: float):
        self.prev_xy = self.xy.copy()
        self._advance(dt)

    def _advance(self, dt: float):
        m = self.agent.motion
        kind = m.get("type", "waypoints")
        if self.agent.speed <= 0.0:
            return
        if kind == "random_walk":
            sigma = float(m.get("sigma", 1.0))
            lo = np.array(m["bounds"][0], dtype=float)
            hi = np.array(m["bounds"][1], dtype=float)
            self.heading += float(self.rng.normal(0.0, sigma * math.sqrt(dt)))
            step = self.agent.speed * dt * np.array([math.cos(self.heading), math.sin(self.heading)])
            nxt = self.xy + step
            for d in range(2):
                if nxt[d] < lo[d]:
                    nxt[d] = 2 * lo[d] - nxt[d]
                    self._reflect(d)
                elif nxt[d] > hi[d]:
                    nxt[d] = 2 * hi[d] - nxt[d]
                    self._reflect(d)
            self.xy = np.clip(nxt, lo, hi)
        else:
            points = [np.array(p, dtype=float) for p in m["points"]]
            if not points:
                return
            tgt = points[self.wp_index % len(points)][:2]
            delta = tgt - self.xy
            dist = float(np.linalg.norm(delta))
            travel = self.agent.speed * dt
            if dist <= travel:
                self.xy = tgt.copy()
                self.wp_index += 1
            elif dist > 0:
                self.xy = self.xy + delta / dist * travel

    def _reflect(self, d: int):
        if d == 0:
            self.heading = math.pi - self.heading
        else:
            self.heading = -self.heading


def step_world(
    uav: State,
    u_applied: ControlInput,
    agent_states: list[_AgentState],
    params: DynamicsParams,
    dt: float,
) -> State:
    """Advance vehicle and agents one tick; agents move independently."""
    nxt = dynamics.step(uav, u_applied, params, dt)
    for ast in agent_states:
        ast.step(dt)
    return nxt


def _tail_unsafe(tail: np.ndarray, inflated: list[AxisBox]) -> bool:
    """Does any remaining reference segment clip an inflated unsafe box?"""
    if not inflated or len(tail) == 0:
        return False
    lo = np.array([b.lo for b in inflated])
    hi = np.array([b.hi for b in inflated])
    if len(tail) == 1:
        return bool(np.any(np.all((tail[0] >= lo) & (tail[0] <= hi), axis=1)))
    from .geometry import segments_intersect_boxes

    return segments_intersect_boxes(tail, lo, hi)


def _hold_reference(p: np.ndarray, yaw: float):
    """Single-sample hover reference; window padding holds it indefinitely."""
    from .search import ReferenceTrajectory

    return ReferenceTrajectory(
        times=np.array([0.0]),
        positions=p[None, :].copy(),
        yaws=np.array([yaw]),
        boxes=[None],
        cost=0.0,
    )


def _extend_landing_ramp(traj, target: np.ndarray, dt: float):
    """Append a slow vertical descent from the approach point onto the pad.

    The tracker's horizon sees the flat tail at the pad and bleeds off the
    descent speed before contact.
    """
    from .search import ReferenceTrajectory

    end_p = traj.positions[-1]
    drop = float(end_p[2] - target[2])
    if drop <= 0.0:
        return traj
    n_ramp = max(1, int(math.ceil(drop / (DESCENT_RATE * dt))))
    fracs = (np.arange(1, n_ramp + 1)) / n_ramp
    ramp = end_p[None, :] + fracs[:, None] * (target[None, :] - end_p[None, :])
    t_end = traj.times[-1]
    times = np.concatenate([traj.times, t_end + np.arange(1, n_ramp + 1) * dt])
    positions = np.vstack([traj.positions, ramp])
    yaws = np.concatenate([traj.yaws, np.full(n_ramp, traj.yaws[-1])])
    boxes = list(traj.boxes) + [traj.boxes[-1]] * n_ramp
    return ReferenceTrajectory(
        times=times, positions=positions, yaws=yaws, boxes=boxes, cost=traj.cost
    )


def _floor_box(region: UnsafeRegion, z_min: float, world: AxisBox) -> AxisBox | None:
    """Altitude-floor keep-out: below z_min while horizontally near the region."""
    if z_min <= 0.0:
        return None
    r = region.buffer + FLOOR_ACTIVATION_MARGIN
    lo = np.array([region.box.lo[0] - r, region.box.lo[1] - r, world.lo[2] - 1.0])
    hi = np.array([region.box.hi[0] + r, region.box.hi[1] + r, z_min])
    return AxisBox(lo, hi)


def run_trial(
    scenario: Scenario,
    kb: KnowledgeBase,
    pipeline: PipelineConfig,
    seed: int | None = None,
) -> tuple[TrialResult, list[dict]]:
    """Run one seeded trial; returns the outcome and the tick-level trace."""
    seed = scenario.seed if seed is None else seed
    params = scenario.params
    dt = scenario.mpc_cfg.dt
    latency = scenario.perception_latency if pipeline.latency_s is None else pipeline.latency_s
    kb = apply_kb_overrides(kb, scenario.kb_overrides)

    backend = pipeline.backend
    if backend is None:
        if pipeline.variant == VARIANT_NOISY:
            backend = NoisyBackend(
                np.random.default_rng(seed + SEED_BACKEND), z_max=scenario.z_max
            )
        else:
            backend = semantics.DeterministicBackend()

    agent_states = [
        _AgentState(a, np.random.default_rng(seed + SEED_AGENTS + i))
        for i, a in enumerate(scenario.agents)
    ]

    approach = scenario.target + np.array([0.0, 0.0, APPROACH_HEIGHT])
    # descent below the corridor floor is allowed only in this pad column
    pad_box = AxisBox(
        [scenario.target[0] - 0.4, scenario.target[1] - 0.4, scenario.target[2]],
        [scenario.target[0] + 0.4, scenario.target[1] + 0.4, scenario.target[2] + 0.7],
    )

    def safe_set(inflated: list[AxisBox]) -> list[AxisBox]:
        boxes = carve_corridor(scenario.corridor, inflated)
        boxes += carve_corridor(Corridor((pad_box,)), inflated)
        return boxes

    def plan_from(p: np.ndarray, v: np.ndarray, regions: list[_ActiveRegion]):
        unsafe = [ar.region for ar in regions]
        floors = [
            _floor_box(ar.region, ar.z_min, scenario.world_bounds) for ar in regions
        ]
        floors = [f for f in floors if f is not None]
        all_unsafe = unsafe + [
            UnsafeRegion(box=f, semantic_class="floor", buffer=0.0, is_dynamic=False)
            for f in floors
        ]
        traj = search.plan(
            p, v, approach, scenario.corridor, all_unsafe, scenario.planner, dt=dt
        )
        traj = _extend_landing_ramp(traj, scenario.target, dt)
        inflated = [inflate(r) for r in all_unsafe]
        return traj, safe_set(inflated), inflated

    try:
        reference, safe_boxes, inflated_boxes = plan_from(scenario.start.p, scenario.start.v, [])
    except (search.NoPath, search.StartBlocked, search.GoalBlocked) as e:
        raise ScenarioInfeasible(str(e)) from e

    uav = scenario.start
    t = 0.0
    tick = 0
    next_capture = 0.0
    pending: list[tuple[float, SafetySpec, int]] = []  # (available_at, spec, agent idx)
    regions: dict[int, _ActiveRegion] = {}
    spec_log: list[SafetySpec] = []
    trace: list[dict] = []
    replans = 0
    replan_wanted = False
    ref_t0 = 0.0
    prev_sol: mpc.MpcSolution | None = None
    u_applied = params.hover_input()
    end_reason = "timeout"

    max_ticks = int(round(scenario.trial_timeout / dt))
    ground = float(scenario.target[2])

    while tick <= max_ticks:
        agent_xy = [ast.xy for ast in agent_states]

        # (a) perception capture at the configured period
        if t >= next_capture - 1e-9:
            ents = visible_entities(scenario, uav, agent_xy)
            if pipeline.variant == VARIANT_BASELINE:
                # geometric detection: every visible footprint, no semantics,
                # no reasoning delay
                for _, _, idx in ents:
                    if idx >= 0:
                        spec = SafetySpec(
                            is_dynamic=True,
                            z_min=0.0,
                            buffer_radius=BASELINE_INFLATION,
                            matched_class="detected",
                            source="geometric",
                            issued_at=t,
                        )
                        pending.append((t, spec, idx))
            else:
                caption = generate_caption(scenario, uav, agent_xy, t)
                agent_idx = next((idx for _, _, idx in ents if idx >= 0), -1)
                try:
                    spec = semantics.infer_safety(
                        kb,
                        caption,
                        backend,
                        z_max=scenario.z_max,
                        now=t,
                        fallback=pipeline.variant != VARIANT_NOISY,
                    )
                except (
                    semantics.MalformedOutput,
                    semantics.BackendTimeout,
                    semantics.TransportError,
                ):
                    spec = None
                if spec is not None:
                    pending.append((t + latency, spec, agent_idx))
            next_capture += scenario.perception_period

        # (b) newly available specs update regions; staleness expires them
        changed = False
        new_specs: list[SafetySpec] = []
        still_pending = []
        for avail, spec, agent_idx in pending:
            if avail <= t + 1e-9:
                spec_log.append(spec)
                new_specs.append(spec)
                if not spec.is_dynamic and agent_idx >= 0 and agent_idx in regions:
                    # a fresh static verdict supersedes the tracked region
                    del regions[agent_idx]
                    changed = True
                if spec.is_dynamic and agent_idx >= 0:
                    agent = scenario.agents[agent_idx]
                    box = agent.footprint(agent_xy[agent_idx])
                    if pipeline.variant != VARIANT_BASELINE:
                        # re-project along the observed velocity to cover the
                        # gap until the next confirmation; the geometric
                        # baseline inflates bare footprints only
                        sweep = (
                            agent_states[agent_idx].observed_velocity(dt)
                            * scenario.perception_period
                        )
                        nrm = float(np.linalg.norm(sweep))
                        if nrm > 0.3:
                            sweep *= 0.3 / nrm
                        box = AxisBox(
                            np.minimum(box.lo, box.lo + np.array([*sweep, 0.0])),
                            np.maximum(box.hi, box.hi + np.array([*sweep, 0.0])),
                        )
                    prev_region = regions.get(agent_idx)
                    regions[agent_idx] = _ActiveRegion(
                        region=UnsafeRegion(
                            box=box,
                            semantic_class=spec.matched_class,
                            buffer=spec.buffer_radius,
                            is_dynamic=True,
                            created_at=t,
                        ),
                        z_min=spec.z_min,
                        agent_idx=agent_idx,
                        confirmed_at=t,
                    )
                    if (
                        prev_region is None
                        or np.max(np.abs(prev_region.region.box.lo - box.lo)) > 0.05
                        or abs(prev_region.z_min - spec.z_min) > 1e-9
                        or abs(prev_region.region.buffer - spec.buffer_radius) > 1e-9
                    ):
                        changed = True
            else:
                still_pending.append((avail, spec, agent_idx))
        pending = still_pending

        stale = [
            idx
            for idx, ar in regions.items()
            if t - ar.confirmed_at > 2.0 * scenario.perception_period + 1e-9
        ]
        for idx in stale:
            del regions[idx]
            changed = True

        if changed:
            active = list(regions.values())
            floors = [
                _floor_box(ar.region, ar.z_min, scenario.world_bounds) for ar in active
            ]
            new_inflated = [inflate(ar.region) for ar in active] + [
                f for f in floors if f is not None
            ]
            k_now = min(int(round((t - ref_t0) / dt)), len(reference) - 1)
            tail = reference.positions[k_now:]
            if replan_wanted or _tail_unsafe(tail, new_inflated):
                try:
                    reference, safe_boxes, inflated_boxes = plan_from(uav.p, uav.v, active)
                    ref_t0 = t
                    replans += 1
                    replan_wanted = False
                except (search.NoPath, search.StartBlocked, search.GoalBlocked):
                    # landing is off until the unsafe set changes again:
                    # refresh constraints and hover at the nearest safe point
                    safe_boxes = safe_set(new_inflated)
                    inflated_boxes = new_inflated
                    if safe_boxes:
                        hold_box = min(safe_boxes, key=lambda b: b.sq_distance(uav.p))
                        hold_p = np.clip(uav.p, hold_box.lo, hold_box.hi)
                        # hover holds stay clear of the ground
                        hold_p[2] = np.clip(
                            max(hold_p[2], ground + 0.6), hold_box.lo[2], hold_box.hi[2]
                        )
                        reference = _hold_reference(hold_p, float(uav.att[2]))
                        ref_t0 = t
                    replan_wanted = True
            else:
                # the current reference still clears the updated unsafe set;
                # keep flying it under refreshed constraints
                safe_boxes = safe_set(new_inflated)
                inflated_boxes = new_inflated

        # (c) track the reference with the receding-horizon controller
        k0 = int(round((t - ref_t0) / dt))
        rows = []
        polys: list[Polytope | None] = [None]
        prev_box = None
        for i in range(k0, k0 + scenario.mpc_cfg.N + 1):
            j = min(i, len(reference) - 1)
            rows.append(
                [
                    reference.positions[j][0],
                    reference.positions[j][1],
                    reference.positions[j][2],
                    reference.yaws[j],
                ]
            )
            if i > k0:
                if safe_boxes:
                    box = search.assign_box(reference.positions[j], safe_boxes, prev_box)
                    prev_box = box
                    polys.append(box_to_polytope(box))
                else:
                    polys.append(None)
        ref_window = np.array(rows)

        u0, sol = mpc.track_step(
            prev_sol, uav, ref_window, polys, scenario.mpc_cfg, params
        )
        if sol.status == mpc.INFEASIBLE:
            prev_sol = None
            replan_wanted = True
        else:
            prev_sol = sol

        # first-order actuator lag when configured, otherwise direct command
        if params.tau_act > 0.0:
            blend = 1.0 - math.exp(-dt / params.tau_act)
            uv = u_applied.to_vector() + blend * (u0.to_vector() - u_applied.to_vector())
            u_applied = ControlInput.from_vector(uv)
        else:
            u_applied = u0

        trace.append(
            {
                "t": round(t, 6),
                "p": uav.p.tolist(),
                "v": uav.v.tolist(),
                "att": uav.att.tolist(),
                "u": u_applied.to_vector().tolist(),
                "safe_boxes": [[b.lo.tolist(), b.hi.tolist()] for b in safe_boxes],
                "unsafe_boxes": [[b.lo.tolist(), b.hi.tolist()] for b in inflated_boxes],
                "specs": [s.to_json() for s in new_specs],
                "agents": [ast.agent.center(ast.xy).tolist() for ast in agent_states],
                "replans": replans,
            }
        )

        # termination checks on the CURRENT state
        speed = float(np.linalg.norm(uav.v))
        if uav.p[2] <= ground + TOUCHDOWN_HEIGHT and speed <= TOUCHDOWN_SPEED:
            end_reason = "touchdown"
            break
        if uav.p[2] < ground - 0.05:
            end_reason = "crash"
            break
        if _in_collision(scenario, uav.p, agent_xy):
            end_reason = "collision"
            break
        if tick == max_ticks:
            end_reason = "timeout"
            break

        uav = step_world(uav, u_applied, agent_states, params, dt)
        t += dt
        tick += 1

    outcome = classify_outcome(trace, scenario, end_reason)
    result = TrialResult(
        success=outcome["success"],
        close_call=outcome["close_call"],
        collision=outcome["collision"],
        touchdown_error=outcome["touchdown_error"],
        duration=t,
        min_agent_distance=outcome["min_agent_distance"],
        replan_count=replans,
        spec_log=spec_log,
        touched_down=outcome["touched_down"],
        timed_out=end_reason == "timeout",
        end_reason=end_reason,
    )
    return result, trace


def _in_collision(scenario: Scenario, p: np.ndarray, agent_xy: list[np.ndarray]) -> bool:
    for i, agent in enumerate(scenario.agents):
        if agent.footprint(agent_xy[i]).contains(p, tol=0.0):
            return True
    return any(box.contains(p, tol=0.0) for box, _ in scenario.static_obstacles)


def classify_outcome(trace: list[dict], scenario: Scenario, end_reason: str = "") -> dict:
    """Outcome flags recomputed from the trace alone.

    Collision: the vehicle point entered a footprint or a static box.
    Close call: within 1 m of any agent center at any tick. Success:
    touchdown within 0.5 m of the target with neither of the above.
    """
    min_dist = math.inf
    collision = False
    ground = float(scenario.target[2])
    for rec in trace:
        p = np.array(rec["p"])
        for i, agent in enumerate(scenario.agents):
            center = np.array(rec["agents"][i])
            min_dist = min(min_dist, float(np.linalg.norm(p - center)))
            xy = center[:2]
            if agent.footprint(xy).contains(p, tol=0.0):
                collision = True
        if any(box.contains(p, tol=0.0) for box, _ in scenario.static_obstacles):
            collision = True

    touched = False
    err = math.nan
    if trace:
        last = trace[-1]
        p = np.array(last["p"])
        v = np.array(last["v"])
        if p[2] <= ground + TOUCHDOWN_HEIGHT and float(np.linalg.norm(v)) <= TOUCHDOWN_SPEED:
            touched = True
            err = float(np.linalg.norm(p[:2] - scenario.target[:2]))
    close_call = min_dist < CLOSE_CALL_RADIUS
    success = touched and err <= SUCCESS_RADIUS and not collision and not close_call
    return {
        "success": success,
        "close_call": close_call,
        "collision": collision,
        "touchdown_error": err,
        "min_agent_distance": min_dist,
        "touched_down": touched,
    }


METRICS_HEADER = "variant,trials,success_rate,close_call_rate,mean_touchdown_error_m,mean_replans"


def run_experiment(
    scenario: Scenario,
    kb: KnowledgeBase,
    n_trials: int,
    base_seed: int,
    variants: tuple[str, ...] = (VARIANT_BASELINE, VARIANT_NOISY, VARIANT_FULL),
    latency_s: float | None = None,
    jobs: int = 1,
    trace_dir: str | None = None,
) -> list[dict]:
    """Seeded trials per variant; aggregation is sorted and deterministic."""
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    tasks = [(v, base_seed + i) for v in variants for i in range(n_trials)]

    def one(task):
        variant, seed = task
        pipeline = PipelineConfig(variant=variant, latency_s=latency_s)
        result, trace = run_trial(scenario, kb, pipeline, seed=seed)
        if trace_dir is not None:
            import os

            path = os.path.join(trace_dir, f"trace_{variant}_{seed}.jsonl")
            write_trace(trace, path)
            result.trace_path = path
        return variant, seed, result

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_experiment_worker, [
                (scenario, kb, task, latency_s, trace_dir) for task in tasks
            ]))
    else:
        outcomes = [one(task) for task in tasks]

    rows = []
    for variant in variants:
        res = sorted(
            [(seed, r) for v, seed, r in outcomes if v == variant], key=lambda x: x[0]
        )
        results = [r for _, r in res]
        n = len(results)
        err_vals = [r.touchdown_error for r in results if not math.isnan(r.touchdown_error)]
        rows.append(
            {
                "variant": variant,
                "trials": n,
                "success_rate": sum(r.success for r in results) / n,
                "close_call_rate": sum(r.close_call for r in results) / n,
                "mean_touchdown_error_m": sum(err_vals) / len(err_vals) if err_vals else math.nan,
                "mean_replans": sum(r.replan_count for r in results) / n,
                "results": results,
            }
        )
    return rows


def _experiment_worker(packed):
    scenario, kb, task, latency_s, trace_dir = packed
    variant, seed = task
    pipeline = PipelineConfig(variant=variant, latency_s=latency_s)
    result, trace = run_trial(scenario, kb, pipeline, seed=seed)
    if trace_dir is not None:
        import os

        path = os.path.join(trace_dir, f"trace_{variant}_{seed}.jsonl")
        write_trace(trace, path)
        result.trace_path = path
    return variant, seed, result


def metrics_csv(rows: list[dict]) -> str:
    lines = [METRICS_HEADER]
    for row in rows:
        err = row["mean_touchdown_error_m"]
        lines.append(
            f"{row['variant']},{row['trials']},{row['success_rate']:.4f},"
            f"{row['close_call_rate']:.4f},{'' if math.isnan(err) else f'{err:.4f}'},"
            f"{row['mean_replans']:.4f}"
        )
    return "\n".join(lines) + "\n"


def write_trace(trace: list[dict], path: str):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
