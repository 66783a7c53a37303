"""Receding-horizon tracker: SQP around the nonlinear model, ADMM inner QP.

Each solve rolls the nominal input sequence through the true dynamics,
linearizes per step, condenses the state perturbations onto the input
perturbations, and solves one convex QP per SQP iteration. The stage cost
tracks position and yaw only (references carry no velocity), penalizes
input effort about hover, and penalizes input variation including the seam
to the input applied at the previous control step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dynamics
from .dynamics import ControlInput, DynamicsParams, State
from .geometry import Polytope

OPTIMAL = "optimal"
MAX_ITERS = "max_iters"
INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class MpcConfig:
    N: int = 20
    dt: float = 0.05
    Q: tuple[float, float, float, float] = (20.0, 20.0, 20.0, 2.0)
    R: tuple[float, float, float, float] = (0.5, 0.5, 0.5, 0.2)
    R_delta: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.5)
    Q_N: tuple[float, float, float, float] | None = None  # defaults to 5*Q
    sqp_max_iters: int = 3
    sqp_tol: float = 1e-3
    qp_eps_abs: float = 1e-4
    qp_eps_rel: float = 1e-4
    qp_max_iters: int = 4000
    v_max: float = 3.0
    soften_polytopes: bool = False
    slack_weight: float = 1e4

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("horizon must be at least 2 steps")

    def terminal_weights(self) -> np.ndarray:
        if self.Q_N is not None:
            return np.asarray(self.Q_N, dtype=float)
        return 5.0 * np.asarray(self.Q, dtype=float)


@dataclass(eq=False)
class MpcProblem:
    x0: State
    reference: np.ndarray  # (N+1, 4): x, y, z, yaw
    step_polytopes: list[Polytope | None]
    params: DynamicsParams
    u_seam: np.ndarray | None = None  # input applied at the previous tick
    u_warm: np.ndarray | None = None  # (N, 4) nominal input warm start
    qp_dual_warm: np.ndarray | None = None


@dataclass(eq=False)
class MpcSolution:
    states: list[State]
    inputs: list[ControlInput]
    cost: float
    sqp_iters: int
    qp_residuals: tuple[float, float]
    status: str
    qp_dual: np.ndarray | None = None

    @property
    def input_matrix(self) -> np.ndarray:
        return np.array([u.to_vector() for u in self.inputs])


@dataclass(eq=False)
class QpResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    prim_res: float
    dual_res: float
    iters: int


def _ruiz_equilibrate(H, A, f, iters=2):
    """Modified Ruiz scaling of the stacked KKT data.

    Returns (Hs, As, fs, D, E, c): Hs = c*D H D, As = E A D, fs = c*D f.
    Primal recovers as x = D xs, duals as y = E ys / c.
    """
    n = H.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    Hs, As, fs = H.copy(), A.copy(), f.copy()
    for _ in range(iters):
        col = np.maximum(np.max(np.abs(Hs), axis=0), np.max(np.abs(As), axis=0) if m else 0.0)
        row = np.max(np.abs(As), axis=1) if m else np.zeros(0)
        d = 1.0 / np.sqrt(np.maximum(col, 1e-10))
        e = 1.0 / np.sqrt(np.maximum(row, 1e-10))
        Hs = (Hs * d).T * d
        fs = fs * d
        if m:
            As = (As * d) * e[:, None]
        D *= d
        E *= e
        # cost scaling keeps the quadratic part near unit magnitude
        gamma = 1.0 / max(np.mean(np.max(np.abs(Hs), axis=0)), float(np.max(np.abs(fs))), 1e-10)
        Hs *= gamma
        fs *= gamma
        c *= gamma
    return Hs, As, fs, D, E, c


def qp_solve(
    H: np.ndarray,
    f: np.ndarray,
    A: np.ndarray | None = None,
    l: np.ndarray | None = None,
    u: np.ndarray | None = None,
    eps_abs: float = 1e-6,
    eps_rel: float = 1e-6,
    max_iters: int = 20000,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
) -> QpResult:
    """Minimize 0.5 x'Hx + f'x subject to l <= Ax <= u.

    Operator-splitting iterations on Ruiz-equilibrated data: alternate a
    regularized minimization in x with a projection of the constraint image
    onto [l, u] and a scaled dual ascent, with over-relaxation and an
    adaptive penalty. Convergence is declared on the unscaled residuals.
    Divergence of the dual increments yields an infeasibility certificate.
    """
    n = len(f)
    Hr = H + 1e-8 * np.eye(n)
    if A is None or A.shape[0] == 0:
        x = np.linalg.solve(Hr, -f)
        res = float(np.max(np.abs(H @ x + f))) if n else 0.0
        return QpResult(x=x, y=np.zeros(0), status=OPTIMAL, prim_res=0.0, dual_res=res, iters=0)

    m = A.shape[0]
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    Hs, As, fs, Dv, Ev, c = _ruiz_equilibrate(Hr, np.asarray(A, dtype=float), np.asarray(f, dtype=float))
    ls = Ev * l
    us = Ev * u

    sigma = 1e-6
    alpha = 1.6
    is_eq = (u - l) < 1e-12

    xs = np.zeros(n) if x0 is None else x0.astype(float) / Dv
    ys = np.zeros(m) if y0 is None or len(y0) != m else y0.astype(float) * c / Ev
    zs = np.clip(As @ xs, ls, us)
    ys_prev = ys.copy()

    def factor(rho_scalar: float):
        rho_vec = np.where(is_eq, 1e3 * rho_scalar, rho_scalar)
        M = Hs + sigma * np.eye(n) + (As.T * rho_vec) @ As
        return np.linalg.inv(M), rho_vec

    rho = 0.1
    Minv, rho_vec = factor(rho)
    Ast = np.ascontiguousarray(As.T)

    status = MAX_ITERS
    prim = dual = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        xt = Minv @ (sigma * xs - fs + Ast @ (rho_vec * zs - ys))
        Axt = As @ xt
        xs = alpha * xt + (1.0 - alpha) * xs
        Axr = alpha * Axt + (1.0 - alpha) * zs
        zs = np.clip(Axr + ys / rho_vec, ls, us)
        ys = ys + rho_vec * (Axr - zs)

        if it % 10 == 0 or it == max_iters:
            # unscaled iterates and residuals
            x = Dv * xs
            y = Ev * ys / c
            z = zs / Ev
            Ax = A @ x
            rp = Ax - z
            prim = float(np.max(np.abs(rp)))
            Hx = H @ x
            Aty = A.T @ y
            dual = float(np.max(np.abs(Hx + f + Aty)))
            eps_p = eps_abs + eps_rel * max(float(np.max(np.abs(Ax))), float(np.max(np.abs(z))))
            eps_d = eps_abs + eps_rel * max(
                float(np.max(np.abs(Hx))), float(np.max(np.abs(Aty))), float(np.max(np.abs(f)))
            )
            if prim <= eps_p and dual <= eps_d:
                status = OPTIMAL
                break

            dys = ys - ys_prev
            dy = Ev * dys / c
            ndy = float(np.max(np.abs(dy)))
            if ndy > 1e-14:
                with np.errstate(invalid="ignore"):
                    support = float(
                        np.sum(np.where(dy > 0, np.where(np.isfinite(u), u, 0.0) * dy, 0.0))
                        + np.sum(np.where(dy < 0, np.where(np.isfinite(l), l, 0.0) * dy, 0.0))
                    )
                unbounded = bool(
                    np.any((dy > 1e-8 * ndy) & ~np.isfinite(u))
                    or np.any((dy < -1e-8 * ndy) & ~np.isfinite(l))
                )
                if (
                    not unbounded
                    and float(np.max(np.abs(A.T @ dy))) <= 1e-6 * ndy
                    and support <= -1e-6 * ndy
                ):
                    status = INFEASIBLE
                    break
            ys_prev = ys.copy()

            if it % 50 == 0 and np.isfinite(prim) and np.isfinite(dual):
                # OSQP-style penalty rebalancing on relative residuals
                rel_p = prim / max(float(np.max(np.abs(Ax))), float(np.max(np.abs(z))), 1e-10)
                rel_d = dual / max(
                    float(np.max(np.abs(Hx))), float(np.max(np.abs(Aty))), float(np.max(np.abs(f))), 1e-10
                )
                ratio = math.sqrt(rel_p / max(rel_d, 1e-14))
                if ratio > 5.0 or ratio < 0.2:
                    rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                    Minv, rho_vec = factor(rho)

    x = Dv * xs
    y = Ev * ys / c
    return QpResult(x=x, y=y, status=status, prim_res=prim, dual_res=dual, iters=it)


_POS_YAW = np.zeros((4, 9))
_POS_YAW[0:3, 0:3] = np.eye(3)
_POS_YAW[3, 8] = 1.0


def _wrap(a: np.ndarray | float) -> np.ndarray | float:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _tracking_errors(xs: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Position and wrapped-yaw errors per step, (N+1, 4)."""
    e = np.empty((xs.shape[0], 4))
    e[:, 0:3] = xs[:, 0:3] - reference[:, 0:3]
    e[:, 3] = _wrap(xs[:, 8] - reference[:, 3])
    return e


def nonlinear_cost(
    u_flat: np.ndarray, problem: MpcProblem, cfg: MpcConfig
) -> tuple[float, np.ndarray]:
    """True tracking cost of an input sequence; returns (cost, rollout)."""
    N = cfg.N
    params = problem.params
    u_lo = np.array([-params.rate_max] * 3 + [params.thrust_min])
    u_hi = np.array([params.rate_max] * 3 + [params.thrust_max])
    us = np.clip(u_flat.reshape(N, 4), u_lo, u_hi)
    xs = np.empty((N + 1, 9))
    xs[0] = problem.x0.to_vector()
    for k in range(N):
        xs[k + 1] = dynamics.step_vector(xs[k], us[k], params, cfg.dt)

    Q = np.asarray(cfg.Q)
    QN = cfg.terminal_weights()
    R = np.asarray(cfg.R)
    Rd = np.asarray(cfg.R_delta)
    u_hover = problem.params.hover_input().to_vector()
    u_seam = problem.u_seam if problem.u_seam is not None else u_hover

    e = _tracking_errors(xs, problem.reference)
    cost = float(np.sum(e[:-1] ** 2 @ Q) + e[-1] ** 2 @ QN)
    du = us - u_hover
    cost += float(np.sum(du**2 @ R))
    diffs = np.vstack([us[0] - u_seam, np.diff(us, axis=0)])
    cost += float(np.sum(diffs**2 @ Rd))
    return cost, xs


def _sensitivities(xs: np.ndarray, us: np.ndarray, params: DynamicsParams, dt: float) -> np.ndarray:
    """Condensed state sensitivities S[k] = d x_k / d u_flat, (N+1, 9, 4N)."""
    N = us.shape[0]
    u_lo = np.array([-params.rate_max] * 3 + [params.thrust_min])
    u_hi = np.array([params.rate_max] * 3 + [params.thrust_max])
    ucs = np.clip(us, u_lo, u_hi)
    stages = np.empty((N, 4, 9))
    xk = xs[0]
    for k in range(N):
        xk, stages[k] = dynamics.step_with_stages(xk, ucs[k], params, dt)
    A, B = dynamics.linearize_batch(stages, ucs, params, dt)
    S = np.zeros((N + 1, 9, 4 * N))
    for k in range(N):
        S[k + 1] = A[k] @ S[k]
        S[k + 1][:, 4 * k : 4 * k + 4] += B[k]
    return S


def _assemble_qp(
    xs: np.ndarray,
    us: np.ndarray,
    S: np.ndarray,
    problem: MpcProblem,
    cfg: MpcConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]:
    N = cfg.N
    nv = 4 * N
    n_slack = 0
    if cfg.soften_polytopes:
        n_slack = sum(1 for p in problem.step_polytopes[1:] if p is not None)

    Q = np.asarray(cfg.Q)
    QN = cfg.terminal_weights()
    R = np.asarray(cfg.R)
    Rd = np.asarray(cfg.R_delta)
    u_hover = problem.params.hover_input().to_vector()
    u_seam = problem.u_seam if problem.u_seam is not None else u_hover
    e = _tracking_errors(xs, problem.reference)

    # tracking: rows C S_k for k = 1..N (step 0 is fixed)
    G = np.matmul(_POS_YAW[None], S[1:]).reshape(4 * N, 4 * N)
    W = np.concatenate([np.tile(Q, N - 1), QN])
    ev = e[1:].reshape(-1)
    H = 2.0 * (G.T * W) @ G
    f = 2.0 * G.T @ (W * ev)

    # input effort about hover
    Rfull = np.tile(R, N)
    H[np.arange(nv), np.arange(nv)] += 2.0 * Rfull
    f += 2.0 * Rfull * (us - u_hover).reshape(-1)

    # input variation, seam first
    D = np.eye(nv)
    D[np.arange(4, nv), np.arange(0, nv - 4)] -= 1.0
    dvec = np.vstack([us[0] - u_seam, np.diff(us, axis=0)]).reshape(-1)
    Rdfull = np.tile(Rd, N)
    H += 2.0 * (D.T * Rdfull) @ D
    f += 2.0 * D.T @ (Rdfull * dvec)

    if n_slack:
        Hs = np.zeros((nv + n_slack, nv + n_slack))
        Hs[:nv, :nv] = H
        Hs[np.arange(nv, nv + n_slack), np.arange(nv, nv + n_slack)] = 2.0 * cfg.slack_weight
        H = Hs
        f = np.concatenate([f, np.zeros(n_slack)])

    rows: list[np.ndarray] = []
    lbs: list[np.ndarray] = []
    ubs: list[np.ndarray] = []
    ntot = nv + n_slack

    # input bounds
    A_in = np.zeros((nv, ntot))
    A_in[:, :nv] = np.eye(nv)
    u_lo = np.array([-problem.params.rate_max] * 3 + [problem.params.thrust_min])
    u_hi = np.array([problem.params.rate_max] * 3 + [problem.params.thrust_max])
    rows.append(A_in)
    lbs.append(np.tile(u_lo, N) - us.reshape(-1))
    ubs.append(np.tile(u_hi, N) - us.reshape(-1))

    # velocity and attitude bounds per step
    vel_rows = np.zeros((3 * N, ntot))
    vel_rows[:, :nv] = S[1:, 3:6, :].reshape(3 * N, nv)
    att_rows = np.zeros((2 * N, ntot))
    att_rows[:, :nv] = S[1:, 6:8, :].reshape(2 * N, nv)
    vflat = xs[1:, 3:6].reshape(-1)
    aflat = xs[1:, 6:8].reshape(-1)
    rows += [vel_rows, att_rows]
    lbs += [-cfg.v_max - vflat, -problem.params.att_limit - aflat]
    ubs += [cfg.v_max - vflat, problem.params.att_limit - aflat]

    # per-step position polytopes
    si = 0
    for k in range(1, N + 1):
        poly = problem.step_polytopes[k] if k < len(problem.step_polytopes) else None
        if poly is None:
            continue
        m_k = poly.A.shape[0]
        block = np.zeros((m_k, ntot))
        block[:, :nv] = poly.A @ S[k][0:3]
        if n_slack:
            block[:, nv + si] = -1.0
            si += 1
        rows.append(block)
        ubs.append(poly.b - poly.A @ xs[k, 0:3])
        lbs.append(np.full(m_k, -np.inf))
    if n_slack:
        s_rows = np.zeros((n_slack, ntot))
        s_rows[:, nv:] = np.eye(n_slack)
        rows.append(s_rows)
        lbs.append(np.zeros(n_slack))
        ubs.append(np.full(n_slack, np.inf))

    return H, f, np.vstack(rows), np.concatenate(lbs), np.concatenate(ubs), n_slack


def solve(problem: MpcProblem, cfg: MpcConfig) -> MpcSolution:
    """SQP loop: linearize, solve the condensed QP, backtrack on true cost."""
    N = cfg.N
    if problem.reference.shape[0] != N + 1:
        raise ValueError("reference window must have N+1 rows")
    u_hover = problem.params.hover_input().to_vector()
    if problem.u_warm is not None:
        us = problem.u_warm.copy()
    else:
        us = np.tile(u_hover, (N, 1))
    u_lo = np.array([-problem.params.rate_max] * 3 + [problem.params.thrust_min])
    u_hi = np.array([problem.params.rate_max] * 3 + [problem.params.thrust_max])
    us = np.clip(us, u_lo, u_hi)

    cost, xs = nonlinear_cost(us.reshape(-1), problem, cfg)
    qp_res = (0.0, 0.0)
    status = OPTIMAL
    iters_done = 0
    y_warm = problem.qp_dual_warm
    for it in range(cfg.sqp_max_iters):
        S = _sensitivities(xs, us, problem.params, cfg.dt)
        H, f, A, lb, ub, n_slack = _assemble_qp(xs, us, S, problem, cfg)
        sol = qp_solve(
            H,
            f,
            A,
            lb,
            ub,
            eps_abs=cfg.qp_eps_abs,
            eps_rel=cfg.qp_eps_rel,
            max_iters=cfg.qp_max_iters,
            y0=y_warm,
        )
        qp_res = (sol.prim_res, sol.dual_res)
        y_warm = sol.y
        if sol.status == INFEASIBLE:
            status = INFEASIBLE
            break
        du = sol.x[: 4 * N].reshape(N, 4)
        iters_done = it + 1

        step_norm = float(np.max(np.abs(du)))
        if step_norm < 1e-8:
            break
        small_step = step_norm < 2e-3
        alpha = 1.0
        accepted = False
        while alpha >= 1.0 / 16.0 - 1e-12:
            u_try = np.clip(us + alpha * du, u_lo, u_hi)
            c_try, xs_try = nonlinear_cost(u_try.reshape(-1), problem, cfg)
            if c_try < cost - 1e-12:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        decrease = cost - c_try
        us, cost, xs = u_try, c_try, xs_try
        if decrease < cfg.sqp_tol or small_step:
            break
    else:
        status = MAX_ITERS if status == OPTIMAL else status

    states = [State.from_vector(x) for x in xs]
    inputs = [ControlInput.from_vector(u) for u in us]
    return MpcSolution(
        states=states,
        inputs=inputs,
        cost=cost,
        sqp_iters=iters_done,
        qp_residuals=qp_res,
        status=status,
        qp_dual=y_warm,
    )


def pad_reference(ref: np.ndarray, N: int) -> np.ndarray:
    """Hold the final reference state when the window is shorter than N+1."""
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    if ref.shape[0] >= N + 1:
        return ref[: N + 1]
    pad = np.tile(ref[-1], (N + 1 - ref.shape[0], 1))
    return np.vstack([ref, pad])


def track_step(
    prev: MpcSolution | None,
    x0: State,
    ref_window: np.ndarray,
    step_polytopes: list[Polytope | None],
    cfg: MpcConfig,
    params: DynamicsParams,
) -> tuple[ControlInput, MpcSolution]:
    """One receding-horizon step with warm start shifted from prev.

    On an infeasible QP the returned input is a hover hold; the caller sees
    status == INFEASIBLE and should trigger replanning.
    """
    reference = pad_reference(ref_window, cfg.N)
    u_warm = None
    u_seam = None
    y_warm = None
    if prev is not None and prev.inputs:
        w = prev.input_matrix
        u_warm = np.vstack([w[1:], w[-1]])
        u_seam = w[0]
        y_warm = prev.qp_dual
    problem = MpcProblem(
        x0=x0,
        reference=reference,
        step_polytopes=step_polytopes,
        params=params,
        u_seam=u_seam,
        u_warm=u_warm,
        qp_dual_warm=y_warm,
    )
    sol = solve(problem, cfg)
    if sol.status == INFEASIBLE:
        return params.hover_input(), sol
    return sol.inputs[0], sol
