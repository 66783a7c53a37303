"""Quadrotor point-mass model with attitude kinematics.

State is [p, v, roll, pitch, yaw]; the input is commanded body rates plus
mass-normalized thrust along body z. The same model serves as simulator
ground truth and as the controller's prediction model, so model mismatch
is zero unless an actuator lag is configured on the simulator side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class State:
    """Vehicle state: position [m], velocity [m/s], roll/pitch/yaw [rad]."""

    p: np.ndarray
    v: np.ndarray
    att: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.att])

    @staticmethod
    def from_vector(x: np.ndarray) -> "State":
        x = np.asarray(x, dtype=float)
        return State(p=x[0:3].copy(), v=x[3:6].copy(), att=x[6:9].copy())


@dataclass(frozen=True, eq=False)
class ControlInput:
    """Commanded body rates [rad/s] and mass-normalized thrust [m/s^2]."""

    rate_cmd: np.ndarray
    thrust_cmd: float

    def to_vector(self) -> np.ndarray:
        return np.array([*self.rate_cmd, self.thrust_cmd])

    @staticmethod
    def from_vector(u: np.ndarray) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return ControlInput(rate_cmd=u[0:3].copy(), thrust_cmd=float(u[3]))


@dataclass(frozen=True)
class DynamicsParams:
    g: float = 9.81
    thrust_min: float = 0.0
    thrust_max: float = 18.0
    rate_max: float = 3.0
    dt: float = 0.05
    att_limit: float = 1.2
    # First-order actuator lag on commanded rates/thrust; 0 disables it.
    # Only the simulator applies it, so a nonzero value injects model mismatch.
    tau_act: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.thrust_min < self.g < self.thrust_max):
            raise ValueError("require 0 <= thrust_min < g < thrust_max")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")

    def hover_input(self) -> ControlInput:
        return ControlInput(rate_cmd=np.zeros(3), thrust_cmd=self.g)


def rotation_matrix(att: np.ndarray) -> np.ndarray:
    """Body-to-world rotation for ZYX Euler angles (roll, pitch, yaw)."""
    phi, theta, psi = att
    cp, sp = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cy, sy = np.cos(psi), np.sin(psi)
    # R = Rz(yaw) @ Ry(pitch) @ Rx(roll)
    return np.array(
        [
            [cy * ct, cy * st * sp - sy * cp, cy * st * cp + sy * sp],
            [sy * ct, sy * st * sp + cy * cp, sy * st * cp - cy * sp],
            [-st, ct * sp, ct * cp],
        ]
    )


def clamp_input(u: ControlInput, params: DynamicsParams) -> ControlInput:
    rates = np.clip(u.rate_cmd, -params.rate_max, params.rate_max)
    thrust = float(np.clip(u.thrust_cmd, params.thrust_min, params.thrust_max))
    return ControlInput(rate_cmd=rates, thrust_cmd=thrust)


def _thrust_axis(att: np.ndarray) -> tuple[float, float, float]:
    """Body z-axis in the world frame (third column of rotation_matrix)."""
    cp, sp = math.cos(att[0]), math.sin(att[0])
    ct, st = math.cos(att[1]), math.sin(att[1])
    cy, sy = math.cos(att[2]), math.sin(att[2])
    return cy * st * cp + sy * sp, sy * st * cp - cy * sp, ct * cp


def _deriv(x: np.ndarray, u: np.ndarray, g: float) -> np.ndarray:
    """Continuous dynamics on the packed 9-vector; u = [rates, thrust]."""
    e1, e2, e3 = _thrust_axis(x[6:9])
    T = u[3]
    return np.array(
        [x[3], x[4], x[5], e1 * T, e2 * T, e3 * T - g, u[0], u[1], u[2]]
    )


def step_vector(x: np.ndarray, uc: np.ndarray, params: DynamicsParams, dt: float) -> np.ndarray:
    """RK4 update on packed vectors; uc must already respect input bounds."""
    k1 = _deriv(x, uc, params.g)
    k2 = _deriv(x + 0.5 * dt * k1, uc, params.g)
    k3 = _deriv(x + 0.5 * dt * k2, uc, params.g)
    k4 = _deriv(x + dt * k3, uc, params.g)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    lim = params.att_limit
    if xn[6] > lim:
        xn[6] = lim
    elif xn[6] < -lim:
        xn[6] = -lim
    if xn[7] > lim:
        xn[7] = lim
    elif xn[7] < -lim:
        xn[7] = -lim
    return xn


def step(s: State, u: ControlInput, params: DynamicsParams, dt: float | None = None) -> State:
    """Advance one control step with RK4; input and attitude are clamped.

    The input clamp mirrors the admissible input set; roll/pitch are clipped
    to att_limit after integration to stay clear of the Euler singularity.
    """
    if dt is None:
        dt = params.dt
    uc = clamp_input(u, params).to_vector()
    return State.from_vector(step_vector(s.to_vector(), uc, params, dt))


def _thrust_jacobian(att: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Body z-axis in the world frame and its partials w.r.t. (roll, pitch, yaw)."""
    cp, sp = math.cos(att[0]), math.sin(att[0])
    ct, st = math.cos(att[1]), math.sin(att[1])
    cy, sy = math.cos(att[2]), math.sin(att[2])
    e3b = np.array([cy * st * cp + sy * sp, sy * st * cp - cy * sp, ct * cp])
    de3 = np.array(
        [
            [-cy * st * sp + sy * cp, cy * ct * cp, -sy * st * cp + cy * sp],
            [-sy * st * sp - cy * cp, sy * ct * cp, cy * st * cp + sy * sp],
            [-ct * sp, -st * cp, 0.0],
        ]
    )
    return e3b, de3


def linearize_vector(
    x: np.ndarray, ucv: np.ndarray, params: DynamicsParams, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobian propagation core on packed vectors; ucv must be in bounds.

    The continuous Jacobian has only two nonzero blocks (dp/dv = I and
    dv/datt), so each RK4 stage multiplies by it block-wise instead of
    through dense 9x9 products.
    """
    T = ucv[3]
    kx_acc = np.zeros((9, 9))
    ku_acc = np.zeros((9, 4))
    k_prev = None
    kx_prev = None
    ku_prev = None
    ks = []
    for h, w in ((0.0, 1.0), (0.5 * dt, 2.0), (0.5 * dt, 2.0), (dt, 1.0)):
        xi = x if k_prev is None else x + h * k_prev
        e3b, de3 = _thrust_jacobian(xi[6:9])
        kx = np.zeros((9, 9))
        ku = np.zeros((9, 4))
        # jx @ (I + h*kx_prev): rows 0:3 pick the v-rows, rows 3:6 couple att
        if k_prev is None:
            kx[0:3, 3:6] = np.eye(3)
            kx[3:6, 6:9] = T * de3
        else:
            kx[0:3, 3:6] = np.eye(3)
            kx[0:3] += h * kx_prev[3:6]
            kx[3:6, 6:9] = T * de3
            kx[3:6] += (T * de3) @ (h * kx_prev[6:9])
            ku[0:3] = h * ku_prev[3:6]
            ku[3:6] = (T * de3) @ (h * ku_prev[6:9])
        ku[3:6, 3] += e3b
        ku[6:9, 0:3] = np.eye(3)
        k_prev = _deriv(xi, ucv, params.g)
        kx_prev, ku_prev = kx, ku
        ks.append(k_prev)
        kx_acc += w * kx
        ku_acc += w * ku

    A = np.eye(9) + (dt / 6.0) * kx_acc
    B = (dt / 6.0) * ku_acc

    # Clipped roll/pitch pin their rows.
    xn = x + (dt / 6.0) * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
    for i in range(2):
        if abs(xn[6 + i]) >= params.att_limit:
            A[6 + i, :] = 0.0
            B[6 + i, :] = 0.0
    return A, B


def linearize(
    s: State, u: ControlInput, params: DynamicsParams, dt: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Discrete Jacobians (A, B) of step() at (s, u).

    Propagates the continuous Jacobians through the RK4 stages analytically.
    Inputs beyond their bounds and clipped roll/pitch contribute zero
    sensitivity, matching step() away from the clamp boundaries.
    """
    if dt is None:
        dt = params.dt
    uc = clamp_input(u, params)
    A, B = linearize_vector(s.to_vector(), uc.to_vector(), params, dt)
    active = np.ones(4)
    for i in range(3):
        if abs(u.rate_cmd[i]) > params.rate_max:
            active[i] = 0.0
    if u.thrust_cmd < params.thrust_min or u.thrust_cmd > params.thrust_max:
        active[3] = 0.0
    B = B * active[None, :]
    return A, B


def step_with_stages(
    x: np.ndarray, uc: np.ndarray, params: DynamicsParams, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """RK4 update plus the four stage states needed for linearization."""
    k1 = _deriv(x, uc, params.g)
    x2 = x + 0.5 * dt * k1
    k2 = _deriv(x2, uc, params.g)
    x3 = x + 0.5 * dt * k2
    k3 = _deriv(x3, uc, params.g)
    x4 = x + dt * k3
    k4 = _deriv(x4, uc, params.g)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    lim = params.att_limit
    xn[6:8] = np.clip(xn[6:8], -lim, lim)
    return xn, np.stack([x, x2, x3, x4])


def linearize_batch(
    stages: np.ndarray, ucs: np.ndarray, params: DynamicsParams, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Discrete Jacobians for a whole horizon at once.

    stages is (N, 4, 9) from step_with_stages, ucs is (N, 4) clamped inputs.
    Returns A (N, 9, 9) and B (N, 9, 4). The per-stage chain uses the block
    sparsity of the continuous Jacobian throughout.
    """
    N = stages.shape[0]
    att = stages[:, :, 6:9]  # (N, 4, 3)
    cp, sp = np.cos(att[..., 0]), np.sin(att[..., 0])
    ct, st = np.cos(att[..., 1]), np.sin(att[..., 1])
    cy, sy = np.cos(att[..., 2]), np.sin(att[..., 2])
    e3b = np.stack([cy * st * cp + sy * sp, sy * st * cp - cy * sp, ct * cp], axis=-1)
    de3 = np.empty((N, 4, 3, 3))
    de3[..., 0, 0] = -cy * st * sp + sy * cp
    de3[..., 0, 1] = cy * ct * cp
    de3[..., 0, 2] = -sy * st * cp + cy * sp
    de3[..., 1, 0] = -sy * st * sp - cy * cp
    de3[..., 1, 1] = sy * ct * cp
    de3[..., 1, 2] = cy * st * cp + sy * sp
    de3[..., 2, 0] = -ct * sp
    de3[..., 2, 1] = -st * cp
    de3[..., 2, 2] = 0.0
    Tde3 = ucs[:, None, 3, None, None] * de3  # (N, 4, 3, 3)

    eye3 = np.eye(3)
    kx_acc = np.zeros((N, 9, 9))
    ku_acc = np.zeros((N, 9, 4))
    kx_prev = None
    ku_prev = None
    hs = (0.0, 0.5 * dt, 0.5 * dt, dt)
    ws = (1.0, 2.0, 2.0, 1.0)
    for s in range(4):
        h, w = hs[s], ws[s]
        kx = np.zeros((N, 9, 9))
        ku = np.zeros((N, 9, 4))
        if kx_prev is None:
            kx[:, 0:3, 3:6] = eye3
            kx[:, 3:6, 6:9] = Tde3[:, s]
        else:
            kx[:, 0:3, :] = h * kx_prev[:, 3:6, :]
            kx[:, 0:3, 3:6] += eye3
            kx[:, 3:6, :] = np.matmul(Tde3[:, s], h * kx_prev[:, 6:9, :])
            kx[:, 3:6, 6:9] += Tde3[:, s]
            ku[:, 0:3, :] = h * ku_prev[:, 3:6, :]
            ku[:, 3:6, :] = np.matmul(Tde3[:, s], h * ku_prev[:, 6:9, :])
        ku[:, 3:6, 3] += e3b[:, s]
        ku[:, 6:9, 0:3] = eye3
        kx_prev, ku_prev = kx, ku
        kx_acc += w * kx
        ku_acc += w * ku

    A = (dt / 6.0) * kx_acc
    A[:, np.arange(9), np.arange(9)] += 1.0
    B = (dt / 6.0) * ku_acc

    # inputs beyond their bounds carry no sensitivity
    u_lo = np.array([-params.rate_max] * 3 + [params.thrust_min])
    u_hi = np.array([params.rate_max] * 3 + [params.thrust_max])
    beyond = (ucs < u_lo) | (ucs > u_hi)
    if np.any(beyond):
        B[beyond[:, None, :].repeat(9, axis=1)] = 0.0
    return A, B
