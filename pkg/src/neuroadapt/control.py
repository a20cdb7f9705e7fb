"""Feedback laws, baselines, the affine-growth diagnostic and pendulum scoring.

All laws are pure functions of arrays with an optional leading batch axis.
The policy classes at the bottom bind a law to a reference, gains and a
network handle so the simulator can call them as ``policy(x, adapt, t)``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

CONTROLLERS = ("proposed", "non-adaptive", "no-nn", "nominal", "open-loop-nn")


@dataclass
class ControlGains:
    """Gains for fully-actuated plants; ``eps`` is the boundary-layer width."""

    k1: float = 1.0
    k2: float = 10.0
    k_l1: float = 10.0
    k_l2: float = 10.0
    eps: float = 1e-3
    l1_init: float = 0.1
    l2_init: float = 0.1
    k_nominal: float = 30.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"gain {f.name} must be positive")


@dataclass
class UnicycleGains:
    """Gains for the unicycle law.

    ``k_v``/``k_w`` are the velocity-error feedback gains, ``rate_v``/``rate_w``
    the adaptation rates of the inertia estimates and ``k_l1``/``k_l2`` those
    of the two bound estimates. ``eps`` is the boundary-layer width of the
    forward channel and ``eps_w`` that of the turning channel (defaults to
    ``eps``). ``e_min`` regularises every ``1/e_d``; near the target the heading
    feedback gain is about ``|pd_dot| / e_min`` and must stay well inside the
    bandwidth of the turning-rate loop, roughly ``(k_w + l1) / m_d``.
    """

    k_d: float = 0.25
    k_beta: float = 1.0
    k_v: float = 10.0
    k_w: float = 10.0
    rate_v: float = 1.0
    rate_w: float = 1.0
    k_l1: float = 10.0
    k_l2: float = 10.0
    eps: float = 1e-3
    eps_w: float | None = None
    e_min: float = 0.05
    beta_max: float = 1.45
    l_init: float = 0.1

    def __post_init__(self):
        if self.eps_w is None:
            self.eps_w = self.eps
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"gain {f.name} must be positive")
        if self.beta_max >= math.pi / 2:
            raise ValueError("beta_max must be below pi/2")


# ------------------------------------------------------------ basic pieces

def boundary_unit(v: np.ndarray, eps: float) -> np.ndarray:
    """``v / max(|v|, eps)`` along the last axis (0 at v = 0)."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def reference_velocity(e, pd_dot, k1: float, pd_ddot=None, edot=None, e_v=None):
    """``v_d = pd_dot - k1 e`` and, when derivative data is given, ``v_d'``.

    ``edot`` defaults to ``e_v - k1 e`` (valid for ``e = x - p_d``).
    """
    e = np.asarray(e, dtype=float)
    v_d = np.asarray(pd_dot, dtype=float) - k1 * e
    if pd_ddot is None:
        return v_d, None
    if edot is None:
        if e_v is None:
            raise ValueError("need edot or e_v to differentiate v_d")
        edot = np.asarray(e_v) - k1 * e
    return v_d, np.asarray(pd_ddot, dtype=float) - k1 * np.asarray(edot)


def adaptive_law(e_v, u_nn, l1, l2, gains: ControlGains):
    """``u = u_nn - (k2 + l1) e_v - l2 e_v/|e_v|`` and the bound-estimate rates."""
    e_v = np.asarray(e_v, dtype=float)
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    unit = boundary_unit(e_v, gains.eps)
    u = np.asarray(u_nn, dtype=float) - (gains.k2 + l1[..., None]) * e_v - l2[..., None] * unit
    norm = np.linalg.norm(e_v, axis=-1)
    return u, gains.k_l1 * norm**2, gains.k_l2 * norm


# ------------------------------------------------------- error references

class TrackingReference:
    """``e = x - p_d`` against a planned trajectory (single or batched)."""

    def __init__(self, traj):
        self.traj = traj

    def clock(self, t):
        return self.traj.wrap(t)

    def desired(self, t):
        return self.traj.eval(t)

    def __call__(self, x, dx, t):
        p_d, pd_dot, pd_ddot = self.traj.eval(t)
        return x - p_d, dx - pd_dot, pd_dot, pd_ddot


class UprightReference:
    """Pendulum error ``e = 1 - cos(q - pi)`` with ``edot = sin(q - pi) dq``."""

    def clock(self, t):
        return np.asarray(t, dtype=float)

    def __call__(self, x, dx, t):
        e = 1.0 - np.cos(x - math.pi)
        edot = np.sin(x - math.pi) * dx
        zero = np.zeros_like(e)
        return e, edot, zero, zero


def tracking_errors(reference, xbar, t, k1: float):
    """``(e, e_v, v_d, vdot_d)`` for a fully-actuated plant."""
    xbar = np.asarray(xbar, dtype=float)
    n = xbar.shape[-1] // 2
    x, dx = xbar[..., :n], xbar[..., n:]
    e, edot, pd_dot, pd_ddot = reference(x, dx, t)
    v_d, vdot_d = reference_velocity(e, pd_dot, k1, pd_ddot, edot=edot)
    return e, dx - v_d, v_d, vdot_d


def adaptive_control(xbar, t, reference, gains: ControlGains, adaptive_state, u_nn_handle=None):
    """Proposed law; returns ``(u, d/dt [l1, l2])``."""
    e, e_v, _, _ = tracking_errors(reference, xbar, t, gains.k1)
    u_nn = np.zeros_like(e_v) if u_nn_handle is None else u_nn_handle(xbar, t)
    adaptive_state = np.asarray(adaptive_state, dtype=float)
    u, dl1, dl2 = adaptive_law(e_v, u_nn, adaptive_state[..., 0], adaptive_state[..., 1], gains)
    return u, np.stack([dl1, dl2], -1)


def baseline_nonadaptive(xbar, t, reference, gains: ControlGains, u_nn_handle=None):
    """``u_c = u_nn - k1 e - k2 edot``."""
    xbar = np.asarray(xbar, dtype=float)
    n = xbar.shape[-1] // 2
    e, edot, _, _ = reference(xbar[..., :n], xbar[..., n:], t)
    u_nn = np.zeros_like(e) if u_nn_handle is None else u_nn_handle(xbar, t)
    return u_nn - gains.k1 * e - gains.k2 * edot


def baseline_no_nn(xbar, t, reference, gains: ControlGains, adaptive_state):
    return adaptive_control(xbar, t, reference, gains, adaptive_state, None)


# ---------------------------------------------------------------- unicycle

def unicycle_errors(p, phi, p_d):
    """``(e1, e2, e_d, beta)`` in signed polar form.

    beta is the angle from the heading to the line through ``-e``, kept in
    (-pi/2, pi/2]; ``e_d`` is negative when the target lies behind the vehicle.
    Both forms satisfy ``e1 = -e_d cos(phi + beta)``, ``e2 = -e_d sin(phi + beta)``,
    so the tracking law is unchanged, and a vehicle that drives straight
    through the target sees a continuous ``(e_d, beta)`` instead of a jump of pi.
    """
    e = np.asarray(p, dtype=float) - np.asarray(p_d, dtype=float)
    e1, e2 = e[..., 0], e[..., 1]
    e_d = np.hypot(e1, e2)
    s, c = np.sin(phi), np.cos(phi)
    beta = np.arctan2(e1 * s - e2 * c, -e1 * c - e2 * s)
    behind = np.abs(beta) > np.pi / 2
    beta = np.where(behind, beta - np.copysign(np.pi, beta), beta)
    e_d = np.where(behind, -e_d, e_d)
    return e1, e2, e_d, beta


@dataclass
class UnicycleReference:
    v_d: np.ndarray
    w_d: np.ndarray
    vdot_d: np.ndarray | None
    wdot_d: np.ndarray | None
    guard: np.ndarray  # True where e_d fell below the floor or beta was clipped


def _floored(e_d, e_min):
    """Signed C1 floor of ``e_d`` and its slope ``d e_f / d e_d``.

    Exact for ``|e_d| >= e_min``; below, ``(e_d**2 + e_min**2) / (2 e_min)``
    with the sign of ``e_d``, so ``|e_f| >= e_min / 2``.
    """
    x = np.abs(e_d)
    near = x < e_min
    sign = np.where(e_d < 0, -1.0, 1.0)
    e_f = sign * np.where(near, (x**2 + e_min**2) / (2 * e_min), x)
    slope = np.where(near, x / e_min, 1.0)
    return e_f, slope, near


def unicycle_reference(e_d, beta, phi, pd_dot, pd_ddot, gains: UnicycleGains, v=None, omega=None):
    """Reference forward and turning rates and, given ``v`` and ``omega``, their derivatives.

    ``e_d`` is the signed distance from :func:`unicycle_errors`. Every division
    by ``e_d`` goes through a C1 floor that is exact above ``e_min``, so the
    law stays smooth as the vehicle closes on the target.
    ``|beta|`` is clipped at ``beta_max`` inside the ``1/cos`` and ``tan`` factors.
    """
    e_d = np.asarray(e_d, dtype=float)
    beta = np.asarray(beta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    pd_dot = np.asarray(pd_dot, dtype=float)
    e_f, slope, near = _floored(e_d, gains.e_min)
    clipped = np.abs(beta) > gains.beta_max
    b = np.clip(beta, -gains.beta_max, gains.beta_max)
    cb, sb = np.cos(b), np.sin(b)
    psi = phi + beta
    c, s = np.cos(psi), np.sin(psi)
    pd1, pd2 = pd_dot[..., 0], pd_dot[..., 1]
    n_v = pd1 * c + pd2 * s + gains.k_d * e_d
    lat = -np.sin(phi) * pd1 + np.cos(phi) * pd2
    v_d = n_v / cb
    w_d = lat / (cb * e_f) + gains.k_d * np.tan(b) + gains.k_beta * beta
    guard = near | clipped
    if v is None or omega is None or pd_ddot is None:
        return UnicycleReference(v_d, w_d, None, None, guard)
    pd_ddot = np.asarray(pd_ddot, dtype=float)
    a1, a2 = pd_ddot[..., 0], pd_ddot[..., 1]
    ed_dot = -v * np.cos(beta) + pd1 * c + pd2 * s
    ef_dot = ed_dot * slope
    psi_dot = (v * np.sin(beta) - pd1 * s + pd2 * c) / e_f
    beta_dot = psi_dot - omega
    bdot = np.where(clipped, 0.0, beta_dot)
    n_v_dot = a1 * c + a2 * s + (-pd1 * s + pd2 * c) * psi_dot + gains.k_d * ed_dot
    vdot_d = n_v_dot / cb + n_v * sb * bdot / cb**2
    cosphi, sinphi = np.cos(phi), np.sin(phi)
    lat_dot = -cosphi * omega * pd1 - sinphi * a1 - sinphi * omega * pd2 + cosphi * a2
    q = cb * e_f
    q_dot = -sb * bdot * e_f + cb * ef_dot
    wdot_d = lat_dot / q - lat * q_dot / q**2 + gains.k_d * bdot / cb**2 + gains.k_beta * beta_dot
    return UnicycleReference(v_d, w_d, vdot_d, wdot_d, guard)


def _scalar_unit(x, eps):
    return x / np.maximum(np.abs(x), eps)


def _wheel_torques(u_s, u_d):
    return np.stack([(u_s + u_d) / 2, (u_s - u_d) / 2], -1)


def _backstep_terms(e_d, beta, gains: UnicycleGains):
    """``(e_d cos beta - beta sin beta / e_d, beta)`` with the floored divisor."""
    e_f, _, _ = _floored(e_d, gains.e_min)
    return e_d * np.cos(beta) - beta * np.sin(beta) / e_f, beta


def unicycle_state_errors(z, t, traj, gains: UnicycleGains, v, omega):
    """Errors and reference rates for a unicycle state ``z``."""
    z = np.asarray(z, dtype=float)
    p_d, pd_dot, pd_ddot = traj.eval(t)
    _, _, e_d, beta = unicycle_errors(z[..., :2], z[..., 2], p_d)
    ref = unicycle_reference(e_d, beta, z[..., 2], pd_dot, pd_ddot, gains, v, omega)
    return e_d, beta, ref


def unicycle_law(e_d, beta, ref: UnicycleReference, v, omega, gains: UnicycleGains, adaptive_state, u_nn):
    """Proposed unicycle law; adaptive state is ``[l_v, l_w, l1, l2]``."""
    a = np.asarray(adaptive_state, dtype=float)
    l_v, l_w, l1, l2 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    e_v = v - ref.v_d
    e_w = omega - ref.w_d
    cross_s, cross_d = _backstep_terms(e_d, beta, gains)
    u_s = l_v * ref.vdot_d - (gains.k_v + l1) * e_v - l2 * _scalar_unit(e_v, gains.eps) + cross_s
    u_d = l_w * ref.wdot_d - (gains.k_w + l1) * e_w - l2 * _scalar_unit(e_w, gains.eps_w) + cross_d
    u = _wheel_torques(u_s, u_d) + np.asarray(u_nn, dtype=float)
    rates = np.stack([
        -gains.rate_v * e_v * ref.vdot_d,
        -gains.rate_w * e_w * ref.wdot_d,
        gains.k_l1 * (e_v**2 + e_w**2),
        gains.k_l2 * (np.abs(e_v) + np.abs(e_w)),
    ], -1)
    return u, rates, e_v, e_w


def unicycle_model_based(e_d, beta, ref: UnicycleReference, v, omega, gains: UnicycleGains,
                         m_s, m_d, u_nn=None):
    """Static-inertia law: the adaptive estimates replaced by ``m_s``, ``m_d``."""
    e_v = v - ref.v_d
    e_w = omega - ref.w_d
    cross_s, cross_d = _backstep_terms(e_d, beta, gains)
    u_s = m_s * ref.vdot_d - gains.k_v * e_v + cross_s
    u_d = m_d * ref.wdot_d - gains.k_w * e_w + cross_d
    u = _wheel_torques(u_s, u_d)
    if u_nn is not None:
        u = u + np.asarray(u_nn, dtype=float)
    return u, e_v, e_w


def unicycle_inertia_estimates(m, I_C, I0, r, R, d_off):
    """Inertias of the forward and turning channels seen by ``u_S``, ``u_D``."""
    rot = (I_C + m * d_off**2) * r**2 / (4 * R**2)
    m1 = m * r**2 / 4 + rot + I0
    m2 = m * r**2 / 4 - rot
    return 2 * (m1 + m2) / r, 2 * R * (m1 - m2) / r


def unicycle_control(z, t, traj, gains: UnicycleGains, adaptive_state, u_nn_handle, plant):
    """Proposed unicycle law evaluated from a plant state.

    Returns ``(u, rates, guard)`` where ``u`` holds ``(u_R, u_L)``.
    """
    v, omega = plant.velocities(z)
    e_d, beta, ref = unicycle_state_errors(z, t, traj, gains, v, omega)
    u_nn = 0.0 if u_nn_handle is None else u_nn_handle(z, t)
    u, rates, _, _ = unicycle_law(e_d, beta, ref, v, omega, gains, adaptive_state, u_nn)
    return u, rates, ref.guard


# ------------------------------------------------------------ diagnostics

@dataclass
class AffineBoundFit:
    """Smallest ``d |xbar| + B`` covering the sampled ``|f + g u_nn|``."""

    d: float
    B: float
    residual: float
    violations: int
    samples: int
    ceiling_exceeded: bool

    def bound(self, norm_x):
        return self.d * np.asarray(norm_x) + self.B


def fit_affine_bound(norm_x, values, ceiling: float = 1e3, tol: float = 1e-9) -> AffineBoundFit:
    """Linear program: minimise ``d mean|x| + B`` s.t. ``d |x_i| + B >= y_i``."""
    norm_x = np.asarray(norm_x, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.all(values <= 0):
        return AffineBoundFit(0.0, 0.0, 0.0, 0, values.size, False)
    a_ub = -np.stack([norm_x, np.ones_like(norm_x)], -1)
    res = linprog([float(np.mean(norm_x)), 1.0], A_ub=a_ub, b_ub=-values,
                  bounds=[(0, None), (0, None)], method="highs")
    if not res.success:
        raise RuntimeError(f"affine bound fit failed: {res.message}")
    d, b = (float(v) for v in res.x)
    excess = values - (d * norm_x + b)
    scale = tol * max(1.0, float(np.max(np.abs(values))))
    return AffineBoundFit(d, b, float(max(0.0, excess.max())), int(np.sum(excess > scale)),
                          values.size, d > ceiling or b > ceiling)


def assumption_diagnostic(plant, u_nn_handle, xbar, t, ceiling: float = 1e3) -> AffineBoundFit:
    """Sampled check of the affine growth bound on the network-driven dynamics.

    Fully-actuated plants use ``|f + g u_nn|``; the unicycle uses
    ``|u_nn + f_theta|``.
    """
    xbar = np.asarray(xbar, dtype=float)
    t = np.asarray(t, dtype=float)
    u = np.zeros((xbar.shape[0], plant.n)) if u_nn_handle is None else np.asarray(u_nn_handle(xbar, t))
    if hasattr(plant, "f_theta"):
        vals = u + plant.f_theta(xbar, t[:, None])
    else:
        g = plant.input_gain(xbar, t[:, None])
        vals = plant.drift(xbar, t[:, None]) + np.einsum("...ij,...j->...i", g, u)
    return fit_affine_bound(np.linalg.norm(xbar, axis=-1), np.linalg.norm(vals, axis=-1), ceiling)


# ---------------------------------------------------------------- pendulum

def pendulum_reward(q, dq, u):
    q, dq, u = (np.asarray(a, dtype=float) for a in (q, dq, u))
    return -np.cos(q) - 0.1 * np.sin(q) - 0.1 * dq - 0.001 * u**2


def pendulum_cost(rewards, H: int = 200, gamma: float = 1.0) -> float:
    """Discounted sum over the final ``H`` rewards, weights ``gamma^1 .. gamma^H``."""
    return float(window_costs(rewards, H, gamma)[-1])


def window_costs(rewards, H: int = 200, gamma: float = 1.0) -> np.ndarray:
    """Cost of every length-``H`` window of a reward sequence."""
    if H < 1:
        raise ValueError("H must be >= 1")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    r = np.asarray(rewards, dtype=float)
    if r.shape[-1] < H:
        raise ValueError(f"need at least {H} rewards, got {r.shape[-1]}")
    w = gamma ** np.arange(1, H + 1)
    windows = np.lib.stride_tricks.sliding_window_view(r, H, axis=-1)
    return windows @ w


# ---------------------------------------------------------------- policies

UnnHandle = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class StepOutput:
    u: np.ndarray
    rates: np.ndarray
    u_nn: np.ndarray
    errors: dict = field(default_factory=dict)


class FullyActuatedPolicy:
    """Closed-loop controller for a fully-actuated plant.

    ``kind`` is one of :data:`CONTROLLERS`; ``nominal`` must be a plant model
    (no disturbance, nominal parameters) for the ``nominal`` kind.
    """

    def __init__(self, kind: str, reference, gains: ControlGains, n: int,
                 u_nn: UnnHandle | None = None, nominal=None):
        if kind not in CONTROLLERS:
            raise ValueError(f"unknown controller {kind!r}")
        if kind in ("non-adaptive", "open-loop-nn") and u_nn is None:
            raise ValueError(f"controller {kind!r} needs a network")
        if kind == "nominal" and nominal is None:
            raise ValueError("nominal controller needs a nominal plant model")
        self.kind, self.reference, self.gains, self.n = kind, reference, gains, n
        self.u_nn, self.nominal = u_nn, nominal

    @property
    def n_adaptive(self) -> int:
        return 2 if self.kind in ("proposed", "no-nn") else 0

    def initial_adaptive(self, batch: int) -> np.ndarray:
        g = self.gains
        return np.tile([g.l1_init, g.l2_init], (batch, 1))[:, : self.n_adaptive]

    def __call__(self, xbar, adapt, t) -> StepOutput:
        g = self.gains
        e, e_v, v_d, vdot_d = tracking_errors(self.reference, xbar, t, g.k1)
        use_nn = self.u_nn is not None and self.kind != "no-nn"
        u_nn = self.u_nn(xbar, t) if use_nn else np.zeros_like(e_v)
        errors = {"e": e, "e_v": e_v}
        if self.kind in ("proposed", "no-nn"):
            u, dl1, dl2 = adaptive_law(e_v, u_nn, adapt[..., 0], adapt[..., 1], g)
            return StepOutput(u, np.stack([dl1, dl2], -1), u_nn, errors)
        empty = np.zeros(np.shape(e)[:-1] + (0,))
        if self.kind == "non-adaptive":
            n = self.n
            _, edot, _, _ = self.reference(xbar[..., :n], xbar[..., n:], t)
            return StepOutput(u_nn - g.k1 * e - g.k2 * edot, empty, u_nn, errors)
        if self.kind == "open-loop-nn":
            return StepOutput(u_nn, empty, u_nn, errors)
        u = computed_torque(self.nominal, xbar, t, e, e_v, vdot_d, g.k_nominal)
        return StepOutput(u, empty, u_nn, errors)


def computed_torque(model, xbar, t, e, e_v, vdot_d, k_n: float):
    """Feedback linearisation on a model: ``xddot = vdot_d - k_n e_v - e``."""
    acc = vdot_d - k_n * e_v - e
    rhs = acc - model.drift(xbar, t)
    return np.linalg.solve(model.input_gain(xbar, t), rhs[..., None])[..., 0]


class UnicyclePolicy:
    """Closed-loop controller for the unicycle.

    ``static`` holds the ``(m_s, m_d)`` inertia estimates used by the
    ``non-adaptive`` and ``nominal`` kinds.
    """

    def __init__(self, kind: str, traj, gains: UnicycleGains, plant,
                 u_nn: UnnHandle | None = None, static=None):
        if kind not in CONTROLLERS:
            raise ValueError(f"unknown controller {kind!r}")
        if kind in ("non-adaptive", "nominal") and static is None:
            raise ValueError(f"controller {kind!r} needs static inertia estimates")
        if kind in ("non-adaptive", "open-loop-nn") and u_nn is None:
            raise ValueError(f"controller {kind!r} needs a network")
        self.kind, self.traj, self.gains, self.plant = kind, traj, gains, plant
        self.u_nn, self.static = u_nn, static
        self.reference = TrackingReference(traj)

    @property
    def n_adaptive(self) -> int:
        return 4 if self.kind in ("proposed", "no-nn") else 0

    def initial_adaptive(self, batch: int) -> np.ndarray:
        return np.full((batch, self.n_adaptive), self.gains.l_init)

    def __call__(self, z, adapt, t) -> StepOutput:
        v, omega = self.plant.velocities(z)
        e_d, beta, ref = unicycle_state_errors(z, t, self.traj, self.gains, v, omega)
        use_nn = self.u_nn is not None and self.kind not in ("no-nn", "nominal")
        u_nn = self.u_nn(z, t) if use_nn else np.zeros(np.shape(z)[:-1] + (2,))
        empty = np.zeros(np.shape(z)[:-1] + (0,))
        if self.kind in ("proposed", "no-nn"):
            u, rates, e_v, e_w = unicycle_law(e_d, beta, ref, v, omega, self.gains, adapt, u_nn)
        elif self.kind == "open-loop-nn":
            u, rates = u_nn, empty
            e_v, e_w = v - ref.v_d, omega - ref.w_d
        else:
            m_s, m_d = self.static
            u, e_v, e_w = unicycle_model_based(e_d, beta, ref, v, omega, self.gains, m_s, m_d,
                                               u_nn if self.kind == "non-adaptive" else None)
            rates = empty
        errors = {"e_d": np.abs(e_d), "beta": beta, "e_v": e_v, "e_w": e_w, "guard": ref.guard}
        return StepOutput(u, rates, u_nn, errors)
