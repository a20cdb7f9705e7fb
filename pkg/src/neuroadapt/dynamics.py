"""Plant models, the additive disturbance model and random problem instances.

Plant parameters may be scalars or arrays with a leading batch axis; every
method broadcasts, so ``stack_plants`` turns a list of instances into one
object that is integrated in lock-step.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import planner

FORMAT_VERSION = 1


class NonFiniteInput(ValueError):
    pass


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("non-finite plant input")


def _p(x):
    """Parameter as an array that broadcasts against ``(..., k)`` operands."""
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim else x


# --------------------------------------------------------------- disturbance

@dataclass(eq=False)
class DisturbanceModel:
    """``d(xbar, t) = A sin(eta t + phase) + gate * A * velocity``.

    ``gate`` holds the {0, 1} diagonal of the velocity-coupling matrix.
    """

    amplitude: np.ndarray
    freq: np.ndarray
    phase: np.ndarray
    gate: np.ndarray

    def __post_init__(self):
        for name in ("amplitude", "freq", "phase", "gate"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @classmethod
    def zero(cls, n: int) -> "DisturbanceModel":
        z = np.zeros(n)
        return cls(z, z.copy(), z.copy(), z.copy())

    def time_part(self, t) -> np.ndarray:
        return self.amplitude * np.sin(self.freq * t + self.phase)

    def state_part(self, velocity) -> np.ndarray:
        return self.gate * self.amplitude * velocity

    def __call__(self, velocity, t) -> np.ndarray:
        return self.time_part(t) + self.state_part(velocity)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("amplitude", "freq", "phase", "gate")}

    @classmethod
    def from_dict(cls, d: dict) -> "DisturbanceModel":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("amplitude", "freq", "phase", "gate")))


# -------------------------------------------------------------------- plants

class SecondOrderPlant:
    """``xddot = f(xbar, t) + g(xbar, t) u`` with ``xbar = [x, xdot]``."""

    n: int
    kind: str

    @property
    def state_dim(self) -> int:
        return 2 * self.n

    def drift(self, xbar, t) -> np.ndarray:
        raise NotImplementedError

    def input_gain(self, xbar, t) -> np.ndarray:
        raise NotImplementedError

    def saturate(self, u):
        return u

    def derivative(self, xbar, u, t, check: bool = True) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        u = np.asarray(u, dtype=float)
        if check:
            _check_finite(xbar, u, t)
        if u.shape[-1] != self.n:
            raise ValueError(f"control has {u.shape[-1]} channels, plant expects {self.n}")
        acc = self.drift(xbar, t) + np.einsum("...ij,...j->...i", self.input_gain(xbar, t), u)
        return np.concatenate([xbar[..., self.n:], acc], axis=-1)

    def position(self, xbar):
        return xbar[..., : self.n]

    def velocity(self, xbar):
        return xbar[..., self.n:]

    def features(self, xbar) -> np.ndarray:
        """Network input features (time excluded)."""
        return xbar


@dataclass(eq=False)
class TwoLinkArm(SecondOrderPlant):
    """Planar two-link arm, joint angles measured from the horizontal.

    Links are uniform rods (centre of mass at mid-length); ``I1``, ``I2`` are
    link inertias about the centre of mass and ``J1``, ``J2`` actuator rotor
    inertias reflected to the joints.
    """

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    I1: float = 1.0 / 48.0
    I2: float = 1.0 / 48.0
    J1: float = 0.05
    J2: float = 0.05
    g0: float = 9.81
    gravity: bool = True
    disturbance: DisturbanceModel = field(default_factory=lambda: DisturbanceModel.zero(2))

    n = 2
    kind = "manipulator"

    def inertia(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        c2 = np.cos(q[..., 1])
        lc1, lc2 = np.asarray(self.l1) / 2, np.asarray(self.l2) / 2
        b11 = self.I1 + self.I2 + self.m1 * lc1**2 + self.m2 * (self.l1**2 + lc2**2 + 2 * self.l1 * lc2 * c2) + self.J1
        b12 = self.I2 + self.m2 * (lc2**2 + self.l1 * lc2 * c2)
        b22 = self.I2 + self.m2 * lc2**2 + self.J2 + 0.0 * c2
        return np.stack([np.stack([b11, b12], -1), np.stack([b12, b22], -1)], -2)

    def coriolis(self, xbar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        q2 = xbar[..., 1]
        dq1, dq2 = xbar[..., 2], xbar[..., 3]
        h = self.m2 * self.l1 * (np.asarray(self.l2) / 2) * np.sin(q2)
        zero = 0.0 * h
        return np.stack([np.stack([-h * dq2, -h * (dq1 + dq2)], -1),
                         np.stack([h * dq1, zero], -1)], -2)

    def gravity_vector(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if not self.gravity:
            return np.zeros(q.shape)
        lc1, lc2 = np.asarray(self.l1) / 2, np.asarray(self.l2) / 2
        c1 = np.cos(q[..., 0])
        c12 = np.cos(q[..., 0] + q[..., 1])
        g2 = self.m2 * lc2 * self.g0 * c12
        g1 = (self.m1 * lc1 + self.m2 * self.l1) * self.g0 * c1 + g2
        return np.stack([g1, g2], -1)

    def input_gain(self, xbar, t=0.0) -> np.ndarray:
        return np.linalg.inv(self.inertia(np.asarray(xbar)[..., :2]))

    def _torque_balance(self, xbar, t):
        """``-C qdot - g(q) + d`` without forming C."""
        q, dq = xbar[..., :2], xbar[..., 2:]
        h = self.m2 * self.l1 * (np.asarray(self.l2) / 2) * np.sin(q[..., 1])
        dq1, dq2 = dq[..., 0], dq[..., 1]
        cor = np.stack([-h * dq2 * (2 * dq1 + dq2), h * dq1**2], -1)
        return -cor - self.gravity_vector(q) + self.disturbance(dq, t)

    def _solve_inertia(self, q, rhs):
        b = self.inertia(q)
        b11, b12, b22 = b[..., 0, 0], b[..., 0, 1], b[..., 1, 1]
        det = b11 * b22 - b12 * b12
        r1, r2 = rhs[..., 0], rhs[..., 1]
        return np.stack([(b22 * r1 - b12 * r2) / det, (b11 * r2 - b12 * r1) / det], -1)

    def drift(self, xbar, t) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        return self._solve_inertia(xbar[..., :2], self._torque_balance(xbar, t))

    def derivative(self, xbar, u, t, check: bool = True) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        u = np.asarray(u, dtype=float)
        if check:
            _check_finite(xbar, u, t)
        if u.shape[-1] != 2:
            raise ValueError(f"control has {u.shape[-1]} channels, plant expects 2")
        acc = self._solve_inertia(xbar[..., :2], u + self._torque_balance(xbar, t))
        return np.concatenate([xbar[..., 2:], acc], axis=-1)

    def kinetic_energy(self, xbar) -> np.ndarray:
        dq = np.asarray(xbar)[..., 2:]
        return 0.5 * np.einsum("...i,...ij,...j->...", dq, self.inertia(np.asarray(xbar)[..., :2]), dq)


@dataclass(eq=False)
class PendulumPlant(SecondOrderPlant):
    """``qddot = (g0/L) sin q + u + d(t)``; q = pi is the upright target."""

    L: float = 1.0
    g0: float = 9.81
    mass: float = 1.0
    u_max: float | None = 15.0
    disturbance: DisturbanceModel = field(default_factory=lambda: DisturbanceModel.zero(1))

    n = 1
    kind = "pendulum"

    def drift(self, xbar, t) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        q = xbar[..., :1]
        return _p(self.g0) / _p(self.L) * np.sin(q) + self.disturbance.time_part(t) + 0.0 * q

    def input_gain(self, xbar, t=0.0) -> np.ndarray:
        shape = np.asarray(xbar).shape[:-1]
        return np.ones(shape + (1, 1))

    def saturate(self, u):
        if self.u_max is None:
            return u
        bound = _p(self.u_max)
        return np.clip(u, -bound, bound)

    def features(self, xbar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        q, dq = xbar[..., 0], xbar[..., 1]
        return np.stack([np.sin(q), np.cos(q), dq], -1)


@dataclass(eq=False)
class UnicyclePlant:
    """Differential-drive unicycle driven by wheel torques.

    State: ``[p1, p2, phi, theta_R, theta_L, dtheta_R, dtheta_L]``. ``R`` is
    the half axle length as it appears in ``omega = r (dR - dL) / (2R)`` and
    ``d_off`` the distance between the axle midpoint and the centre of mass.
    """

    m: float = 28.0
    I_C: float = 0.1
    I0: float = 0.01
    r: float = 0.01
    R: float = 0.1
    d_off: float = 0.01
    disturbance: DisturbanceModel = field(default_factory=lambda: DisturbanceModel.zero(2))

    n = 2
    kind = "unicycle"
    state_dim = 7

    def inertia_entries(self):
        rot = (self.I_C + self.m * self.d_off**2) * self.r**2 / (4 * self.R**2)
        base = self.m * self.r**2 / 4
        return base + rot + self.I0, base - rot

    def inertia(self) -> np.ndarray:
        M1, M2 = (np.asarray(v, dtype=float) for v in self.inertia_entries())
        return np.stack([np.stack([M1, M2], -1), np.stack([M2, M1], -1)], -2)

    def velocities(self, z):
        z = np.asarray(z, dtype=float)
        wr, wl = z[..., 5], z[..., 6]
        v = self.r / 2 * (wr + wl)
        omega = self.r / (2 * self.R) * (wr - wl)
        return v, omega

    def wheel_rates(self, v, omega):
        """Inverse of :meth:`velocities`."""
        return (v + self.R * omega) / self.r, (v - self.R * omega) / self.r

    def position(self, z):
        return np.asarray(z)[..., :2]

    def velocity(self, z):
        """Cartesian velocity of the reference point."""
        z = np.asarray(z)
        v, _ = self.velocities(z)
        return np.stack([v * np.cos(z[..., 2]), v * np.sin(z[..., 2])], -1)

    def f_theta(self, z, t) -> np.ndarray:
        return self.disturbance(np.asarray(z)[..., 5:7], t)

    def saturate(self, u):
        return u

    def derivative(self, z, u, t, check: bool = True) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if check:
            _check_finite(z, u, t)
        if u.shape[-1] != 2:
            raise ValueError("unicycle takes two wheel torques")
        v, omega = self.velocities(z)
        phi = z[..., 2]
        M1, M2 = self.inertia_entries()
        tau = u + self.f_theta(z, t)
        det = M1 * M1 - M2 * M2
        acc_r = (M1 * tau[..., 0] - M2 * tau[..., 1]) / det
        acc_l = (-M2 * tau[..., 0] + M1 * tau[..., 1]) / det
        return np.stack([v * np.cos(phi), v * np.sin(phi), omega,
                         z[..., 5], z[..., 6], acc_r, acc_l], -1)

    def features(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        v, omega = self.velocities(z)
        return np.stack([z[..., 0], z[..., 1], np.cos(z[..., 2]), np.sin(z[..., 2]), v, omega], -1)


def constraint_residual(plant: UnicyclePlant, z) -> np.ndarray:
    dz = plant.derivative(z, np.zeros(np.shape(z)[:-1] + (2,)), 0.0)
    phi = np.asarray(z)[..., 2]
    return dz[..., 0] * np.sin(phi) - dz[..., 1] * np.cos(phi)


def stack_plants(plants: list):
    """One plant object whose parameters carry a leading batch axis."""
    first = plants[0]
    if any(type(p) is not type(first) for p in plants):
        raise ValueError("cannot batch different plant types")
    out = copy.copy(first)
    for f in dataclasses.fields(first):
        vals = [getattr(p, f.name) for p in plants]
        if isinstance(vals[0], DisturbanceModel):
            setattr(out, f.name, DisturbanceModel(*(np.stack([getattr(v, k) for v in vals])
                                                    for k in ("amplitude", "freq", "phase", "gate"))))
        elif isinstance(vals[0], bool) or vals[0] is None:
            if any(v != vals[0] for v in vals):
                raise ValueError(f"field {f.name} differs across the batch")
        else:
            setattr(out, f.name, np.array(vals, dtype=float))
    return out


def min_gain_eigenvalue(plant: SecondOrderPlant, samples: int = 1000, seed: int = 0,
                        scale: float = math.pi) -> float:
    """Smallest eigenvalue of the symmetric part of g over random states."""
    rng = np.random.default_rng(seed)
    xbar = rng.uniform(-scale, scale, size=(samples, plant.state_dim))
    t = rng.uniform(0, 100, size=samples)
    g = np.stack([plant.input_gain(xbar[k], t[k]) for k in range(samples)])
    sym = 0.5 * (g + np.swapaxes(g, -1, -2))
    return float(np.min(np.linalg.eigvalsh(sym)))


def nominal_controller(plant, xbar, t, traj=None, gains=None):
    """Model-based controller on ``plant``, used to produce training data.

    Fully-actuated plants get computed torque with PD feedback on the
    velocity error; the unicycle gets the backstepping law with its
    inertias computed from the plant parameters and no adaptation. ``traj``
    is ``None`` for the pendulum (upright target).
    """
    from . import control

    if isinstance(plant, UnicyclePlant):
        gains = control.UnicycleGains() if gains is None else gains
        v, omega = plant.velocities(xbar)
        e_d, beta, ref = control.unicycle_state_errors(xbar, t, traj, gains, v, omega)
        m_s, m_d = control.unicycle_inertia_estimates(plant.m, plant.I_C, plant.I0, plant.r, plant.R,
                                                      plant.d_off)
        u, _, _ = control.unicycle_model_based(e_d, beta, ref, v, omega, gains, m_s, m_d, None)
        return u
    gains = control.ControlGains() if gains is None else gains
    reference = control.UprightReference() if traj is None else control.TrackingReference(traj)
    e, e_v, _, vdot_d = control.tracking_errors(reference, xbar, t, gains.k1)
    return control.computed_torque(plant, xbar, t, e, e_v, vdot_d, gains.k_nominal)


# -------------------------------------------------------- problem instances

SCENARIOS = ("manipulator", "unicycle", "pendulum")

NOMINAL = {
    "manipulator": {
        "params": {"m1": 1.0, "m2": 1.0, "l1": 0.5, "l2": 0.5, "I1": 1.0 / 48.0, "I2": 1.0 / 48.0,
                   "J1": 0.05, "J2": 0.05, "g0": 9.81},
        "varied": {"m1": 0.5, "m2": 0.5, "I1": 0.5, "I2": 0.5, "J1": 0.5, "J2": 0.5},
        "waypoints": [[-0.5, 0.5], [0.5, 1.0], [1.0, -0.5], [0.0, -1.0]],
        "radius": 0.1,
        "interval": [0.0, 20.0],
        "waypoint_offset": 0.3,
        "deadline_offset": 2.0,
        "init_position_offset": 0.5,
        "init_velocity": [0.0, 1.0],
        "disturbance_scale": [1.0, 1.0],  # amplitude drawn in (0, 2 * scale)
    },
    "unicycle": {
        "params": {"m": 28.0, "I_C": 0.1, "I0": 0.01, "r": 0.01, "R": 0.1, "d_off": 0.01},
        "varied": {"m": 0.5, "I_C": 0.5, "I0": 0.5, "r": 0.5, "d_off": 0.5},
        "waypoints": [[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]],
        "radius": 0.1,
        "interval": [0.0, 20.0],
        "waypoint_offset": 0.3,
        "deadline_offset": 2.0,
        "pass_through": True,
        "init_position_offset": 0.3,
        "init_heading_offset": 0.25,
        "init_wheel_rate": 0.25,
        "disturbance_scale": [0.0025, 0.0025],
    },
    "pendulum": {
        "params": {"L": 1.0, "g0": 9.81, "mass": 1.0, "u_max": 15.0},
        "varied": {"L": 0.5, "mass": 0.5},
        "init_angle": 1.0,
        "init_rate": 1.0,
        "disturbance_amplitude": 0.2,
    },
}


@dataclass
class InstanceSpec:
    """One problem instance: offsets drawn around the nominal scenario."""

    kind: str
    index: int = 0
    seed: int = 0
    split: str = "nominal"
    nominal: dict = field(default_factory=dict)
    param_offsets: dict = field(default_factory=dict)
    waypoint_offsets: list = field(default_factory=list)
    deadline_offsets: list = field(default_factory=list)
    order: list = field(default_factory=list)
    initial_offsets: dict = field(default_factory=dict)
    disturbance: dict | None = None

    def params(self) -> dict:
        p = dict(self.nominal["params"])
        for k, v in self.param_offsets.items():
            p[k] = p[k] + v
        return p

    def plant(self, with_disturbance: bool = True):
        p = self.params()
        dist = DisturbanceModel.from_dict(self.disturbance) if (self.disturbance and with_disturbance) else None
        if self.kind == "manipulator":
            return TwoLinkArm(**p, disturbance=dist or DisturbanceModel.zero(2))
        if self.kind == "unicycle":
            return UnicyclePlant(**p, disturbance=dist or DisturbanceModel.zero(2))
        if self.kind == "pendulum":
            return PendulumPlant(**p, disturbance=dist or DisturbanceModel.zero(1))
        raise ValueError(f"unknown plant kind {self.kind!r}")

    def nominal_plant(self):
        return dataclasses.replace(self, param_offsets={}, disturbance=None).plant()

    def task(self) -> planner.VisitTask | None:
        if self.kind == "pendulum":
            return None
        nom = self.nominal
        centers = np.array(nom["waypoints"], dtype=float)
        if self.waypoint_offsets:
            centers = centers + np.asarray(self.waypoint_offsets)
        a, b = nom["interval"]
        db = self.deadline_offsets or [0.0] * len(centers)
        wps = tuple(planner.Waypoint(tuple(c), nom["radius"], (a, b + d)) for c, d in zip(centers, db))
        order = tuple(self.order) if self.order else None
        return planner.VisitTask(wps, order=order, recurrent=True,
                                 pass_through=bool(nom.get("pass_through", False)))

    def initial_state(self) -> np.ndarray:
        off = self.initial_offsets
        if self.kind == "pendulum":
            return np.array([off.get("q", 0.0), off.get("dq", 0.0)])
        start = self.task().start_point()
        if self.kind == "manipulator":
            return np.concatenate([start + np.asarray(off.get("position", [0.0, 0.0])),
                                   np.asarray(off.get("velocity", [0.0, 0.0]))])
        p = start + np.asarray(off.get("position", [0.0, 0.0]))
        e = p - start
        # heading points at the reference so the initial bearing error is the drawn offset
        heading = math.atan2(-e[1], -e[0]) if np.linalg.norm(e) > 0 else 0.0
        phi = heading + off.get("heading", 0.0)
        wr, wl = off.get("wheel_rates", [0.0, 0.0])
        return np.array([p[0], p[1], phi, 0.0, 0.0, wr, wl])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceSpec":
        d = dict(d)
        d.pop("format_version", None)
        return cls(**d)


def nominal_instance(kind: str) -> InstanceSpec:
    if kind not in NOMINAL:
        raise ValueError(f"unknown scenario {kind!r}; choose from {SCENARIOS}")
    return InstanceSpec(kind=kind, nominal=copy.deepcopy(NOMINAL[kind]))


def _draw_instance(nominal: InstanceSpec, index: int, seed: int, split: str) -> InstanceSpec:
    rng = np.random.default_rng([seed, index])
    nom = nominal.nominal
    params = nom["params"]
    offsets = {k: float(rng.uniform(-frac * params[k], frac * params[k])) for k, frac in nom["varied"].items()}
    spec = InstanceSpec(kind=nominal.kind, index=index, seed=seed, split=split,
                        nominal=copy.deepcopy(nom), param_offsets=offsets)
    if nominal.kind == "pendulum":
        spec.initial_offsets = {"q": float(rng.uniform(-nom["init_angle"], nom["init_angle"])),
                                "dq": float(rng.uniform(-nom["init_rate"], nom["init_rate"]))}
        spec.disturbance = DisturbanceModel(
            amplitude=rng.uniform(0, nom["disturbance_amplitude"], 1),
            freq=rng.uniform(0, 1, 1), phase=rng.uniform(0, 2, 1), gate=np.zeros(1)).to_dict()
        return spec
    k, n = len(nom["waypoints"]), len(nom["waypoints"][0])
    spec.waypoint_offsets = rng.uniform(-nom["waypoint_offset"], nom["waypoint_offset"], (k, n)).tolist()
    spec.deadline_offsets = rng.uniform(-nom["deadline_offset"], nom["deadline_offset"], k).tolist()
    spec.order = [int(i) for i in rng.permutation(k)]
    spec.disturbance = DisturbanceModel(
        amplitude=rng.uniform(0, 2 * np.asarray(nom["disturbance_scale"])),
        freq=rng.uniform(0, 1, n), phase=rng.uniform(0, 2, n),
        gate=rng.integers(0, 2, n).astype(float)).to_dict()
    off = nom["init_position_offset"]
    if nominal.kind == "manipulator":
        lo, hi = nom["init_velocity"]
        spec.initial_offsets = {"position": rng.uniform(-off, off, n).tolist(),
                                "velocity": rng.uniform(lo, hi, n).tolist()}
    else:
        h, w = nom["init_heading_offset"], nom["init_wheel_rate"]
        spec.initial_offsets = {"position": rng.uniform(-off, off, n).tolist(),
                                "heading": float(rng.uniform(-h, h)),
                                "wheel_rates": rng.uniform(-w, w, 2).tolist()}
    return spec


def generate_instances(nominal: InstanceSpec, count: int, seed: int = 0) -> list[InstanceSpec]:
    """Draw ``count`` instances; the first two thirds are training instances."""
    if count < 1:
        raise ValueError("count must be >= 1")
    n_train = (2 * count) // 3
    return [_draw_instance(nominal, i, seed, "train" if i < n_train else "test") for i in range(count)]


def save_instances(instances: list[InstanceSpec], path) -> None:
    with open(path, "w") as fh:
        json.dump({"format_version": FORMAT_VERSION, "instances": [s.to_dict() for s in instances]}, fh, indent=1)


def load_instances(path) -> list[InstanceSpec]:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported instances format {data.get('format_version')}")
    return [InstanceSpec.from_dict(d) for d in data["instances"]]
