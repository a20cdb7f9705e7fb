"""Fixed-step closed-loop simulation and training-data generation.

A run integrates the plant state together with the adaptive estimates using
classical RK4; the controller is evaluated at every stage. Runs are batched:
one call advances every instance of a sweep in lock-step. An instance whose
state leaves the finite range is frozen and reported as failed.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import control, dynamics, planner, sitl
from .control import ControlGains, UnicycleGains
from .dynamics import InstanceSpec
from .mlp import MlpModel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DIVERGENCE_LIMIT = 1e8


class NonFiniteState(RuntimeError):
    def __init__(self, time: float, channel: str, instance: int | None = None):
        where = "" if instance is None else f" (instance {instance})"
        super().__init__(f"state became non-finite at t={time:.6g} in channel {channel}{where}")
        self.time, self.channel, self.instance = time, channel, instance


# --------------------------------------------------------------- integrator

def rk4_step(fun, t: float, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = fun(t, y)
    k2 = fun(t + dt / 2, y + dt / 2 * k1)
    k3 = fun(t + dt / 2, y + dt / 2 * k2)
    k4 = fun(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_ode(fun, y0, dt: float, steps: int, t0: float = 0.0) -> np.ndarray:
    """States at ``t0 + k dt`` for ``k = 0..steps``."""
    y = np.asarray(y0, dtype=float)
    out = [y]
    for k in range(steps):
        y = rk4_step(fun, t0 + k * dt, y, dt)
        out.append(y)
    return np.stack(out)


# ------------------------------------------------------------- run config

SCENARIO_DEFAULTS = {
    # runs extend past the 20 s evaluation time so the monitor can decide the
    # latest deadlines (up to 22 s)
    "manipulator": {"dt": 1e-3, "horizon": 24.0, "eval_time": 20.0, "log_stride": 10, "eps": 0.05},
    "unicycle": {"dt": 1e-3, "horizon": 24.0, "eval_time": 20.0, "log_stride": 10, "eps": 1e-3},
    "pendulum": {"dt": 2e-3, "horizon": 10.0, "eval_time": 10.0, "log_stride": 1, "eps": 0.05},
}


PENDULUM_WINDOW = 200  # H, the reward window of the pendulum benchmark


def default_gains(kind: str):
    eps = SCENARIO_DEFAULTS[kind]["eps"]
    return UnicycleGains(eps=eps) if kind == "unicycle" else ControlGains(eps=eps)


@dataclass
class RunConfig:
    """One closed-loop experiment over one or more instances of a scenario."""

    instances: list[InstanceSpec]
    controller: str = "proposed"
    gains: ControlGains | UnicycleGains | None = None
    dt: float | None = None
    horizon: float | None = None
    model: MlpModel | None = None
    log_stride: int | None = None
    seed: int = 0
    trajectories: list | None = None

    def __post_init__(self):
        if isinstance(self.instances, InstanceSpec):
            self.instances = [self.instances]
        if not self.instances:
            raise ValueError("a run needs at least one instance")
        kinds = {s.kind for s in self.instances}
        if len(kinds) != 1:
            raise ValueError("all instances of a run must share a scenario")
        if self.controller not in control.CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")
        d = SCENARIO_DEFAULTS[self.kind]
        self.dt = d["dt"] if self.dt is None else float(self.dt)
        self.horizon = d["horizon"] if self.horizon is None else float(self.horizon)
        self.log_stride = d["log_stride"] if self.log_stride is None else int(self.log_stride)
        if self.gains is None:
            self.gains = default_gains(self.kind)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least one step")
        if self.log_stride < 1:
            raise ValueError("log stride must be >= 1")
        if self.controller in ("non-adaptive", "open-loop-nn") and self.model is None:
            raise ValueError(f"controller {self.controller!r} needs a trained model")

    @property
    def kind(self) -> str:
        return self.instances[0].kind

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


# ------------------------------------------------------------ closed loop

def network_handle(model: MlpModel, plant, reference):
    """``u_nn(xbar, t)`` from network features ``[features(xbar), clock(t)]``.

    Inputs are clamped to the box the network was trained on: outside it a
    ReLU network extrapolates linearly and its output is meaningless.
    """
    scaler = getattr(model, "in_scaler", None)

    def handle(xbar, t):
        feats = plant.features(xbar)
        clock = np.broadcast_to(reference.clock(t), feats.shape[:-1])[..., None]
        inputs = np.concatenate([feats, clock], axis=-1)
        if scaler is not None:
            inputs = np.clip(inputs, scaler.low, scaler.high)
        return model.predict(inputs)

    return handle


def unicycle_static_estimates(instance: InstanceSpec, scale: float = 1.0):
    p = {k: v * scale for k, v in instance.nominal["params"].items()}
    return control.unicycle_inertia_estimates(p["m"], p["I_C"], p["I0"], p["r"], p["R"], p["d_off"])


@dataclass
class ClosedLoop:
    kind: str
    plant: object
    policy: object
    reference: object
    trajectories: list | None
    x0: np.ndarray

    @property
    def nx(self) -> int:
        return self.x0.shape[-1]


def build_closed_loop(config: RunConfig) -> ClosedLoop:
    insts = config.instances
    kind = config.kind
    plant = dynamics.stack_plants([s.plant() for s in insts])
    x0 = np.stack([s.initial_state() for s in insts])
    trajs = config.trajectories
    if kind == "pendulum":
        reference = control.UprightReference()
        traj_batch = None
    else:
        if trajs is None:
            trajs = [planner.plan(s.task()) for s in insts]
        traj_batch = planner.TrajectoryBatch(trajs)
        reference = control.TrackingReference(traj_batch)
    u_nn = network_handle(config.model, plant, reference) if config.model is not None else None
    g = config.gains
    if kind == "unicycle":
        static = None
        if config.controller == "non-adaptive":
            static = unicycle_static_estimates(insts[0], 1.25)
        elif config.controller == "nominal":
            static = unicycle_static_estimates(insts[0])
        policy = control.UnicyclePolicy(config.controller, traj_batch, g, plant, u_nn, static)
    else:
        nominal = dynamics.stack_plants([s.nominal_plant() for s in insts])
        policy = control.FullyActuatedPolicy(config.controller, reference, g, plant.n, u_nn, nominal)
    return ClosedLoop(kind, plant, policy, reference, trajs, x0)


# ------------------------------------------------------------------ logs

@dataclass
class RunLog:
    """Decimated time histories of a batched run, indexed ``[instance, time]``."""

    kind: str
    controller: str
    instance_ids: list[int]
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_nn: np.ndarray
    adaptive: np.ndarray
    errors: dict[str, np.ndarray]
    reward: np.ndarray | None
    failed: np.ndarray
    fail_time: np.ndarray
    guard_trips: np.ndarray
    dt: float
    formulas: list | None = field(default=None, repr=False)

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    def position(self) -> np.ndarray:
        n = 2 if self.kind != "pendulum" else 1
        return self.x[..., :n]

    def error_norm(self) -> np.ndarray:
        """``|e| + |edot|`` (fully actuated) or ``e_d`` (unicycle) per sample."""
        if self.kind == "unicycle":
            return self.errors["e_d"]
        return np.linalg.norm(self.errors["e"], axis=-1) + np.linalg.norm(self.errors["edot"], axis=-1)

    def index_at(self, time: float) -> int:
        """Index of the logged sample closest to ``time``."""
        return int(np.argmin(np.abs(self.t - time)))

    def signal(self, i: int) -> sitl.SampledSignal:
        return sitl.SampledSignal(self.t, self.position()[i])

    def monitor(self, i: int) -> bool | None:
        if not self.formulas or self.formulas[i] is None or self.failed[i]:
            return None if not self.formulas else False
        return bool(sitl.check(self.signal(i), self.formulas[i]).value)

    def columns(self) -> list[str]:
        cols = ["t"] + [f"x{j}" for j in range(self.x.shape[-1])]
        cols += [f"u{j}" for j in range(self.u.shape[-1])] + [f"u_nn{j}" for j in range(self.u_nn.shape[-1])]
        cols += [f"l{j}" for j in range(self.adaptive.shape[-1])]
        for name, arr in self.errors.items():
            width = 1 if arr.ndim == 2 else arr.shape[-1]
            cols += [name] if width == 1 and arr.ndim == 2 else [f"{name}{j}" for j in range(width)]
        if self.reward is not None:
            cols.append("reward")
        return cols

    def rows(self, i: int) -> np.ndarray:
        parts = [self.t[:, None], self.x[i], self.u[i], self.u_nn[i], self.adaptive[i]]
        for arr in self.errors.values():
            a = arr[i]
            parts.append(a[:, None] if a.ndim == 1 else a)
        if self.reward is not None:
            parts.append(self.reward[i][:, None])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts], axis=1)

    def write_csv(self, path, i: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for row in self.rows(i):
                w.writerow([repr(float(v)) for v in row])

    def summary(self, i: int, eval_time: float | None = None) -> dict:
        err = self.error_norm()[i]
        k = self.index_at(SCENARIO_DEFAULTS[self.kind]["eval_time"] if eval_time is None else eval_time)
        out = {
            "instance": int(self.instance_ids[i]),
            "controller": self.controller,
            "failed": bool(self.failed[i]),
            "fail_time": None if not self.failed[i] else float(self.fail_time[i]),
            "initial_error": float(err[0]),
            "final_error": float(err[-1]),
            "eval_time": float(self.t[k]),
            "eval_error": float(err[k]),
            "sup_error": float(np.max(err)),
            "sup_u": float(np.max(np.linalg.norm(self.u[i], axis=-1))),
            "guard_trips": int(self.guard_trips[i]),
            "satisfied": self.monitor(i),
        }
        if self.kind == "unicycle":
            out["initial_beta"] = float(abs(self.errors["beta"][i, 0]))
            out["final_beta"] = float(abs(self.errors["beta"][i, -1]))
            out["eval_beta"] = float(abs(self.errors["beta"][i, k]))
        if self.adaptive.shape[-1]:
            out["final_adaptive"] = self.adaptive[i, -1].tolist()
        if self.reward is not None:
            out["mean_reward"] = float(np.mean(self.reward[i]))
            out["steady_reward"] = float(np.mean(self.reward[i, -PENDULUM_WINDOW:]))
            out["window_cost"] = control.pendulum_cost(self.reward[i], PENDULUM_WINDOW)
        return out

    def write_summary(self, path, i: int = 0) -> None:
        with open(path, "w") as fh:
            json.dump({"format_version": FORMAT_VERSION, **self.summary(i)}, fh, indent=1)


# ---------------------------------------------------------------- integrate

def _error_channels(kind: str, loop: ClosedLoop, x, t, errs: dict) -> dict:
    out = dict(errs)
    if kind != "unicycle":
        n = x.shape[-1] // 2
        _, edot, _, _ = loop.reference(x[..., :n], x[..., n:], t)
        out["edot"] = edot
    return {k: np.asarray(v, dtype=float) for k, v in out.items() if k != "guard"}


def integrate(config: RunConfig, raise_on_failure: bool | None = None) -> RunLog:
    """Run the closed loop of ``config``.

    Single-instance runs raise :class:`NonFiniteState` on divergence; batched
    runs record the failure and freeze the instance unless
    ``raise_on_failure`` is set.
    """
    if raise_on_failure is None:
        raise_on_failure = len(config.instances) == 1
    loop = build_closed_loop(config)
    plant, policy, kind = loop.plant, loop.policy, loop.kind
    batch, nx = loop.x0.shape
    dt, steps, stride = config.dt, config.steps, config.log_stride
    y = np.concatenate([loop.x0, policy.initial_adaptive(batch)], axis=1)
    alive = np.ones(batch, dtype=bool)
    fail_time = np.full(batch, np.nan)
    guard_trips = np.zeros(batch, dtype=int)

    def rhs(t, y):
        out = policy(y[:, :nx], y[:, nx:], t)
        u = plant.saturate(out.u)
        # non-finite rows propagate to the step result, where they are caught
        dx = plant.derivative(y[:, :nx], u, t, check=False)
        return np.concatenate([dx, out.rates], axis=1)

    records = {"t": [], "x": [], "u": [], "u_nn": [], "a": [], "err": []}

    def record(t, y, out):
        records["t"].append(t)
        records["x"].append(y[:, :nx].copy())
        records["u"].append(plant.saturate(out.u))
        records["u_nn"].append(np.asarray(out.u_nn, dtype=float).reshape(batch, -1))
        records["a"].append(y[:, nx:].copy())
        records["err"].append(_error_channels(kind, loop, y[:, :nx], t, out.errors))

    with np.errstate(all="ignore"):
        for k in range(steps + 1):
            t = k * dt
            out = policy(y[:, :nx], y[:, nx:], t)
            if "guard" in out.errors:
                guard_trips += np.asarray(out.errors["guard"], dtype=bool) & alive
            if k % stride == 0 or k == steps:
                record(t, y, out)
            if k == steps:
                break
            y_new = rk4_step(rhs, t, y, dt)
            bad = ~np.all(np.isfinite(y_new), axis=1) | (np.max(np.abs(y_new), axis=1, initial=0) > DIVERGENCE_LIMIT)
            bad &= alive
            if np.any(bad):
                i = int(np.flatnonzero(bad)[0])
                row = y_new[i]
                j = int(np.flatnonzero(~np.isfinite(row) | (np.abs(row) > DIVERGENCE_LIMIT))[0])
                channel = f"x{j}" if j < nx else f"l{j - nx}"
                if raise_on_failure:
                    raise NonFiniteState(t + dt, channel, config.instances[i].index)
                log.warning("instance %d diverged at t=%.4g (%s)", config.instances[i].index, t + dt, channel)
                alive &= ~bad
                fail_time[bad] = t + dt
            y = np.where(alive[:, None], y_new, y)

    err_keys = records["err"][0].keys()
    errors = {key: np.stack([e[key] for e in records["err"]], axis=1) for key in err_keys}
    x = np.stack(records["x"], axis=1)
    u = np.stack(records["u"], axis=1)
    reward = None
    if kind == "pendulum":
        reward = control.pendulum_reward(x[..., 0], x[..., 1], u[..., 0])
    formulas = None
    if kind != "pendulum":
        formulas = [s.task().formula() for s in config.instances]
    return RunLog(kind, config.controller, [s.index for s in config.instances], np.array(records["t"]),
                  x, u, np.stack(records["u_nn"], axis=1), np.stack(records["a"], axis=1), errors,
                  reward, ~alive, fail_time, guard_trips, dt, formulas)


# ----------------------------------------------------------- training data

TrainingSet = dict  # keys: trajectory_id, t, t_clock, x, u


def generate_training_data(instances: list[InstanceSpec], kappa: int = 3, points_per_traj: int = 500,
                           dt: float | None = None, gains=None) -> TrainingSet:
    """Run the nominal model-based controller on every training instance.

    Each run covers the prefix plus ``kappa`` suffix cycles (the scenario
    horizon for the pendulum) and is subsampled uniformly to
    ``points_per_traj`` triplets.
    """
    if kappa < 3:
        raise ValueError("kappa must be >= 3")
    if not instances:
        raise ValueError("no training instances")
    kind = instances[0].kind
    trajs = None
    if kind == "pendulum":
        horizon = SCENARIO_DEFAULTS[kind]["horizon"]
    else:
        trajs = [planner.plan(s.task()) for s in instances]
        horizon = kappa * max(tr.t_f2 for tr in trajs) + 1.0
    cfg = RunConfig(list(instances), controller="nominal", dt=dt, horizon=horizon, log_stride=1,
                    gains=gains, trajectories=trajs)
    run = integrate(cfg, raise_on_failure=True)
    idx = np.unique(np.round(np.linspace(0, run.t.size - 1, points_per_traj)).astype(int))
    t = run.t[idx]
    ids, times, clocks, xs, us = [], [], [], [], []
    for i, spec in enumerate(instances):
        clock = t if trajs is None else trajs[i].wrap(t)
        ids.append(np.full(t.size, spec.index))
        times.append(t)
        clocks.append(np.asarray(clock, dtype=float))
        xs.append(run.x[i, idx])
        us.append(run.u[i, idx])
    return {"kind": kind, "trajectory_id": np.concatenate(ids), "t": np.concatenate(times),
            "t_clock": np.concatenate(clocks), "x": np.concatenate(xs), "u": np.concatenate(us),
            "horizon": float(run.t[-1])}


def training_arrays(data: TrainingSet):
    """Network inputs ``[features(x), t_clock]`` and targets ``u``."""
    plant = dynamics.nominal_instance(data["kind"]).plant()
    feats = plant.features(data["x"])
    return np.concatenate([feats, data["t_clock"][:, None]], axis=1), data["u"]


def write_training_csv(data: TrainingSet, path) -> None:
    nx, nu = data["x"].shape[1], data["u"].shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(f"# kind={data['kind']} format_version={FORMAT_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "t", "t_clock"] + [f"x{j}" for j in range(nx)] + [f"u{j}" for j in range(nu)])
        for k in range(data["t"].size):
            w.writerow([int(data["trajectory_id"][k]), repr(float(data["t"][k])), repr(float(data["t_clock"][k]))]
                       + [repr(float(v)) for v in data["x"][k]] + [repr(float(v)) for v in data["u"][k]])


def read_training_csv(path) -> TrainingSet:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# kind="):
            raise ValueError("training CSV lacks its header line")
        meta = dict(item.split("=") for item in header[2:].split())
        if int(meta.get("format_version", -1)) != FORMAT_VERSION:
            raise ValueError("unsupported training CSV version")
        cols = next(csv.reader([fh.readline()]))
        raw = np.loadtxt(fh, delimiter=",", ndmin=2)
    xcols = [j for j, c in enumerate(cols) if c.startswith("x")]
    ucols = [j for j, c in enumerate(cols) if c.startswith("u")]
    return {"kind": meta["kind"], "trajectory_id": raw[:, 0].astype(int), "t": raw[:, 1],
            "t_clock": raw[:, 2], "x": raw[:, xcols], "u": raw[:, ucols]}
