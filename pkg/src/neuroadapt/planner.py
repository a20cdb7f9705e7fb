"""Timed-waypoint planner producing prefix-suffix quintic trajectories.

The plan moves from the start point to the first waypoint by the first visit
time ``t_f1`` and then cycles through the waypoints in the requested order,
returning to the first one at ``t_f2``. Waypoints are interpolated exactly.
By default the reference comes to rest at each of them; with
``pass_through`` it crosses them with the velocity and acceleration of a
periodic cubic spline instead, which gives a non-holonomic vehicle a path
without cusps. Either way the prefix/suffix junction and the suffix loop
closure are C2.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import sitl

FORMAT_VERSION = 1


class InfeasibleTiming(ValueError):
    pass


@dataclass(frozen=True)
class Waypoint:
    center: tuple[float, ...]
    radius: float = 0.1
    interval: tuple[float, float] = (0.0, 20.0)


@dataclass(frozen=True)
class VisitTask:
    """Visit ``waypoints`` in ``order``; recurrent tasks repeat forever.

    ``start`` defaults to the first visited waypoint. ``slack`` shrinks the
    cycle period below the tightest deadline window and ``min_segment`` is the
    shortest allowed travel time between consecutive visits. With
    ``pass_through`` (and at least two waypoints) the reference does not stop
    at waypoints and the default start is a lead-in point behind the first
    one.
    """

    waypoints: tuple[Waypoint, ...]
    order: tuple[int, ...] | None = None
    recurrent: bool = True
    start: tuple[float, ...] | None = None
    slack: float = 0.8
    min_segment: float = 0.5
    margin: float = 1.0
    pass_through: bool = False

    def __post_init__(self):
        if not self.waypoints:
            raise ValueError("task needs at least one waypoint")
        order = tuple(range(len(self.waypoints))) if self.order is None else tuple(self.order)
        if sorted(order) != list(range(len(self.waypoints))):
            raise ValueError(f"order {order} is not a permutation of the waypoints")
        object.__setattr__(self, "order", order)
        dims = {len(w.center) for w in self.waypoints}
        if len(dims) != 1:
            raise ValueError("waypoints disagree on dimension")
        for w in self.waypoints:
            sitl.check_interval(*w.interval)
            if math.isinf(w.interval[1]):
                raise ValueError("waypoint deadlines must be finite")

    @property
    def dim(self) -> int:
        return len(self.waypoints[0].center)

    @property
    def smooth(self) -> bool:
        return self.pass_through and len(self.waypoints) >= 2

    def start_point(self) -> np.ndarray:
        if self.start is not None:
            return np.asarray(self.start, dtype=float)
        first = np.asarray(self.waypoints[self.order[0]].center, dtype=float)
        if not self.smooth:
            return first
        times, period = assign_times(self)
        _, v, _ = _loop_spline(self, times, period)
        # distance covered when accelerating evenly from rest to v over t_f1
        return first - v[0] * times[0] / 2

    def formula(self) -> sitl.Formula:
        parts = []
        for w in self.waypoints:
            reach = sitl.Pred(sitl.NormBall(tuple(float(c) for c in w.center), float(w.radius)))
            f = sitl.Eventually(w.interval[0], w.interval[1], reach)
            parts.append(sitl.Always(0.0, sitl.INF, f) if self.recurrent else f)
        return sitl.conjunction(parts)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "waypoints": [
                {"center": list(w.center), "radius": w.radius, "interval": list(w.interval)}
                for w in self.waypoints
            ],
            "order": list(self.order),
            "recurrent": self.recurrent,
            "start": None if self.start is None else list(self.start),
            "slack": self.slack,
            "min_segment": self.min_segment,
            "margin": self.margin,
            "pass_through": self.pass_through,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VisitTask":
        wps = tuple(
            Waypoint(tuple(float(c) for c in w["center"]), float(w.get("radius", 0.1)),
                     tuple(float(v) for v in w.get("interval", (0.0, 20.0))))
            for w in d["waypoints"]
        )
        start = d.get("start")
        return cls(
            waypoints=wps,
            order=tuple(d["order"]) if d.get("order") is not None else None,
            recurrent=bool(d.get("recurrent", True)),
            start=None if start is None else tuple(float(c) for c in start),
            slack=float(d.get("slack", 0.8)),
            min_segment=float(d.get("min_segment", 0.5)),
            margin=float(d.get("margin", 1.0)),
            pass_through=bool(d.get("pass_through", False)),
        )


# ----------------------------------------------------------- polynomials

def quintic_coeffs(p0, v0, a0, p1, v1, a1, duration: float) -> np.ndarray:
    """Coefficients ``c[k]`` (ascending powers of local time) for each axis.

    Returns an array of shape ``(6, dim)``.
    """
    p0, v0, a0, p1, v1, a1 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (p0, v0, a0, p1, v1, a1))
    T = float(duration)
    if T <= 0:
        raise ValueError("segment duration must be positive")
    c0, c1, c2 = p0, v0, a0 / 2.0
    # remaining three coefficients from the end conditions
    A = np.array([[T**3, T**4, T**5],
                  [3 * T**2, 4 * T**3, 5 * T**4],
                  [6 * T, 12 * T**2, 20 * T**3]])
    rhs = np.stack([p1 - (c0 + c1 * T + c2 * T**2),
                    v1 - (c1 + 2 * c2 * T),
                    a1 - 2 * c2])
    c345 = np.linalg.solve(A, rhs)
    return np.vstack([c0, c1, c2, c345])


_D1 = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
_D2 = np.array([2.0, 6.0, 12.0, 20.0])
_POWERS = np.arange(6)


def _poly_eval(coeffs: np.ndarray, tau: np.ndarray):
    """Evaluate position, velocity, acceleration.

    ``coeffs`` has shape ``(..., 6, dim)`` and ``tau`` shape ``(...)``.
    """
    powers = np.asarray(tau, dtype=float)[..., None] ** _POWERS
    pos = np.einsum("...k,...kd->...d", powers, coeffs)
    vel = np.einsum("...k,...kd->...d", powers[..., :5], coeffs[..., 1:, :] * _D1[:, None])
    acc = np.einsum("...k,...kd->...d", powers[..., :4], coeffs[..., 2:, :] * _D2[:, None])
    return pos, vel, acc


def _wrap(t, t_f1, t_f2):
    period = t_f2 - t_f1
    after = t > t_f1
    wrapped = t_f1 + np.mod(t - t_f1, period)
    return np.where(after, wrapped, t)


@dataclass(frozen=True, eq=False)
class PrefixSuffixTrajectory:
    """Piecewise quintic on ``knots``; ``t_f1`` and ``t_f2`` are knots."""

    knots: np.ndarray
    coeffs: np.ndarray  # (segments, 6, dim)
    t_f1: float
    t_f2: float
    dim: int = field(init=False)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 3 or coeffs.shape[1] != 6 or coeffs.shape[0] != knots.size - 1:
            raise ValueError("coeffs must have shape (len(knots)-1, 6, dim)")
        if not (0 < self.t_f1 < self.t_f2):
            raise ValueError("need 0 < t_f1 < t_f2")
        if knots[0] != 0.0 or not np.isclose(knots[-1], self.t_f2) or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must increase from 0 to t_f2")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "dim", coeffs.shape[2])

    @property
    def period(self) -> float:
        return self.t_f2 - self.t_f1

    def wrap(self, t):
        """Map ``t`` onto the first copy of the suffix (identity on the prefix)."""
        return _wrap(np.asarray(t, dtype=float), self.t_f1, self.t_f2)

    def eval(self, t):
        """``(p_d, dp_d, ddp_d)`` at time(s) ``t``; arrays get a trailing ``dim`` axis."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValueError("trajectory is defined for finite t >= 0")
        tw = self.wrap(t)
        seg = np.clip(np.searchsorted(self.knots, tw, side="right") - 1, 0, self.knots.size - 2)
        tau = tw - self.knots[seg]
        return _poly_eval(self.coeffs[seg], tau)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "t_f1": self.t_f1,
            "t_f2": self.t_f2,
            "knots": self.knots.tolist(),
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrefixSuffixTrajectory":
        if d.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported trajectory format {d.get('format_version')}")
        return cls(np.array(d["knots"]), np.array(d["coeffs"]), float(d["t_f1"]), float(d["t_f2"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PrefixSuffixTrajectory":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class TrajectoryBatch:
    """Several trajectories with the same segment count, evaluated together."""

    def __init__(self, trajs: list[PrefixSuffixTrajectory]):
        counts = {tr.coeffs.shape for tr in trajs}
        if len(counts) != 1:
            raise ValueError("batched trajectories need identical segment layouts")
        self.trajs = list(trajs)
        self.knots = np.stack([tr.knots for tr in trajs])
        self.coeffs = np.stack([tr.coeffs for tr in trajs])
        self.t_f1 = np.array([tr.t_f1 for tr in trajs])
        self.t_f2 = np.array([tr.t_f2 for tr in trajs])
        self.dim = trajs[0].dim
        self._rows = np.arange(len(trajs))

    def __len__(self) -> int:
        return len(self.trajs)

    def wrap(self, t: float) -> np.ndarray:
        return _wrap(np.full(len(self), float(t)), self.t_f1, self.t_f2)

    def eval(self, t: float):
        tw = self.wrap(t)
        seg = (tw[:, None] >= self.knots[:, 1:-1]).sum(axis=1)
        tau = tw - self.knots[self._rows, seg]
        return _poly_eval(self.coeffs[self._rows, seg], tau)


# ------------------------------------------------------------------ planner

def assign_times(task: VisitTask) -> tuple[np.ndarray, float]:
    """Visit times for the first cycle and the cycle period.

    Visits are evenly spaced over the period; the first one is placed as late
    as the deadlines allow (less a margin), which leaves the most time for a
    tracking controller to converge before the first check.
    """
    wps = [task.waypoints[i] for i in task.order]
    m = len(wps)
    windows = np.array([w.interval for w in wps])
    if task.recurrent:
        period = task.slack * float(np.min(windows[:, 1] - windows[:, 0]))
    else:
        period = task.slack * float(np.min(windows[:, 1]))
    period = max(period, task.min_segment * m)
    spacing = period / m
    offsets = spacing * np.arange(m)
    lower = max(float(np.max(windows[:, 0] - offsets)), task.min_segment)
    upper = float(np.min(windows[:, 1] - offsets))
    if task.recurrent and period > np.min(windows[:, 1] - windows[:, 0]) + 1e-12:
        raise InfeasibleTiming("deadline windows are shorter than the minimum cycle")
    if upper < lower:
        raise InfeasibleTiming(
            f"no monotone visit schedule: first visit must be in [{lower:g}, {upper:g}]"
        )
    first = max(lower, upper - min(task.margin, 0.5 * (upper - lower)))
    return first + offsets, period


def _loop_spline(task: VisitTask, times: np.ndarray, period: float):
    """Positions, velocities and accelerations at the visits of a closed loop."""
    centers = np.array([task.waypoints[i].center for i in task.order], dtype=float)
    knots = np.append(times, times[0] + period)
    spline = CubicSpline(knots, np.vstack([centers, centers[:1]]), bc_type="periodic")
    return centers, spline(times, 1), spline(times, 2)


def plan(task: VisitTask) -> PrefixSuffixTrajectory:
    times, period = assign_times(task)
    m = len(task.order)
    if task.smooth:
        centers, vel, acc = _loop_spline(task, times, period)
    else:
        centers = np.array([task.waypoints[i].center for i in task.order], dtype=float)
        vel = acc = np.zeros_like(centers)
    start = task.start_point()
    zero = np.zeros(task.dim)
    knots = [0.0, float(times[0])]
    coeffs = [quintic_coeffs(start, zero, zero, centers[0], vel[0], acc[0], times[0])]
    ends = list(times[1:]) + [times[0] + period]
    for k, t_next in enumerate(ends):
        j = (k + 1) % m
        coeffs.append(quintic_coeffs(centers[k], vel[k], acc[k], centers[j], vel[j], acc[j],
                                     t_next - times[k]))
        knots.append(float(t_next))
    return PrefixSuffixTrajectory(np.array(knots), np.stack(coeffs), float(times[0]), float(times[0] + period))


def constant_trajectory(point, t_f1: float = 1.0, t_f2: float = 2.0) -> PrefixSuffixTrajectory:
    point = np.atleast_1d(np.asarray(point, dtype=float))
    c = np.zeros((2, 6, point.size))
    c[:, 0, :] = point
    return PrefixSuffixTrajectory(np.array([0.0, t_f1, t_f2]), c, t_f1, t_f2)
