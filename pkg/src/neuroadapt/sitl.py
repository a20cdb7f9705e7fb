"""Signal interval temporal logic: formula AST, text parser and a grid monitor.

Grammar (whitespace-insensitive)::

    formula   := conj
    conj      := until ('&' until)*
    until     := unary ('U' interval unary)?
    unary     := '!' unary | 'F' interval unary | 'G' interval unary | atom
    atom      := 'top' | '(' pred ')' | '(' formula ')'
    interval  := '[' number ',' (number | 'inf') ']'
    pred      := 'norm' '(' 'x' '-' vector ')' '<=' number
               | 'dot' '(' vector ',' 'x' ')' ('+' | '-') number '>=' '0'
    vector    := '[' number (',' number)* ']'

``inf`` is only accepted as the right endpoint of a ``G`` that is not nested
inside another temporal operator.

Monitoring quantifies over sample points: "there exists t1 in [t+a, t+b]"
ranges over grid times inside the closed window, and so does "for all t2 in
[t, t1]". A predicate holds at a sample when ``h(y) >= 0``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

INF = math.inf


class SitlError(ValueError):
    """Base class for formula and monitoring errors."""


class SitlSyntaxError(SitlError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class IntervalError(SitlError):
    pass


class HorizonExceeded(SitlError):
    """The formula looks past the end of the recorded signal."""


class DimensionMismatch(SitlError):
    pass


# ---------------------------------------------------------------- predicates

@dataclass(frozen=True)
class NormBall:
    """``||x - center|| <= radius``; h = radius - ||x - center||."""

    center: tuple[float, ...]
    radius: float

    @property
    def dim(self) -> int:
        return len(self.center)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return self.radius - np.linalg.norm(values - np.asarray(self.center), axis=-1)

    def to_text(self) -> str:
        return f"norm(x - {_vec_text(self.center)}) <= {_num_text(self.radius)}"


@dataclass(frozen=True)
class Affine:
    """``dot(weights, x) + offset >= 0``."""

    weights: tuple[float, ...]
    offset: float

    @property
    def dim(self) -> int:
        return len(self.weights)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return values @ np.asarray(self.weights) + self.offset

    def to_text(self) -> str:
        sign = "-" if self.offset < 0 else "+"
        return f"dot({_vec_text(self.weights)}, x) {sign} {_num_text(abs(self.offset))} >= 0"


@dataclass(frozen=True, eq=False)
class Predicate:
    """Arbitrary predicate function; only available programmatically.

    ``h`` must map an ``(N, n)`` array to ``(N,)`` and be total on finite input.
    """

    h: Callable[[np.ndarray], np.ndarray]
    description: str = "h(x) >= 0"
    dim: int | None = None

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self.h(np.asarray(values, dtype=float)), dtype=float)

    def to_text(self) -> str:
        raise SitlError(f"predicate {self.description!r} has no textual form")


PredicateLike = Union[NormBall, Affine, Predicate]


# ---------------------------------------------------------------------- AST

@dataclass(frozen=True)
class Top:
    pass


@dataclass(frozen=True)
class Pred:
    predicate: PredicateLike


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Until:
    left: "Formula"
    right: "Formula"
    a: float
    b: float

    def __post_init__(self):
        check_interval(self.a, self.b)


Formula = Union[Top, Pred, Not, And, Until]


def check_interval(a: float, b: float) -> None:
    if not (math.isfinite(a) and a >= 0):
        raise IntervalError(f"interval start must be finite and >= 0, got {a}")
    if math.isnan(b) or not b > a:
        raise IntervalError(f"interval [{a}, {b}] must satisfy b > a")


def Eventually(a: float, b: float, phi: Formula) -> Until:
    return Until(Top(), phi, a, b)


def Always(a: float, b: float, phi: Formula) -> Not:
    return Not(Eventually(a, b, Not(phi)))


def conjunction(parts: list[Formula]) -> Formula:
    if not parts:
        return Top()
    out = parts[0]
    for p in parts[1:]:
        out = And(out, p)
    return out


def as_eventually(phi: Formula):
    """Return ``(a, b, body)`` if phi is ``F[a,b] body``, else None."""
    if isinstance(phi, Until) and isinstance(phi.left, Top):
        return phi.a, phi.b, phi.right
    return None


def as_always(phi: Formula):
    if isinstance(phi, Not):
        ev = as_eventually(phi.arg)
        if ev is not None and isinstance(ev[2], Not):
            return ev[0], ev[1], ev[2].arg
    return None


def conjuncts(phi: Formula) -> list[Formula]:
    if isinstance(phi, And):
        return conjuncts(phi.left) + conjuncts(phi.right)
    return [phi]


def horizon(phi: Formula) -> float:
    """Look-ahead in seconds needed to decide ``phi`` at a time point.

    Unbounded operators contribute only their lower bound; the monitor
    truncates them to the record instead.
    """
    if isinstance(phi, (Top, Pred)):
        return 0.0
    if isinstance(phi, Not):
        return horizon(phi.arg)
    if isinstance(phi, And):
        return max(horizon(phi.left), horizon(phi.right))
    reach = phi.a if math.isinf(phi.b) else phi.b
    return reach + max(horizon(phi.left), horizon(phi.right))


def predicate_dim(phi: Formula) -> int | None:
    dims = set()

    def walk(node):
        if isinstance(node, Pred):
            d = getattr(node.predicate, "dim", None)
            if d is not None:
                dims.add(d)
        elif isinstance(node, Not):
            walk(node.arg)
        elif isinstance(node, (And, Until)):
            walk(node.left)
            walk(node.right)

    walk(phi)
    if len(dims) > 1:
        raise DimensionMismatch(f"predicates disagree on dimension: {sorted(dims)}")
    return dims.pop() if dims else None


# ------------------------------------------------------------ pretty printer

def _num_text(v: float) -> str:
    if math.isinf(v):
        return "inf"
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def _vec_text(v) -> str:
    return "[" + ",".join(_num_text(x) for x in v) + "]"


def to_text(phi: Formula) -> str:
    """Fully parenthesised text that parses back to an equal AST."""
    if isinstance(phi, Top):
        return "top"
    if isinstance(phi, Pred):
        return "(" + phi.predicate.to_text() + ")"
    g = as_always(phi)
    if g is not None:
        return f"G[{_num_text(g[0])},{_num_text(g[1])}] {to_text(g[2])}"
    if isinstance(phi, Not):
        return "! " + to_text(phi.arg)
    if isinstance(phi, And):
        return f"({to_text(phi.left)} & {to_text(phi.right)})"
    f = as_eventually(phi)
    if f is not None:
        return f"F[{_num_text(f[0])},{_num_text(f[1])}] {to_text(f[2])}"
    return f"({to_text(phi.left)} U[{_num_text(phi.a)},{_num_text(phi.b)}] {to_text(phi.right)})"


# ------------------------------------------------------------------- parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)|(?P<word>[A-Za-z_]+)|(?P<op><=|>=|[!&()\[\],+\-]))"
)


def _tokenize(src: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(src, pos)
        if m is None or m.end() == pos:
            start = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise SitlSyntaxError(f"unexpected character {src[start]!r}", start)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("eof", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str):
        self.tokens = _tokenize(src)
        self.i = 0
        self.temporal_depth = 0
        self.conj_depth = 0

    def peek(self, k: int = 0):
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        tok = self.next()
        if tok[1] != value:
            raise SitlSyntaxError(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok[2])
        return tok

    def number(self, allow_inf: bool = False, signed: bool = False) -> float:
        sign = 1.0
        if signed and self.peek()[1] == "-":
            self.next()
            sign = -1.0
        tok = self.next()
        if tok[0] == "num":
            return sign * float(tok[1])
        if tok[1] == "inf":
            if not allow_inf:
                raise IntervalError(f"'inf' only allowed as the right end of an outermost G (position {tok[2]})")
            return sign * INF
        raise SitlSyntaxError(f"expected a number, found {tok[1] or 'end of input'!r}", tok[2])

    def vector(self) -> tuple[float, ...]:
        self.expect("[")
        vals = [self.number(signed=True)]
        while self.peek()[1] == ",":
            self.next()
            vals.append(self.number(signed=True))
        self.expect("]")
        return tuple(vals)

    def interval(self, allow_inf: bool) -> tuple[float, float]:
        self.expect("[")
        a = self.number()
        self.expect(",")
        b = self.number(allow_inf=allow_inf)
        self.expect("]")
        check_interval(a, b)
        return a, b

    def parse(self) -> Formula:
        phi = self.conj()
        tok = self.peek()
        if tok[0] != "eof":
            raise SitlSyntaxError(f"unexpected {tok[1]!r}", tok[2])
        return phi

    def conj(self) -> Formula:
        left = self.until()
        while self.peek()[1] == "&":
            self.next()
            left = And(left, self.until())
        return left

    def until(self) -> Formula:
        left = self.unary()
        if self.peek()[1] == "U":
            self.next()
            a, b = self.interval(allow_inf=False)
            self.temporal_depth += 1
            right = self.unary()
            self.temporal_depth -= 1
            return Until(left, right, a, b)
        return left

    def unary(self) -> Formula:
        tok = self.peek()
        if tok[1] == "!":
            self.next()
            return Not(self.unary())
        if tok[1] in ("F", "G"):
            self.next()
            a, b = self.interval(allow_inf=(tok[1] == "G" and self.temporal_depth == 0))
            self.temporal_depth += 1
            body = self.unary()
            self.temporal_depth -= 1
            return Eventually(a, b, body) if tok[1] == "F" else Always(a, b, body)
        return self.atom()

    def atom(self) -> Formula:
        tok = self.next()
        if tok[1] in ("top", "true"):
            return Top()
        if tok[1] == "(":
            if self.peek()[1] in ("norm", "dot"):
                pred = self.predicate()
                self.expect(")")
                return Pred(pred)
            phi = self.conj()
            self.expect(")")
            return phi
        raise SitlSyntaxError(f"unexpected {tok[1] or 'end of input'!r}", tok[2])

    def predicate(self) -> PredicateLike:
        kind = self.next()[1]
        if kind == "norm":
            self.expect("(")
            self.expect("x")
            self.expect("-")
            center = self.vector()
            self.expect(")")
            self.expect("<=")
            radius = self.number()
            return NormBall(center, radius)
        self.expect("(")
        weights = self.vector()
        self.expect(",")
        self.expect("x")
        self.expect(")")
        op = self.next()
        if op[1] not in ("+", "-"):
            raise SitlSyntaxError("expected '+' or '-' after dot(...)", op[2])
        offset = self.number() * (1.0 if op[1] == "+" else -1.0)
        self.expect(">=")
        zero = self.next()
        if zero[0] != "num" or float(zero[1]) != 0.0:
            raise SitlSyntaxError("affine predicate must compare against 0", zero[2])
        return Affine(weights, offset)


def parse_formula(src: str) -> Formula:
    return _Parser(src).parse()


# ------------------------------------------------------------------ signals

@dataclass(frozen=True, eq=False)
class SampledSignal:
    times: np.ndarray
    values: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a non-empty 1-D array")
        if values.shape[0] != times.size:
            raise ValueError(f"{values.shape[0]} samples for {times.size} times")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("signal contains non-finite samples")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dim", values.shape[1])

    def __len__(self) -> int:
        return self.times.size


def time_tolerance(times: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.max(np.abs(times))))


# ------------------------------------------------------------------ monitor

@dataclass
class Verdict:
    value: bool
    checked_until: float  # last time inspected by truncated unbounded operators
    truncated: bool

    def __bool__(self) -> bool:
        return self.value


class _GridEval:
    """Bottom-up evaluation of every subformula on every sample point."""

    def __init__(self, y: SampledSignal):
        self.y = y
        self.t = y.times
        self.tol = time_tolerance(y.times)
        self.n = y.times.size
        self.checked_until = float(y.times[-1])
        self.truncated = False
        self._cache: dict[int, np.ndarray] = {}

    def sat(self, phi: Formula) -> np.ndarray:
        key = id(phi)
        if key not in self._cache:
            self._cache[key] = self._sat(phi)
        return self._cache[key]

    def _sat(self, phi: Formula) -> np.ndarray:
        if isinstance(phi, Top):
            return np.ones(self.n, dtype=bool)
        if isinstance(phi, Pred):
            h = phi.predicate(self.y.values)
            return np.asarray(h, dtype=float).reshape(self.n) >= 0.0
        if isinstance(phi, Not):
            return ~self.sat(phi.arg)
        if isinstance(phi, And):
            return self.sat(phi.left) & self.sat(phi.right)
        return self._until(phi)

    def _until(self, phi: Until) -> np.ndarray:
        s1 = self.sat(phi.left)
        s2 = self.sat(phi.right)
        t, tol, n = self.t, self.tol, self.n
        idx = np.arange(n)
        lo = np.searchsorted(t, t + phi.a - tol, side="left")
        if math.isinf(phi.b):
            # truncated to the part of the record where both operands are decidable
            inner = max(horizon(phi.left), horizon(phi.right))
            last = int(np.searchsorted(t, t[-1] - inner + tol, side="right")) - 1
            hi = np.full(n, last)
            self.truncated = True
            self.checked_until = min(self.checked_until, float(t[max(last, 0)]))
        else:
            hi = np.searchsorted(t, t + phi.b + tol, side="right") - 1
        # first index >= i at which the left operand fails
        fail = np.where(~s1, idx, n)
        first_fail = np.minimum.accumulate(fail[::-1])[::-1]
        upper = np.minimum(hi, first_fail - 1)
        csum = np.concatenate([[0], np.cumsum(s2)])
        ok = upper >= lo
        lo_c = np.clip(lo, 0, n)
        up_c = np.clip(upper + 1, 0, n)
        count = csum[up_c] - csum[lo_c]
        return ok & (count > 0)


def _start_index(y: SampledSignal, t: float) -> int:
    tol = time_tolerance(y.times)
    if t < y.times[0] - tol or t > y.times[-1] + tol:
        raise SitlError(f"t={t} outside the record [{y.times[0]}, {y.times[-1]}]")
    return int(np.searchsorted(y.times, t - tol, side="left"))


def check(y: SampledSignal, phi: Formula, t: float = 0.0) -> Verdict:
    """Decide ``(y, t) |= phi`` and report how far unbounded operators looked."""
    dim = predicate_dim(phi)
    if dim is not None and dim != y.dim:
        raise DimensionMismatch(f"formula over R^{dim}, signal in R^{y.dim}")
    i = _start_index(y, t)
    ti = float(y.times[i])
    need = horizon(phi)
    if ti + need > y.times[-1] + time_tolerance(y.times):
        raise HorizonExceeded(
            f"formula needs the record up to t={ti + need:g}, it ends at t={y.times[-1]:g}"
        )
    ev = _GridEval(y)
    value = bool(ev.sat(phi)[i])
    return Verdict(value, ev.checked_until, ev.truncated)


def satisfies(y: SampledSignal, t: float, phi: Formula) -> bool:
    return check(y, phi, t).value


def satisfaction_signal(y: SampledSignal, phi: Formula) -> np.ndarray:
    """Per-sample verdicts; entries whose horizon overruns the record are meaningless."""
    return _GridEval(y).sat(phi)


def sample_trajectory(traj, dt: float, cycles: int) -> SampledSignal:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if cycles < 2:
        raise ValueError("need at least two suffix cycles")
    end = traj.t_f1 + cycles * (traj.t_f2 - traj.t_f1)
    n = int(math.floor(end / dt + 1e-9)) + 1
    times = np.arange(n) * dt
    pos, _, _ = traj.eval(times)
    return SampledSignal(times, pos)


def satisfies_prefix_suffix(traj, phi: Formula, dt: float = 0.01, cycles: int = 3) -> bool:
    return check(sample_trajectory(traj, dt, cycles), phi, 0.0).value


# ---------------------------------------------------------------- witnesses

def explain(y: SampledSignal, phi: Formula) -> list[dict]:
    """Per top-level conjunct: verdict, witness times for F, first violation for G."""
    ev = _GridEval(y)
    t = y.times
    tol = time_tolerance(t)
    report = []
    for part in conjuncts(phi):
        entry = {"formula": _safe_text(part), "value": bool(ev.sat(part)[0])}
        g = as_always(part)
        f = as_eventually(part)
        if g is not None:
            a, b, body = g
            inner = horizon(body)
            last = t[-1] - inner if math.isinf(b) else min(b, t[-1] - inner)
            window = (t >= a - tol) & (t <= last + tol)
            body_sat = ev.sat(body)
            bad = np.nonzero(window & ~body_sat)[0]
            entry["checked_until"] = float(last)
            entry["first_violation"] = float(t[bad[0]]) if bad.size else None
            fb = as_eventually(body)
            if fb is not None:
                hits = ev.sat(fb[2]) & (t <= t[-1] + tol)
                entry["witness_times"] = _episode_starts(t, hits)
        elif f is not None:
            a, b, body = f
            window = (t >= a - tol) & (t <= b + tol)
            hits = np.nonzero(window & ev.sat(body))[0]
            entry["witness_times"] = [float(t[hits[0]])] if hits.size else []
        report.append(entry)
    return report


def _episode_starts(t: np.ndarray, hits: np.ndarray) -> list[float]:
    starts = np.nonzero(hits & ~np.concatenate([[False], hits[:-1]]))[0]
    return [float(t[k]) for k in starts]


def _safe_text(phi: Formula) -> str:
    try:
        return to_text(phi)
    except SitlError:
        return repr(phi)
