"""Independent reference implementations used as test oracles.

The SITL oracle evaluates the recursive semantics directly with explicit
loops over sample points. It shares nothing with the vectorised monitor
except the AST types. Random cases use times and interval endpoints that
are multiples of 0.5 so window boundaries compare exactly.
"""

import math

import numpy as np

from neuroadapt import sitl


def brute_sat(times, values, phi, i):
    """Truth of ``phi`` at sample ``i`` by direct recursion."""
    if isinstance(phi, sitl.Top):
        return True
    if isinstance(phi, sitl.Pred):
        return float(phi.predicate(values[i:i + 1])[0]) >= 0.0
    if isinstance(phi, sitl.Not):
        return not brute_sat(times, values, phi.arg, i)
    if isinstance(phi, sitl.And):
        return brute_sat(times, values, phi.left, i) and brute_sat(times, values, phi.right, i)
    t = times[i]
    for j in range(i, len(times)):
        if not (t + phi.a <= times[j] <= t + phi.b):
            continue
        if not brute_sat(times, values, phi.right, j):
            continue
        if all(brute_sat(times, values, phi.left, k) for k in range(i, j + 1)):
            return True
    return False


def random_signal(rng, n=20, dim=1):
    steps = rng.integers(1, 3, n - 1) * 0.5
    times = np.concatenate([[0.0], np.cumsum(steps)])
    values = rng.uniform(-1.0, 1.0, (n, dim))
    return times, values


def random_predicate(rng, dim=1):
    vec = tuple(float(c) for c in rng.uniform(-1, 1, dim).round(2))
    if rng.random() < 0.5:
        return sitl.Pred(sitl.NormBall(vec, round(float(rng.uniform(0.2, 1.2)), 2)))
    return sitl.Pred(sitl.Affine(vec, round(float(rng.uniform(-0.5, 0.5)), 2)))


def random_interval(rng):
    a = 0.5 * int(rng.integers(0, 5))
    return a, a + 0.5 * int(rng.integers(1, 7))


def random_formula(rng, depth=3, dim=1):
    """Random formula with at most ``depth`` nested operators."""
    if depth == 0 or rng.random() < 0.2:
        return sitl.Top() if rng.random() < 0.1 else random_predicate(rng, dim)
    op = rng.integers(0, 5)
    sub = lambda: random_formula(rng, depth - 1, dim)  # noqa: E731
    if op == 0:
        return sitl.Not(sub())
    if op == 1:
        return sitl.And(sub(), sub())
    a, b = random_interval(rng)
    if op == 2:
        return sitl.Until(sub(), sub(), a, b)
    if op == 3:
        return sitl.Eventually(a, b, sub())
    return sitl.Always(a, b, sub())


def decidable(times, phi, i=0):
    return times[i] + sitl.horizon(phi) <= times[-1]


def random_case(rng, depth=3, n=20):
    """A (times, values, formula) triple whose horizon fits the record."""
    while True:
        times, values = random_signal(rng, n)
        phi = random_formula(rng, depth)
        if decidable(times, phi) and math.isfinite(sitl.horizon(phi)):
            return times, values, phi
