import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroadapt import sitl
from neuroadapt.planner import constant_trajectory

from oracles import brute_sat, decidable, random_case, random_formula, random_signal

seeds = st.integers(0, 2**32 - 1)


def signal(times, values):
    return sitl.SampledSignal(np.asarray(times, float), np.asarray(values, float))


def zeros(n=11, dim=2, end=10.0):
    return signal(np.linspace(0, end, n), np.zeros((n, dim)))


# ------------------------------------------------------------------ parser

def test_parse_recurrent_visit():
    phi = sitl.parse_formula("G[0,inf] F[0,20] (norm(x - [0,0]) <= 0.1)")
    g = sitl.as_always(phi)
    assert g is not None and g[0] == 0 and math.isinf(g[1])
    f = sitl.as_eventually(g[2])
    assert f[:2] == (0, 20)
    assert f[2] == sitl.Pred(sitl.NormBall((0.0, 0.0), 0.1))


def test_parse_top():
    assert sitl.parse_formula("top") == sitl.Top()


def test_reversed_interval_is_an_interval_error():
    with pytest.raises(sitl.IntervalError):
        sitl.parse_formula("F[2,1] top")


@pytest.mark.parametrize("src", ["F[-1,2] top", "F[1,1] top"])
def test_bad_intervals(src):
    with pytest.raises(sitl.SitlError):
        sitl.parse_formula(src)


@pytest.mark.parametrize("src,pos", [("F[0,1] top )", 11), ("top & ", 6), ("(norm(x - [0]) <= )", 18)])
def test_syntax_error_reports_position(src, pos):
    with pytest.raises(sitl.SitlSyntaxError) as info:
        sitl.parse_formula(src)
    assert info.value.position == pos


@pytest.mark.parametrize("src", ["F[0,inf] top", "G[0,1] G[0,inf] top", "top U[0,inf] top"])
def test_inf_only_under_outermost_always(src):
    with pytest.raises(sitl.IntervalError):
        sitl.parse_formula(src)


def test_affine_predicate_and_conjunction():
    phi = sitl.parse_formula("(dot([1,-2], x) - 0.5 >= 0) & ! (norm(x - [1,1]) <= 2)")
    left, right = sitl.conjuncts(phi)
    assert left == sitl.Pred(sitl.Affine((1.0, -2.0), -0.5))
    assert right == sitl.Not(sitl.Pred(sitl.NormBall((1.0, 1.0), 2.0)))


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_pretty_print_round_trip(seed):
    rng = np.random.default_rng(seed)
    phi = random_formula(rng, depth=3, dim=2)
    assert sitl.parse_formula(sitl.to_text(phi)) == phi


def test_programmatic_predicate_has_no_text():
    phi = sitl.Pred(sitl.Predicate(lambda x: x[:, 0], "x0 >= 0"))
    with pytest.raises(sitl.SitlError):
        sitl.to_text(phi)


# ----------------------------------------------------------------- signals

@pytest.mark.parametrize("times,values", [
    ([], []),
    ([0.0, 0.0], [1.0, 2.0]),
    ([0.0, 1.0], [1.0]),
    ([0.0, 1.0], [1.0, np.nan]),
])
def test_signal_invariants(times, values):
    with pytest.raises(ValueError):
        signal(times, values)


# ----------------------------------------------------------------- monitor

def test_zero_signal_inside_unit_ball():
    h = sitl.Pred(sitl.Predicate(lambda x: 1 - np.linalg.norm(x, axis=1)))
    assert sitl.satisfies(zeros(), 0.0, h)


def test_always_of_negative_predicate_fails():
    h = sitl.Pred(sitl.Predicate(lambda x: -np.ones(len(x))))
    assert not sitl.satisfies(zeros(), 0.0, sitl.Always(0, 5, h))


def test_horizon_exceeded_is_not_false():
    with pytest.raises(sitl.HorizonExceeded):
        sitl.check(zeros(end=10.0), sitl.parse_formula("F[0,20] top"))
    with pytest.raises(sitl.HorizonExceeded):
        sitl.check(zeros(end=10.0), sitl.parse_formula("F[0,4] top"), t=8.0)


def test_dimension_mismatch():
    with pytest.raises(sitl.DimensionMismatch):
        sitl.check(zeros(dim=2), sitl.parse_formula("(norm(x - [0,0,0]) <= 1)"))


def test_start_time_outside_record():
    with pytest.raises(sitl.SitlError):
        sitl.check(zeros(), sitl.Top(), t=11.0)


def test_until_requires_left_operand_up_to_witness():
    times = np.arange(6.0)
    x = np.array([1, 1, 1, -1, -1, 5.0])[:, None]
    pos = sitl.Pred(sitl.Affine((1.0,), 0.0))
    big = sitl.Pred(sitl.Affine((1.0,), -4.0))
    y = signal(times, x)
    assert not sitl.satisfies(y, 0.0, sitl.Until(pos, big, 0, 5))
    x[3:5] = 2.0
    assert sitl.satisfies(signal(times, x), 0.0, sitl.Until(pos, big, 0, 5))
    # window excludes the only witness
    assert not sitl.satisfies(signal(times, x), 0.0, sitl.Until(pos, big, 0, 4.5))


def test_unbounded_always_truncates_and_reports():
    y = zeros(n=101, end=10.0)
    v = sitl.check(y, sitl.parse_formula("G[0,inf] F[0,2] (norm(x - [0,0]) <= 0.1)"))
    assert v.value and v.truncated
    assert v.checked_until == pytest.approx(8.0)


def test_explain_reports_witnesses_and_violation():
    times = np.arange(0, 10.5, 0.5)
    x = np.where((times >= 3) & (times < 4), 0.0, 1.0)[:, None]
    y = signal(times, x)
    phi = sitl.parse_formula("F[0,5] (norm(x - [0]) <= 0.1) & G[0,inf] (norm(x - [1]) <= 0.1)")
    f, g = sitl.explain(y, phi)
    assert f["value"] and f["witness_times"] == [3.0]
    assert not g["value"] and g["first_violation"] == 3.0 and g["checked_until"] == 10.0


def test_prefix_suffix_constant_trajectory():
    traj = constant_trajectory([0.0, 0.0])
    assert sitl.satisfies_prefix_suffix(traj, sitl.parse_formula("F[0,20] (norm(x - [0,0]) <= 0.1)"), cycles=30)
    assert not sitl.satisfies_prefix_suffix(traj, sitl.parse_formula("F[0,20] (norm(x - [0.3,0]) <= 0.1)"),
                                            cycles=30)


def test_prefix_suffix_needs_two_cycles():
    with pytest.raises(ValueError):
        sitl.satisfies_prefix_suffix(constant_trajectory([0.0]), sitl.Top(), cycles=1)


# --------------------------------------------------------- oracle agreement

def test_oracle_equivalence_1000_pairs():
    rng = np.random.default_rng(2024)
    cases = [random_case(rng) for _ in range(1000)]
    start = time.perf_counter()
    got = [sitl.satisfies(signal(t, v), 0.0, phi) for t, v, phi in cases]
    elapsed = time.perf_counter() - start
    want = [brute_sat(t, v, phi, 0) for t, v, phi in cases]
    assert got == want
    assert elapsed < 10.0
    # both verdicts occur, so agreement is not vacuous
    assert 100 < sum(want) < 900


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_satisfaction_signal_matches_oracle_at_every_decidable_sample(seed):
    rng = np.random.default_rng(seed)
    times, values, phi = random_case(rng, n=15)
    sat = sitl.satisfaction_signal(signal(times, values), phi)
    for i in range(len(times)):
        if decidable(times, phi, i):
            assert sat[i] == brute_sat(times, values, phi, i)


# -------------------------------------------------------------- properties

@settings(max_examples=200, deadline=None)
@given(seeds)
def test_desugaring_identities(seed):
    rng = np.random.default_rng(seed)
    times, values, phi = random_case(rng, depth=2)
    y = signal(times, values)
    a, b = 0.5, 3.0
    if not decidable(times, sitl.Eventually(a, b, phi)):
        return
    ev = sitl.satisfies(y, 0.0, sitl.Eventually(a, b, phi))
    assert ev == sitl.satisfies(y, 0.0, sitl.Until(sitl.Top(), phi, a, b))
    assert sitl.satisfies(y, 0.0, sitl.Always(a, b, phi)) == (
        not sitl.satisfies(y, 0.0, sitl.Eventually(a, b, sitl.Not(phi))))


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_double_negation(seed):
    rng = np.random.default_rng(seed)
    times, values, phi = random_case(rng)
    y = signal(times, values)
    assert sitl.satisfies(y, 0.0, sitl.Not(sitl.Not(phi))) == sitl.satisfies(y, 0.0, phi)


@settings(max_examples=200, deadline=None)
@given(seeds, st.integers(1, 3))
def test_refining_a_zero_order_hold_keeps_the_verdict(seed, factor):
    """Extra samples that repeat the held value add no new witnesses.

    Original times and interval endpoints are integers, operator bodies are
    temporal-free, so every inserted sample lies between original samples in
    the same window and carries an already-present value.
    """
    rng = np.random.default_rng(seed)
    n = 20
    times = np.arange(n, dtype=float)
    values = rng.uniform(-1, 1, (n, 1))
    body = sitl.And(random_formula(rng, 0), sitl.Not(random_formula(rng, 0)))
    left = random_formula(rng, 0)
    a = int(rng.integers(0, 4))
    b = a + int(rng.integers(1, 6))
    phi = [sitl.Eventually(a, b, body), sitl.Always(a, b, body), sitl.Until(left, body, a, b)][seed % 3]
    fine_t = np.arange((n - 1) * factor + 1) / factor
    fine_v = values[np.floor(fine_t + 1e-12).astype(int)]
    coarse, fine = signal(times, values), signal(fine_t, fine_v)
    for t0 in range(0, n - b):
        assert sitl.satisfies(coarse, float(t0), phi) == sitl.satisfies(fine, float(t0), phi)


def test_random_signal_helper_is_exact_on_half_grid():
    times, _ = random_signal(np.random.default_rng(0))
    assert np.all((times * 2) == np.round(times * 2))
