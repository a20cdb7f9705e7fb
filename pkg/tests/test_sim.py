import functools
import math

import numpy as np
import pytest

from neuroadapt import dynamics, planner, sim


def instances(kind, idx):
    return [dynamics.generate_instances(dynamics.nominal_instance(kind), 150, 0)[i] for i in idx]


def test_rk4_matches_exponential():
    y = sim.integrate_ode(lambda t, y: -y, [1.0], 1e-3, 1000)
    assert abs(y[-1, 0] - math.exp(-1)) <= 1e-10


def test_rk4_time_dependent_rhs():
    y = sim.integrate_ode(lambda t, y: np.array([math.cos(t)]), [0.0], 1e-2, 300)
    assert abs(y[-1, 0] - math.sin(3.0)) <= 1e-9


def test_run_config_validation():
    inst = instances("manipulator", [0])
    with pytest.raises(ValueError):
        sim.RunConfig(inst, dt=0.0)
    with pytest.raises(ValueError):
        sim.RunConfig(inst, dt=0.1, horizon=0.05)
    with pytest.raises(ValueError):
        sim.RunConfig(inst, log_stride=0)
    with pytest.raises(ValueError):
        sim.RunConfig(inst, controller="lqr")
    with pytest.raises(ValueError):
        sim.RunConfig(inst, controller="non-adaptive")
    with pytest.raises(ValueError):
        sim.RunConfig(inst + instances("unicycle", [0]))


def test_step_halving_shows_fourth_order():
    inst = instances("manipulator", [101])
    finals = []
    for dt in (4e-3, 2e-3, 1e-3):
        log = sim.integrate(sim.RunConfig(inst, "no-nn", dt=dt, horizon=1.0, log_stride=1000))
        finals.append(np.concatenate([log.x[0, -1], log.adaptive[0, -1]]))
    ratio = np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2])
    assert 8 <= ratio <= 32


def test_integration_is_bitwise_deterministic():
    cfg = sim.RunConfig(instances("unicycle", [100, 101]), "no-nn", horizon=1.0)
    a, b = sim.integrate(cfg), sim.integrate(cfg)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)
    assert np.array_equal(a.adaptive, b.adaptive)


def test_batched_run_equals_single_runs():
    insts = instances("manipulator", [100, 102])
    both = sim.integrate(sim.RunConfig(insts, "no-nn", horizon=0.5))
    for i, inst in enumerate(insts):
        one = sim.integrate(sim.RunConfig([inst], "no-nn", horizon=0.5))
        assert np.allclose(one.x[0], both.x[i], rtol=0, atol=1e-12)


def test_log_channels_share_time_grid():
    log = sim.integrate(sim.RunConfig(instances("unicycle", [100]), "no-nn", horizon=0.5, log_stride=7))
    n = log.t.size
    assert log.t[-1] == pytest.approx(0.5)
    assert log.x.shape[1] == log.u.shape[1] == log.u_nn.shape[1] == log.adaptive.shape[1] == n
    assert all(v.shape[1] == n for v in log.errors.values())
    assert np.all(np.isfinite(log.x))


def test_pendulum_nominal_exact_on_nominal_plant():
    spec = dynamics.nominal_instance("pendulum")
    spec.initial_offsets = {"q": math.pi, "dq": 0.0}
    log = sim.integrate(sim.RunConfig([spec], "nominal", horizon=10.0, log_stride=10))
    assert np.abs(log.errors["e"]).max() <= 1e-6


def test_divergence_is_reported_with_time_and_channel():
    inst = instances("manipulator", [100])
    log = sim.integrate(sim.RunConfig(inst, "no-nn", horizon=0.2), raise_on_failure=False)
    assert not log.failed[0]

    class Blowup:
        def predict(self, x):
            return np.full((x.shape[0], 2), 1e300)

    with pytest.raises(sim.NonFiniteState) as info:
        sim.integrate(sim.RunConfig(inst, "open-loop-nn", model=Blowup(), horizon=0.2))
    assert info.value.time > 0 and info.value.channel.startswith(("x", "l"))
    log = sim.integrate(sim.RunConfig(inst * 2, "open-loop-nn", model=Blowup(), horizon=0.2))
    assert log.failed.all() and np.all(log.fail_time > 0)


def test_summary_and_csv(tmp_path):
    log = sim.integrate(sim.RunConfig(instances("pendulum", [100]), "nominal", horizon=1.0))
    s = log.summary(0)
    assert s["instance"] == 100 and not s["failed"] and "window_cost" in s
    log.write_csv(tmp_path / "run.csv")
    raw = np.loadtxt(tmp_path / "run.csv", delimiter=",", skiprows=1)
    header = (tmp_path / "run.csv").read_text().splitlines()[0].split(",")
    assert header == log.columns() and raw.shape == (log.t.size, len(header))
    assert np.array_equal(raw, log.rows(0))


def test_training_data_counts_and_horizon():
    insts = dynamics.generate_instances(dynamics.nominal_instance("pendulum"), 150, 0)[:100]
    data = sim.generate_training_data(insts, dt=1e-2)
    assert data["x"].shape == (50_000, 2) and data["u"].shape == (50_000, 1)
    assert data["t"].max() <= data["horizon"]
    x, u = sim.training_arrays(data)
    assert x.shape[0] == u.shape[0] == 50_000


@functools.lru_cache(maxsize=None)
def arm_data():
    insts = instances("manipulator", [0, 1])
    return insts, sim.generate_training_data(insts, kappa=3, points_per_traj=40, dt=1e-2)


def test_training_data_horizon_covers_kappa_cycles():
    insts, data = arm_data()
    t_f2 = max(planner.plan(s.task()).t_f2 for s in insts)
    assert data["horizon"] > 3 * t_f2
    assert data["t"].max() <= data["horizon"]
    with pytest.raises(ValueError):
        sim.generate_training_data(insts, kappa=2)


def test_training_data_replays_through_nominal_controller():
    insts, data = arm_data()
    loop = sim.build_closed_loop(sim.RunConfig(insts, "nominal"))
    n = data["t"].size // 2
    for k in range(n):
        x = np.stack([data["x"][k], data["x"][n + k]])
        out = loop.policy(x, np.zeros((2, 0)), data["t"][k])
        u = loop.plant.saturate(out.u)
        assert np.abs(u - np.stack([data["u"][k], data["u"][n + k]])).max() <= 1e-10


def test_training_csv_round_trip(tmp_path):
    data = sim.generate_training_data(instances("unicycle", [0]), points_per_traj=30, dt=1e-2)
    sim.write_training_csv(data, tmp_path / "d.csv")
    back = sim.read_training_csv(tmp_path / "d.csv")
    for key in ("trajectory_id", "t", "t_clock", "x", "u"):
        assert np.array_equal(back[key], data[key])
    assert back["kind"] == "unicycle"
