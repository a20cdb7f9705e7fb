import numpy as np
import pytest

from neuroadapt import dynamics, experiments, mlp, sim


def pendulum_test_instances(n=6):
    return dynamics.generate_instances(dynamics.nominal_instance("pendulum"), 150, 0)[100:100 + n]


def test_worker_count(monkeypatch):
    monkeypatch.setenv(experiments.WORKERS_ENV, "3")
    assert experiments.worker_count() == 3
    assert experiments.worker_count(2) == 2
    with pytest.raises(ValueError):
        experiments.worker_count(0)


def test_merge_logs_is_permutation_invariant():
    insts = pendulum_test_instances()
    whole = sim.integrate(sim.RunConfig(insts, "no-nn", horizon=0.5))
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(insts))
    parts = [sim.integrate(sim.RunConfig([insts[k] for k in chunk], "no-nn", horizon=0.5))
             for chunk in np.array_split(perm, 3)]
    merged = experiments.merge_logs(parts)
    assert merged.instance_ids == whole.instance_ids
    assert np.allclose(merged.x, whole.x, rtol=0, atol=1e-12)
    a, b = experiments.summarize(merged), experiments.summarize(whole)
    for name in a.mean:
        assert np.allclose(a.mean[name], b.mean[name], rtol=0, atol=1e-12)


def test_summary_statistics_exclude_failed_runs():
    insts = pendulum_test_instances(3)
    run = sim.integrate(sim.RunConfig(insts, "no-nn", horizon=0.5))
    run.failed[1] = True
    res = experiments.summarize(run)
    assert res.incomplete == [insts[1].index]
    err = run.error_norm()
    assert np.allclose(res.mean["error"], err[[0, 2]].mean(0))
    assert len(res.completed()) == 2


def test_sweep_writes_csvs(tmp_path):
    res, _ = experiments.sweep(pendulum_test_instances(2), "no-nn", horizon=0.4)
    res.write_csv(tmp_path / "s.csv")
    res.write_summaries(tmp_path / "m.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "t" and "error_mean" in header and "error_std" in header
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 3


def test_pipeline_reports_failing_stage(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("no data")

    monkeypatch.setattr(sim, "generate_training_data", boom)
    with pytest.raises(experiments.StageError) as info:
        experiments.pipeline("pendulum", tmp_path, count=6)
    assert info.value.stage == "gen-data"
    assert (tmp_path / "instances.json").exists()


def test_pipeline_is_deterministic(tmp_path):
    cfg = mlp.TrainConfig(hidden_layers=1, width=8, max_epochs=2)
    outs = []
    for name in ("a", "b"):
        experiments.pipeline("pendulum", tmp_path / name, count=6, train_config=cfg, controllers=("no-nn",))
        outs.append({p.name: p.read_bytes() for p in (tmp_path / name).iterdir()})
    assert outs[0] == outs[1]
    assert {"instances.json", "train_data.csv", "model.json", "sweep_no-nn.csv", "report.json"} <= set(outs[0])
