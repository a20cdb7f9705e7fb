"""Test-set sweeps, their statistics and the end-to-end pipeline."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics, mlp, sim
from .dynamics import InstanceSpec

log = logging.getLogger(__name__)

WORKERS_ENV = "NEUROADAPT_WORKERS"
BASELINES = ("non-adaptive", "no-nn")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    return workers


# ------------------------------------------------------------------ sweeps

def _run_chunk(config: sim.RunConfig) -> sim.RunLog:
    return sim.integrate(config, raise_on_failure=False)


def merge_logs(logs: list[sim.RunLog]) -> sim.RunLog:
    """Concatenate batched logs that share a time grid, ordered by instance id."""
    if len(logs) == 1:
        return logs[0]
    first = logs[0]
    ids = [i for lg in logs for i in lg.instance_ids]
    order = np.argsort(ids, kind="stable")

    def cat(name):
        return np.concatenate([getattr(lg, name) for lg in logs])[order]

    errors = {k: np.concatenate([lg.errors[k] for lg in logs])[order] for k in first.errors}
    reward = None if first.reward is None else cat("reward")
    formulas = None
    if first.formulas is not None:
        flat = [f for lg in logs for f in lg.formulas]
        formulas = [flat[k] for k in order]
    return sim.RunLog(first.kind, first.controller, [ids[k] for k in order], first.t, cat("x"), cat("u"),
                      cat("u_nn"), cat("adaptive"), errors, reward, cat("failed"), cat("fail_time"),
                      cat("guard_trips"), first.dt, formulas)


def run_batch(config: sim.RunConfig, workers: int | None = None) -> sim.RunLog:
    """Integrate ``config``, split into contiguous chunks over worker processes."""
    workers = min(worker_count(workers), len(config.instances))
    if workers == 1:
        return _run_chunk(config)
    bounds = np.linspace(0, len(config.instances), workers + 1).astype(int)
    chunks = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        trajs = None if config.trajectories is None else config.trajectories[lo:hi]
        chunks.append(sim.RunConfig(config.instances[lo:hi], config.controller, config.gains, config.dt,
                                    config.horizon, config.model, config.log_stride, config.seed, trajs))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        logs = list(pool.map(_run_chunk, chunks))
    return merge_logs(logs)


@dataclass
class SweepResult:
    """Per-instance summaries plus across-instance mean/std time series.

    Statistics cover the instances whose runs completed; the rest are listed
    in ``incomplete``.
    """

    kind: str
    controller: str
    t: np.ndarray
    summaries: list[dict]
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    incomplete: list[int] = field(default_factory=list)

    @property
    def satisfaction_rate(self) -> float:
        """Fraction of all instances whose monitored run satisfies its task."""
        flags = [s["satisfied"] for s in self.summaries]
        if any(f is None for f in flags):
            return float("nan")
        return float(np.mean(flags))

    def completed(self) -> list[dict]:
        return [s for s in self.summaries if not s["failed"]]

    def stat(self, key: str, completed_only: bool = False) -> float:
        """Mean of a scalar summary field."""
        rows = self.completed() if completed_only else self.summaries
        return float(np.mean([r[key] for r in rows]))

    def write_csv(self, path) -> None:
        """Time series of the aggregate channels, ``<name>_mean``/``<name>_std``."""
        names = sorted(self.mean)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{n}_{s}" for n in names for s in ("mean", "std")])
            for k, tk in enumerate(self.t):
                row = [tk] + [v for n in names for v in (self.mean[n][k], self.std[n][k])]
                w.writerow([repr(float(v)) for v in row])

    def write_summaries(self, path) -> None:
        keys = sorted({k for s in self.summaries for k in s})
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for s in self.summaries:
                w.writerow({k: json.dumps(v) if isinstance(v, list) else v for k, v in s.items()})


def aggregate_channels(run: sim.RunLog) -> dict[str, np.ndarray]:
    """Scalar per-sample channels, each ``[instance, time]``."""
    ch = {"error": run.error_norm(),
          "u_norm": np.linalg.norm(run.u, axis=-1),
          "u_nn_norm": np.linalg.norm(run.u_nn, axis=-1)}
    if run.kind == "unicycle":
        ch["e_d"] = run.errors["e_d"]
        ch["beta"] = np.abs(run.errors["beta"])
        ch["e_v"] = np.abs(run.errors["e_v"])
        ch["e_w"] = np.abs(run.errors["e_w"])
    else:
        ch["e_v"] = np.linalg.norm(run.errors["e_v"], axis=-1)
    for j in range(run.adaptive.shape[-1]):
        ch[f"l{j}"] = run.adaptive[..., j]
    if run.reward is not None:
        ch["reward"] = run.reward
    return ch


def summarize(run: sim.RunLog, eval_time: float | None = None) -> SweepResult:
    summaries = [run.summary(i, eval_time) for i in range(run.batch)]
    ok = ~run.failed
    mean, std = {}, {}
    for name, arr in aggregate_channels(run).items():
        sel = arr[ok]
        if sel.shape[0]:
            mean[name], std[name] = sel.mean(0), sel.std(0)
        else:
            mean[name] = std[name] = np.full(run.t.size, np.nan)
    incomplete = [int(run.instance_ids[i]) for i in np.flatnonzero(run.failed)]
    return SweepResult(run.kind, run.controller, run.t, summaries, mean, std, incomplete)


def sweep(instances: list[InstanceSpec], controller: str, model: mlp.MlpModel | None = None,
          gains=None, dt: float | None = None, horizon: float | None = None,
          workers: int | None = None, trajectories=None) -> tuple[SweepResult, sim.RunLog]:
    config = sim.RunConfig(list(instances), controller, gains=gains, dt=dt, horizon=horizon, model=model,
                           trajectories=trajectories)
    run = run_batch(config, workers)
    return summarize(run), run


# ---------------------------------------------------------------- pipeline

def split(instances: list[InstanceSpec]) -> tuple[list[InstanceSpec], list[InstanceSpec]]:
    train = [s for s in instances if s.split == "train"]
    test = [s for s in instances if s.split == "test"]
    return train, test


def train_model(data: sim.TrainingSet, config: mlp.TrainConfig | None = None):
    inputs, targets = sim.training_arrays(data)
    return mlp.train(inputs, targets, config or mlp.TrainConfig())


@dataclass
class PipelineResult:
    scenario: str
    out_dir: Path
    train_result: mlp.TrainResult
    sweeps: dict[str, SweepResult]

    def report(self) -> dict:
        rows = {}
        for name, res in self.sweeps.items():
            row = {"satisfaction_rate": res.satisfaction_rate,
                   "incomplete": res.incomplete,
                   "mean_initial_error": res.stat("initial_error"),
                   "mean_eval_error": res.stat("eval_error")}
            if self.scenario == "unicycle":
                row["mean_initial_beta"] = res.stat("initial_beta")
                row["mean_eval_beta"] = res.stat("eval_beta")
            if self.scenario == "pendulum":
                row["mean_steady_reward"] = res.stat("steady_reward")
                row["mean_window_cost"] = res.stat("window_cost")
            rows[name] = row
        return {"scenario": self.scenario, "final_training_loss": self.train_result.final_loss,
                "training_epochs": self.train_result.epochs, "controllers": rows}


def pipeline(scenario: str, out_dir, seed: int = 0, count: int = 150,
             train_config: mlp.TrainConfig | None = None, kappa: int = 3,
             controllers=("proposed",) + BASELINES, workers: int | None = None) -> PipelineResult:
    """instances -> training data -> network -> test sweeps, with every artifact on disk."""
    if scenario not in dynamics.SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "instances"
    try:
        instances = dynamics.generate_instances(dynamics.nominal_instance(scenario), count, seed)
        dynamics.save_instances(instances, out / "instances.json")
        train, test = split(instances)
        stage = "gen-data"
        data = sim.generate_training_data(train, kappa=kappa)
        sim.write_training_csv(data, out / "train_data.csv")
        stage = "train"
        cfg = train_config or mlp.TrainConfig(seed=seed)
        model, result = train_model(data, cfg)
        model.save(out / "model.json")
        sweeps = {}
        for name in controllers:
            stage = f"sweep:{name}"
            res, _ = sweep(test, name, model=model, workers=workers)
            res.write_csv(out / f"sweep_{name}.csv")
            res.write_summaries(out / f"summary_{name}.csv")
            sweeps[name] = res
    except Exception as exc:  # surfaced with its stage; artifacts written so far stay on disk
        raise StageError(stage, exc) from exc
    res = PipelineResult(scenario, out, result, sweeps)
    with open(out / "report.json", "w") as fh:
        json.dump(res.report(), fh, indent=1)
    return res
