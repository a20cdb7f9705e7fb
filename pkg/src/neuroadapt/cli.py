"""Command-line front end: ``neuroadapt <command> ...``.

Exit codes: 0 success, 1 a stage failed, 2 invalid input. Settings resolve
as command-line flag, then ``--config`` JSON file, then built-in default.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, dynamics, experiments, mlp, planner, sim, sitl

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2

DEFAULTS = {
    "scenario": "pendulum",
    "seed": 0,
    "count": 150,
    "kappa": 3,
    "points_per_traj": 500,
    "dt": None,
    "horizon": None,
    "eps": None,
    "hidden_layers": 4,
    "width": 128,
    "batch": 256,
    "lr": 1e-3,
    "target_loss": 1e-4,
    "max_epochs": 150,
    "workers": None,
}


class InvalidInput(ValueError):
    pass


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInput(f"cannot read config {path}: {exc}") from exc
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        cfg.update(data)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["scenario"] not in dynamics.SCENARIOS:
        raise InvalidInput(f"unknown scenario {cfg['scenario']!r}")
    return cfg


def _train_config(cfg: dict) -> mlp.TrainConfig:
    return mlp.TrainConfig(hidden_layers=cfg["hidden_layers"], width=cfg["width"], batch=cfg["batch"],
                           lr=cfg["lr"], target_loss=cfg["target_loss"], max_epochs=cfg["max_epochs"],
                           seed=cfg["seed"])


def _gains(cfg: dict, kind: str):
    gains = sim.default_gains(kind)
    if cfg["eps"] is not None:
        gains.eps = cfg["eps"]
        if hasattr(gains, "eps_w"):
            gains.eps_w = cfg["eps"]
    return gains


def _load_instances(path) -> list[dynamics.InstanceSpec]:
    try:
        return dynamics.load_instances(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot load instances from {path}: {exc}") from exc


def _select(instances, split: str):
    if split == "all":
        return list(instances)
    chosen = [s for s in instances if s.split == split]
    if not chosen:
        raise InvalidInput(f"no {split} instances in file")
    return chosen


def _by_index(instances, index: int):
    for s in instances:
        if s.index == index:
            return s
    raise InvalidInput(f"no instance with index {index}")


def _load_model(path):
    if path is None:
        return None
    try:
        return mlp.MlpModel.load(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot load model from {path}: {exc}") from exc


def _dump(obj) -> None:
    print(json.dumps(obj, indent=1, default=float))


# ---------------------------------------------------------------- commands

def cmd_print_config(args, cfg) -> int:
    _dump(cfg)
    return EXIT_OK


def cmd_instances(args, cfg) -> int:
    insts = dynamics.generate_instances(dynamics.nominal_instance(cfg["scenario"]), cfg["count"], cfg["seed"])
    dynamics.save_instances(insts, args.out)
    n_train = sum(s.split == "train" for s in insts)
    print(f"wrote {len(insts)} {cfg['scenario']} instances ({n_train} train, {len(insts) - n_train} test) to {args.out}")
    return EXIT_OK


def cmd_plan(args, cfg) -> int:
    spec = _by_index(_load_instances(args.instances), args.index)
    if spec.kind == "pendulum":
        raise InvalidInput("the pendulum has no planned trajectory")
    task = spec.task()
    traj = planner.plan(task)
    traj.save(args.out)
    ok = sitl.satisfies_prefix_suffix(traj, task.formula(), dt=args.dt, cycles=args.cycles)
    print(f"instance {spec.index}: t_f1={traj.t_f1:.3f} s, t_f2={traj.t_f2:.3f} s, "
          f"monitor over {args.cycles} suffix cycles: {'satisfied' if ok else 'VIOLATED'}")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_gen_data(args, cfg) -> int:
    train = _select(_load_instances(args.instances), "train")
    data = sim.generate_training_data(train, kappa=cfg["kappa"], points_per_traj=cfg["points_per_traj"],
                                      dt=cfg["dt"],
                                      gains=None if cfg["eps"] is None else _gains(cfg, train[0].kind))
    sim.write_training_csv(data, args.out)
    print(f"wrote {data['x'].shape[0]} triplets from {len(train)} trajectories to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    try:
        data = sim.read_training_csv(args.data)
    except (OSError, ValueError, KeyError) as exc:
        raise InvalidInput(f"cannot read training data {args.data}: {exc}") from exc
    model, result = experiments.train_model(data, _train_config(cfg))
    model.save(args.out)
    if args.loss_csv:
        with open(args.loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_batch_loss"])
            w.writerows(enumerate(result.loss_curve, 1))
    print(f"trained {result.epochs} epochs, final mean batch loss {result.final_loss:.3e} "
          f"(target {cfg['target_loss']:.0e} {'reached' if result.reached_target else 'not reached'}); "
          f"model written to {args.out}")
    return EXIT_OK


def cmd_run(args, cfg) -> int:
    spec = _by_index(_load_instances(args.instances), args.index)
    run_cfg = sim.RunConfig([spec], args.controller, gains=_gains(cfg, spec.kind), dt=cfg["dt"],
                            horizon=cfg["horizon"], model=_load_model(args.model), seed=cfg["seed"])
    log = sim.integrate(run_cfg, raise_on_failure=False)
    log.write_csv(args.out)
    summary = log.summary(0)
    if args.summary:
        log.write_summary(args.summary)
    _dump(summary)
    return EXIT_FAILURE if summary["failed"] else EXIT_OK


def cmd_sweep(args, cfg) -> int:
    insts = _select(_load_instances(args.instances), args.split)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res, _ = experiments.sweep(insts, args.controller, model=_load_model(args.model),
                               gains=_gains(cfg, insts[0].kind), dt=cfg["dt"], horizon=cfg["horizon"],
                               workers=cfg["workers"])
    res.write_csv(out / f"sweep_{args.controller}.csv")
    res.write_summaries(out / f"summary_{args.controller}.csv")
    print(f"{args.controller}: {len(insts)} instances, {len(res.incomplete)} incomplete, "
          f"satisfaction rate {res.satisfaction_rate:.3f}, mean error at evaluation time "
          f"{res.stat('eval_error'):.4g} (initial {res.stat('initial_error'):.4g})")
    return EXIT_OK


def read_log_csv(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as fh:
            cols = next(csv.reader(fh))
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
    except (OSError, StopIteration, ValueError) as exc:
        raise InvalidInput(f"cannot read log {path}: {exc}") from exc
    return cols, data


def cmd_monitor(args, cfg) -> int:
    cols, data = read_log_csv(args.log)
    try:
        phi = sitl.parse_formula(Path(args.formula_file).read_text() if args.formula_file else args.formula)
    except sitl.SitlError as exc:
        raise InvalidInput(f"formula: {exc}") from exc
    names = args.columns.split(",")
    missing = [c for c in names + ["t"] if c not in cols]
    if missing:
        raise InvalidInput(f"log lacks columns {missing}")
    t = data[:, cols.index("t")]
    values = data[:, [cols.index(c) for c in names]]
    if args.dt:
        grid = np.arange(t[0], t[-1] + args.dt / 2, args.dt)
        values = np.stack([np.interp(grid, t, values[:, j]) for j in range(values.shape[1])], 1)
        t = grid
    signal = sitl.SampledSignal(t, values)
    try:
        verdict = sitl.check(signal, phi)
    except sitl.HorizonExceeded as exc:
        print(f"horizon-exceeded: {exc}")
        return EXIT_FAILURE
    except sitl.SitlError as exc:
        raise InvalidInput(str(exc)) from exc
    _dump({"verdict": bool(verdict.value), "checked_until": verdict.checked_until,
           "truncated": verdict.truncated, "conjuncts": sitl.explain(signal, phi)})
    return EXIT_OK


def cmd_pipeline(args, cfg) -> int:
    res = experiments.pipeline(cfg["scenario"], args.out_dir, seed=cfg["seed"], count=cfg["count"],
                               train_config=_train_config(cfg), kappa=cfg["kappa"], workers=cfg["workers"])
    report = res.report()
    print(f"{cfg['scenario']}: network trained {report['training_epochs']} epochs, "
          f"final loss {report['final_training_loss']:.3e}")
    for name, row in report["controllers"].items():
        line = (f"  {name:13s} satisfaction {row['satisfaction_rate']:.3f}  "
                f"mean error {row['mean_initial_error']:.4g} -> {row['mean_eval_error']:.4g}")
        if "mean_steady_reward" in row:
            line += (f"  steady reward {row['mean_steady_reward']:.3f} (reference 0.99)"
                     f"  window cost {row['mean_window_cost']:.1f} (reference 200)")
        if "mean_eval_beta" in row:
            line += f"  |beta| {row['mean_initial_beta']:.4g} -> {row['mean_eval_beta']:.4g}"
        print(line)
    print(f"artifacts in {res.out_dir}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with setting overrides")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="neuroadapt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=func)
        return sp

    sp = add("instances", cmd_instances, "generate random problem instances")
    sp.add_argument("--scenario", choices=dynamics.SCENARIOS)
    sp.add_argument("--count", type=int)
    sp.add_argument("--out", default="instances.json")

    sp = add("plan", cmd_plan, "plan and check one instance's trajectory")
    sp.add_argument("--instances", required=True)
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--out", default="trajectory.json")
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--cycles", type=int, default=3)

    sp = add("gen-data", cmd_gen_data, "simulate the nominal controller on the training instances")
    sp.add_argument("--instances", required=True)
    sp.add_argument("--out", default="train_data.csv")
    sp.add_argument("--kappa", type=int)
    sp.add_argument("--points-per-traj", dest="points_per_traj", type=int)
    sp.add_argument("--dt", type=float)

    sp = add("train", cmd_train, "train the network controller")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default="model.json")
    sp.add_argument("--loss-csv")
    for flag, typ in (("--hidden-layers", int), ("--width", int), ("--batch", int), ("--lr", float),
                      ("--target-loss", float), ("--max-epochs", int)):
        sp.add_argument(flag, type=typ, dest=flag[2:].replace("-", "_"))

    for name, func, text in (("run", cmd_run, "simulate one instance"),
                             ("sweep", cmd_sweep, "simulate a set of instances and aggregate")):
        sp = add(name, func, text)
        sp.add_argument("--instances", required=True)
        sp.add_argument("--controller", choices=sim.control.CONTROLLERS, default="proposed")
        sp.add_argument("--model")
        sp.add_argument("--dt", type=float)
        sp.add_argument("--horizon", type=float)
        sp.add_argument("--eps", type=float)
        if name == "run":
            sp.add_argument("--index", type=int, required=True)
            sp.add_argument("--out", default="run.csv")
            sp.add_argument("--summary")
        else:
            sp.add_argument("--split", choices=("train", "test", "all"), default="test")
            sp.add_argument("--out-dir", default=".")
            sp.add_argument("--workers", type=int)

    sp = add("monitor", cmd_monitor, "check a logged run against a formula")
    sp.add_argument("--log", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--formula")
    src.add_argument("--formula-file")
    sp.add_argument("--columns", default="x0,x1", help="comma-separated signal columns")
    sp.add_argument("--dt", type=float, help="resample onto a uniform grid first")

    sp = add("pipeline", cmd_pipeline, "instances, data, training and test sweeps end to end")
    sp.add_argument("--scenario", choices=dynamics.SCENARIOS)
    sp.add_argument("--out-dir", default="artifacts")
    sp.add_argument("--count", type=int)
    sp.add_argument("--max-epochs", dest="max_epochs", type=int)
    sp.add_argument("--workers", type=int)

    add("print-config", cmd_print_config, "show the resolved settings")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except experiments.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (sim.NonFiniteState, planner.InfeasibleTiming, mlp.NonFiniteLoss, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
