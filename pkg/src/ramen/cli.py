"""Command-line entry point: ``ramen {simulate,select,estimate,bench,version}``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors; a
runtime diagnostic names the stage that failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace

from . import __version__
from .bench import load_config, parse_config, read_flat_config, run_experiment, simulate
from .estimator import estimate
from .io import (DatasetFormatError, atomic_write, read_dataset, read_json, selection_from_json,
                 write_dataset, write_json)
from .relax import TrainConfig, gumbel_select, hyperparameter_sweep
from .search import combinatorial_select

log = logging.getLogger("ramen")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _stage(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (OSError, ValueError, RuntimeError, KeyError, DatasetFormatError) as exc:
        raise StageError(stage, str(exc)) from exc


def _require_envs(data):
    if data.n_env < 2:
        raise ValueError(
            f"found {data.n_env} environment; invariance-based selection needs data collected "
            "under at least 2 different conditions (environments)"
        )
    return data


def _merged(args, keys, config_path):
    """File values first, then any flag given on the command line."""
    values = read_flat_config(config_path) if config_path else {}
    for key in keys:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v if not isinstance(v, (list, tuple)) else ",".join(v)
    return {k: str(v) for k, v in values.items()}


_TRAIN_FLAGS = ("epochs", "patience", "lr_gate", "lr_model", "tau_init", "alpha", "anneal_every",
                "tau_final", "width", "batch_size", "restarts")


def _train_config(args, seed) -> TrainConfig:
    kw = {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if f.name in _TRAIN_FLAGS and v is not None:
            kw[f.name] = None if f.name == "batch_size" and v == 0 else v
    return TrainConfig(seed=seed, **kw)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

_SIM_KEYS = ("scenario", "invariance", "post_kind", "n", "n_env", "d", "p", "density", "epsilon")


def cmd_simulate(args):
    values = _merged(args, _SIM_KEYS, args.config)
    cfg = _stage("config", parse_config, values)
    data, truth, _ = _stage("simulate", simulate, cfg, args.seed)
    _stage("write", write_dataset, args.out, data)
    payload = {"ate": [float(x) for x in truth], "seed": args.seed,
               "scenario": {k: getattr(cfg, k) for k in _SIM_KEYS}}
    _stage("write", write_json, args.truth, payload)
    return 0


def cmd_select(args):
    data = _stage("read", read_dataset, args.data)
    _stage("read", _require_envs, data)
    if args.method == "combinatorial":
        sel = _stage("select", combinatorial_select, data, args.max_size, args.seed, args.ridge_lambda,
                     args.mode)
    else:
        tcfg = _stage("config", _train_config, args, args.seed)
        if args.sweep:
            tcfg = replace(_stage("sweep", hyperparameter_sweep, data, base=tcfg, lam=args.ridge_lambda),
                           seed=args.seed)
        sel = _stage("select", gumbel_select, data, tcfg, args.ridge_lambda)
    _stage("write", atomic_write, args.out, sel.to_json() + "\n")
    if args.losses:
        _stage("write", atomic_write, args.losses, sel.loss_table.to_csv())
    if args.trace and sel.trace is not None:
        _stage("write", atomic_write, args.trace, sel.trace.to_csv())
    return 0


def cmd_estimate(args):
    data = _stage("read", read_dataset, args.data)
    _stage("read", _require_envs, data)
    sel = _stage("read", lambda p: selection_from_json(read_json(p)), args.selection)
    truth = None
    if args.truth:
        truth = _stage("read", lambda p: read_json(p)["ate"], args.truth)
        if len(truth) != data.n_env:
            raise StageError("read", f"truth has {len(truth)} entries for {data.n_env} environments")
    report = _stage("estimate", estimate, data, sel, truth, args.ridge_lambda)
    _stage("write", atomic_write, args.out, report.to_csv())
    if args.json:
        _stage("write", atomic_write, args.json, report.to_json() + "\n")
    if report.mae is not None:
        print(f"mae {report.mae:.17g}")
    return 0


_BENCH_KEYS = _SIM_KEYS + ("methods", "runs", "master_seed", "max_size", "n_jobs")


def cmd_bench(args):
    if args.config:
        overrides = _merged(args, _BENCH_KEYS, None)
        cfg = _stage("config", load_config, args.config, overrides)
    else:
        cfg = _stage("config", parse_config, _merged(args, _BENCH_KEYS, None))
    report = _stage("bench", run_experiment, cfg)
    _stage("write", atomic_write, args.out_csv, report.to_csv())
    _stage("write", atomic_write, args.out_json, report.to_json() + "\n")
    for method, agg in report.summary().items():
        se = "nan" if agg["se"] is None else f"{agg['se']:.6g}"
        mean = "nan" if agg["mean_mae"] is None else f"{agg['mean_mae']:.6g}"
        print(f"{method}\tmean_mae={mean}\tse={se}\truns_ok={agg['runs_ok']}")
    return 0


def cmd_version(args):
    print(__version__)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _scenario_flags(p):
    p.add_argument("--scenario", choices=("known_dag", "random_dag", "heterogeneity"))
    p.add_argument("--invariance", choices=("TY", "Y_only", "T_only", "none"))
    p.add_argument("--post-kind", dest="post_kind", choices=("collider", "descendant", "noise"))
    p.add_argument("--n", type=int, help="rows per environment")
    p.add_argument("--n-env", dest="n_env", type=int, help="number of environments")
    p.add_argument("--d", type=int, help="observed covariates (known-DAG scenarios)")
    p.add_argument("--p", type=int, help="nodes in the random DAG")
    p.add_argument("--density", type=float)
    p.add_argument("--epsilon", type=float, help="heterogeneity / shift strength")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ramen", description="Adjustment-set selection from "
                                     "multiple environments and per-environment ATE estimation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample a synthetic multi-environment dataset")
    p.add_argument("--config", help="flat key=value file; flags override its values")
    _scenario_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset CSV path")
    p.add_argument("--truth", required=True, help="true ATE JSON path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", help="choose an adjustment set")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("combinatorial", "gumbel"), default="combinatorial")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-size", dest="max_size", type=int)
    p.add_argument("--mode", choices=("max", "mean"), default="max")
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=1e-3)
    p.add_argument("--sweep", action="store_true", help="gumbel: grid search before the final run")
    for name, typ in (("epochs", int), ("patience", int), ("lr_gate", float), ("lr_model", float),
                      ("tau_init", float), ("alpha", float), ("anneal_every", int),
                      ("tau_final", float), ("width", int), ("batch_size", int), ("restarts", int)):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ,
                       help="gumbel training setting" + (" (0 = full batch)" if name == "batch_size" else ""))
    p.add_argument("--out", required=True, help="selection JSON path")
    p.add_argument("--losses", help="optional per-entry loss table CSV")
    p.add_argument("--trace", help="optional gumbel training trace CSV")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("estimate", help="AIPW estimate per environment for a selection")
    p.add_argument("--data", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--truth", help="true ATE JSON; enables MAE")
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=1e-3)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--json", help="optional report JSON path")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="repeated-run MAE benchmark")
    p.add_argument("--config", help="flat key=value experiment file; flags override its values")
    _scenario_flags(p)
    p.add_argument("--methods", type=lambda s: s.split(","), help="comma-separated method list")
    p.add_argument("--runs", type=int)
    p.add_argument("--master-seed", dest="master_seed", type=int)
    p.add_argument("--max-size", dest="max_size", type=int)
    p.add_argument("--n-jobs", dest="n_jobs", type=int)
    p.add_argument("--out-csv", dest="out_csv", required=True)
    p.add_argument("--out-json", dest="out_json", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("version", help="print the version")
    p.set_defaults(func=cmd_version)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"ramen: error in stage {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
