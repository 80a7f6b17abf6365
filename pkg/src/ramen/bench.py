"""Repeated-run benchmarks: simulate, select, estimate, and tabulate MAE per method."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

from .estimator import baseline, estimate, estimate_subset, mae
from .nuisance import DEFAULT_LAMBDA
from .relax import TrainConfig, gumbel_select, hyperparameter_sweep
from .scm import (KnownDagScenario, make_shift_spec, sample_heterogeneity, sample_known_dag,
                  sample_random_dag, sample_scm, true_ate)
from .search import combinatorial_select, worker_count

log = logging.getLogger(__name__)

SCENARIOS = ("known_dag", "random_dag", "heterogeneity")
METHODS = ("combinatorial", "gumbel", "adjust_all", "adjust_none", "oracle")

__all__ = ["ExperimentConfig", "MaeReport", "run_experiment", "run_seed", "simulate",
           "mae", "load_config", "parse_config"]


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "known_dag"
    invariance: str = "TY"
    post_kind: str = "collider"
    n: int = 2500
    n_env: int = 5
    d: int = 5
    p: int = 10
    density: float = 0.3
    epsilon: float = 1.0
    methods: tuple[str, ...] = ("combinatorial", "adjust_all", "adjust_none")
    runs: int = 20
    master_seed: int = 0
    max_size: int | None = None
    ridge_lambda: float = DEFAULT_LAMBDA
    sweep: bool = False
    gumbel: TrainConfig = field(default_factory=TrainConfig)
    n_jobs: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must not repeat")
        if self.n_env < 2:
            raise ValueError("at least 2 environments are required")
        if "oracle" in self.methods and self.scenario == "random_dag":
            raise ValueError("the oracle method is only defined for the known-DAG scenarios")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["methods"] = list(self.methods)
        return out


def run_seed(master_seed: int, run: int) -> int:
    """Per-run seed from a ``SeedSequence`` keyed on ``(master_seed, run)``."""
    return int(np.random.SeedSequence([master_seed, run]).generate_state(1)[0])


def simulate(cfg: ExperimentConfig, seed: int):
    """Draw one dataset for the configured scenario; returns ``(data, truth, oracle_subset)``."""
    if cfg.scenario == "random_dag":
        dag = sample_random_dag(cfg.p, cfg.density, seed, cfg.invariance)
        shifts = make_shift_spec(dag, cfg.n_env, cfg.epsilon, seed)
        data = sample_scm(dag, shifts, cfg.n, seed)
        return data, true_ate(dag, cfg.n_env), None
    scen = KnownDagScenario(cfg.invariance, cfg.post_kind, cfg.d)
    if cfg.scenario == "known_dag":
        data, truth = sample_known_dag(scen, cfg.n, cfg.n_env, seed)
    else:
        data, truth = sample_heterogeneity(scen, cfg.epsilon, cfg.n, cfg.n_env, seed)
    return data, truth, scen.parent_columns


def _apply(method, data, truth, oracle, cfg: ExperimentConfig, seed, n_jobs):
    lam = cfg.ridge_lambda
    if method in ("adjust_all", "adjust_none"):
        return baseline(data, method, truth, lam), None
    if method == "oracle":
        report = estimate_subset(data, oracle, "Y", truth, lam)
        report.config["method"] = "oracle"
        return report, None
    if method == "combinatorial":
        sel = combinatorial_select(data, cfg.max_size, seed, lam, n_jobs=n_jobs)
    else:
        gcfg = replace(cfg.gumbel, seed=seed)
        if cfg.sweep:
            gcfg = replace(hyperparameter_sweep(data, base=gcfg, lam=lam), seed=seed)
        sel = gumbel_select(data, gcfg, lam)
    return estimate(data, sel, truth, lam), sel


def _one_run(cfg: ExperimentConfig, run: int, n_jobs):
    seed = run_seed(cfg.master_seed, run)
    out = {}
    try:
        data, truth, oracle = simulate(cfg, seed)
    except Exception as exc:  # noqa: BLE001 - a failed draw is recorded, not raised
        reason = f"simulate: {exc}"
        return seed, {m: (None, None, reason) for m in cfg.methods}
    for method in cfg.methods:
        try:
            report, sel = _apply(method, data, truth, oracle, cfg, seed, n_jobs)
            out[method] = (report, sel, None)
        except Exception as exc:  # noqa: BLE001
            log.warning("run %d, method %s failed: %s", run, method, exc)
            out[method] = (None, None, f"{type(exc).__name__}: {exc}")
    return seed, out


@dataclass
class MaeReport:
    config: dict[str, Any]
    rows: list[tuple[str, int, int, float, float, float]] = field(default_factory=list)
    run_mae: dict[tuple[str, int], float] = field(default_factory=dict)
    failures: list[tuple[str, int, str]] = field(default_factory=list)
    selections: dict[tuple[str, int], dict] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)

    def methods(self) -> list[str]:
        return list(self.config["methods"])

    def maes(self, method: str) -> np.ndarray:
        return np.array([v for (m, _), v in sorted(self.run_mae.items()) if m == method])

    def aggregate(self, method: str) -> dict[str, Any]:
        vals = self.maes(method)
        k = len(vals)
        se = float(vals.std(ddof=1) / np.sqrt(k)) if k > 1 else None
        return {
            "mean_mae": float(vals.mean()) if k else None,
            "se": se,
            "runs_ok": k,
            "runs_failed": sum(1 for m, _, _ in self.failures if m == method),
        }

    def summary(self) -> dict[str, dict[str, Any]]:
        return {m: self.aggregate(m) for m in self.methods()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "run", "env", "estimate", "truth", "abs_error"])
        for method, run, env, est, tru, err in self.rows:
            w.writerow([method, run, env, format(est, ".17g"), format(tru, ".17g"), format(err, ".17g")])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "summary": self.summary(),
            "run_mae": {m: [{"run": r, "mae": v} for (mm, r), v in sorted(self.run_mae.items()) if mm == m]
                        for m in self.methods()},
            "seeds": self.seeds,
            "failures": [{"method": m, "run": r, "reason": why} for m, r, why in self.failures],
            "selections": [{"method": m, "run": r, **sel}
                           for (m, r), sel in sorted(self.selections.items())],
        }
        return json.dumps(payload, indent=2)


def run_experiment(cfg: ExperimentConfig) -> MaeReport:
    """Every method on the same per-run draw; rows ordered by (method, run, env).

    A failing method in one run becomes a failure record; the sweep continues.
    """
    workers = min(worker_count(cfg.n_jobs), cfg.runs)
    # with parallel runs, the subset search inside each run stays serial
    inner_jobs = 1 if workers > 1 else cfg.n_jobs
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda r: _one_run(cfg, r, inner_jobs), range(cfg.runs)))
    else:
        results = [_one_run(cfg, r, inner_jobs) for r in range(cfg.runs)]

    report = MaeReport(cfg.to_dict(), seeds=[seed for seed, _ in results])
    for method in cfg.methods:
        for run, (_, per_method) in enumerate(results):
            ate, sel, reason = per_method[method]
            if reason is not None:
                report.failures.append((method, run, reason))
                continue
            for env, (est, tru) in enumerate(zip(ate.estimates, ate.truth)):
                report.rows.append((method, run, env, float(est), float(tru), abs(float(est) - float(tru))))
            report.run_mae[(method, run)] = ate.mae
            if sel is not None:
                report.selections[(method, run)] = {"subset": list(sel.subset), "node": sel.node,
                                                     "combined": sel.score.combined}
    return report


# ---------------------------------------------------------------------------
# Flat key=value config files
# ---------------------------------------------------------------------------

_INT = {"n", "n_env", "d", "p", "runs", "master_seed", "max_size", "n_jobs"}
_FLOAT = {"density", "epsilon", "ridge_lambda"}


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return target_type(value)


def parse_config(values: dict[str, str]) -> ExperimentConfig:
    """Build a config from string key/value pairs; ``gumbel_<field>`` keys set TrainConfig fields."""
    kwargs: dict[str, Any] = {}
    gkw: dict[str, Any] = {}
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    for key, raw in values.items():
        key = key.strip()
        raw = str(raw).strip()
        if key.startswith("gumbel_"):
            name = key[len("gumbel_"):]
            if name not in train_types or name == "seed":
                raise ValueError(f"unknown config key {key!r}")
            kind = train_types[name]
            if name == "batch_size":
                gkw[name] = None if raw.lower() in ("", "none", "full") else int(raw)
            elif kind in ("int", int):
                gkw[name] = int(raw)
            elif kind in ("float", float):
                gkw[name] = float(raw)
            elif kind in ("bool", bool):
                gkw[name] = _coerce(raw, bool)
            else:
                gkw[name] = raw
        elif key == "methods":
            kwargs[key] = tuple(m.strip() for m in raw.split(",") if m.strip())
        elif key in _INT:
            kwargs[key] = None if key in ("max_size", "n_jobs") and raw.lower() in ("", "none") else int(raw)
        elif key in _FLOAT:
            kwargs[key] = float(raw)
        elif key == "sweep":
            kwargs[key] = _coerce(raw, bool)
        elif key in ("scenario", "invariance", "post_kind"):
            kwargs[key] = raw
        else:
            raise ValueError(f"unknown config key {key!r}")
    if gkw:
        kwargs["gumbel"] = TrainConfig(**gkw)
    return ExperimentConfig(**kwargs)


def read_flat_config(path) -> dict[str, str]:
    """Read ``key = value`` lines (``#`` comments allowed) without section headers."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_string("[top]\n" + fh.read(), source=str(path))
    return dict(parser["top"])


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = read_flat_config(path)
    values.update(overrides or {})
    return parse_config(values)
