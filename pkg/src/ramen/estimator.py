"""Per-environment AIPW estimates from pooled nuisances, plus adjust-all/none baselines."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .nuisance import DEFAULT_LAMBDA, LinearModel, LogisticModel, pooled_nuisances
from .scm import EnvData, MultiEnvDataset


def mae(estimates, truths) -> float:
    """Mean absolute error over environments."""
    est = np.asarray(estimates, dtype=float).ravel()
    tru = np.asarray(truths, dtype=float).ravel()
    if est.shape != tru.shape:
        raise ValueError(f"length mismatch: {est.size} estimates vs {tru.size} truths")
    if est.size == 0:
        raise ValueError("no environments")
    return float(np.mean(np.abs(est - tru)))


def aipw_terms(env: EnvData, S: Sequence[int], mu0: LinearModel, mu1: LinearModel,
               pi: LogisticModel) -> np.ndarray:
    """Row-wise doubly robust scores whose mean is the AIPW estimate."""
    if env.n == 0:
        raise ValueError("empty environment")
    n1 = int(env.T.sum())
    if n1 == 0 or n1 == env.n:
        raise ValueError(
            f"environment has {n1} treated of {env.n} rows; one arm is empty and the "
            "weighting terms are undefined"
        )
    XS = env.X[:, list(S)]
    m1, m0, p = mu1.predict(XS), mu0.predict(XS), pi.predict(XS)
    T, Y = env.T, env.Y
    return m1 - m0 + (Y - m1) * T / p - (Y - m0) * (1.0 - T) / (1.0 - p)


def aipw_ate(env: EnvData, S: Sequence[int], mu0: LinearModel, mu1: LinearModel,
             pi: LogisticModel) -> float:
    return float(np.mean(aipw_terms(env, S, mu0, mu1, pi)))


@dataclass
class AteReport:
    estimates: np.ndarray
    subset: tuple[int, ...]
    node: str
    truth: np.ndarray | None = None
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def mae(self) -> float | None:
        return None if self.truth is None else mae(self.estimates, self.truth)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["env", "estimate", "truth", "abs_error"])
        for e, est in enumerate(self.estimates):
            if self.truth is None:
                w.writerow([e, format(est, ".17g"), "", ""])
            else:
                tr = self.truth[e]
                w.writerow([e, format(est, ".17g"), format(tr, ".17g"), format(abs(est - tr), ".17g")])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "subset": list(self.subset),
            "node": self.node,
            "estimates": [float(x) for x in self.estimates],
            "truth": None if self.truth is None else [float(x) for x in self.truth],
            "mae": self.mae,
            "config": self.config,
        }
        return json.dumps(payload, indent=2)


def estimate_subset(data: MultiEnvDataset, S: Sequence[int], node: str = "Y",
                    truth=None, lam: float = DEFAULT_LAMBDA) -> AteReport:
    S = tuple(sorted(int(j) for j in S))
    bad = [j for j in S if not 0 <= j < data.d]
    if bad:
        raise ValueError(f"subset indices {bad} out of range for d={data.d}")
    nu = pooled_nuisances(data, S, lam)
    est = np.array([aipw_ate(env, S, nu.mu0, nu.mu1, nu.pi) for env in data.envs])
    tr = None if truth is None else np.asarray(truth, dtype=float)
    return AteReport(est, S, node, tr, {"ridge_lambda": lam})


def estimate(data: MultiEnvDataset, selection, truth=None, lam: float = DEFAULT_LAMBDA) -> AteReport:
    """AIPW estimate per environment on the subset chosen by a selection result."""
    report = estimate_subset(data, selection.subset, selection.node, truth, lam)
    report.config["method"] = selection.method
    return report


def baseline(data: MultiEnvDataset, kind: str, truth=None, lam: float = DEFAULT_LAMBDA) -> AteReport:
    if kind == "adjust_all":
        S = range(data.d)
    elif kind == "adjust_none":
        S = ()
    else:
        raise ValueError(f"unknown baseline {kind!r}; use adjust_all or adjust_none")
    report = estimate_subset(data, S, "baseline", truth, lam)
    report.config["method"] = kind
    return report
