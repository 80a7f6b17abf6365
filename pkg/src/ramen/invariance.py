"""Studentized kernel invariance losses for the treatment and outcome nodes.

For a node ``V`` and covariate subset ``S`` the residual ``V - pooled_mean(X_S)``
must be uncorrelated with every function of ``X_S`` in each environment when
the conditional mean is invariant. The RKHS form of that condition is
estimated per environment with a cross U-statistic on two halves of the
sample and then studentized so the ``T`` and ``Y`` losses share a scale.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .kernel import DEFAULT_CAP, KernelConfig, gaussian_gram, median_bandwidth
from .nuisance import DEFAULT_LAMBDA, LinearModel, LogisticModel, Nuisances, pooled_nuisances
from .scm import MultiEnvDataset

SE_FLOOR = 1e-12
NULL_THRESHOLD = 3.0
VARIANTS = {"T": 0, "Y0": 1, "Y1": 2}


class InsufficientArmError(ValueError):
    pass


@dataclass(frozen=True)
class ResidualVector:
    values: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        f = np.asarray(self.features, dtype=float)
        if f.ndim == 1:
            f = f.reshape(len(v), -1)
        if f.shape[0] != v.shape[0]:
            raise ValueError("residuals and features must have the same number of rows")
        if not np.all(np.isfinite(v)):
            raise ValueError("residuals must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "features", f)


def split_halves(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle into two halves of ``n // 2`` rows; odd ``n`` drops one row."""
    perm = np.random.default_rng(seed).permutation(n)
    m = n // 2
    return perm[:m], perm[m:2 * m]


def cross_terms(delta, features, sigma, first, second) -> np.ndarray:
    """``h_i = (2/n) sum_j delta_i k(z_i, z_j) delta_j`` for ``i`` in the first half."""
    m = len(first)
    K = gaussian_gram(features[first], features[second], sigma)
    return delta[first] * (K @ delta[second]) / m


def cross_u_statistic(residuals: ResidualVector, kern: KernelConfig | float, seed: int = 0,
                      split: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[float, float]:
    """Cross U-statistic of the residual-kernel-residual form and its studentized value.

    ``stat`` is the first-half mean of ``h``; ``studentized`` divides it by
    the standard error ``sd(h) / sqrt(n/2)`` (floored at 1e-12).
    """
    sigma = kern.bandwidth if isinstance(kern, KernelConfig) else float(kern)
    n = len(residuals.values)
    if n < 4:
        raise ValueError(f"cross U-statistic needs n >= 4, got {n}")
    first, second = split if split is not None else split_halves(n, seed)
    h = cross_terms(residuals.values, residuals.features, sigma, first, second)
    stat = float(h.mean())
    se = float(h.std(ddof=1) / np.sqrt(len(h)))
    return stat, stat / max(se, SE_FLOOR)


def split_seed(seed: int, variant: str) -> int:
    # shared by all environments, so duplicated environments give identical entries
    return int(np.random.SeedSequence([seed, VARIANTS[variant]]).generate_state(1)[0])


def subset_bandwidth(data: MultiEnvDataset, S: Sequence[int], seed: int = 0,
                     cap: int = DEFAULT_CAP) -> float:
    return median_bandwidth(data.pooled().X[:, list(S)], cap=cap, seed=seed)


def _aggregate(values, mode):
    values = np.abs(np.asarray(values, dtype=float))
    if mode == "max":
        return float(values.max())
    if mode == "mean":
        return float(values.mean())
    raise ValueError(f"mode must be 'max' or 'mean', got {mode!r}")


def env_losses_T(data, S, pi: LogisticModel, sigma, seed=0) -> list[tuple[float, float]]:
    cols = list(S)
    out = []
    for e, env in enumerate(data.envs):
        XS = env.X[:, cols]
        res = ResidualVector(env.T - pi.predict(XS), XS)
        out.append(cross_u_statistic(res, sigma, split_seed(seed, "T")))
    return out


def env_losses_Y(data, S, mu0: LinearModel, mu1: LinearModel, sigma, seed=0):
    """Per environment, a ``(Y0, Y1)`` pair of ``(stat, studentized)`` tuples."""
    cols = list(S)
    out = []
    for e, env in enumerate(data.envs):
        pair = []
        for t, mu in ((0, mu0), (1, mu1)):
            rows = env.T == t
            if rows.sum() < 4:
                raise InsufficientArmError(
                    f"env {e}, arm T={t}: {int(rows.sum())} rows, at least 4 required"
                )
            XS = env.X[rows][:, cols]
            res = ResidualVector(env.Y[rows] - mu.predict(XS), XS)
            pair.append(cross_u_statistic(res, sigma, split_seed(seed, f"Y{t}")))
        out.append(tuple(pair))
    return out


def loss_T(data: MultiEnvDataset, S: Sequence[int], pi: LogisticModel, mode: str = "max",
           sigma: float | None = None, seed: int = 0) -> float:
    """Treatment invariance loss: |studentized| per env, then max or mean over envs."""
    if sigma is None:
        sigma = subset_bandwidth(data, S, seed)
    return _aggregate([s for _, s in env_losses_T(data, S, pi, sigma, seed)], mode)


def _combine_Y(per_env, mode):
    y0 = [p[0][1] for p in per_env]
    y1 = [p[1][1] for p in per_env]
    return max(_aggregate(y0, mode), _aggregate(y1, mode))


def loss_Y(data: MultiEnvDataset, S: Sequence[int], mu0: LinearModel, mu1: LinearModel,
           mode: str = "max", sigma: float | None = None, seed: int = 0) -> float:
    """Outcome invariance loss, per arm; the worse of the two arms is returned."""
    if sigma is None:
        sigma = subset_bandwidth(data, S, seed)
    return _combine_Y(env_losses_Y(data, S, mu0, mu1, sigma, seed), mode)


class LossEntry(NamedTuple):
    subset: tuple[int, ...]
    node: str
    env: int
    statistic: float
    studentized: float


class Objective(NamedTuple):
    J_T: float
    J_Y: float
    combined: float
    node: str


def combine(J_T: float, J_Y: float) -> Objective:
    # ties go to Y: parents of Y give the more efficient adjustment set
    node = "T" if J_T < J_Y else "Y"
    return Objective(J_T, J_Y, min(J_T, J_Y), node)


def evaluate_subset(data: MultiEnvDataset, S: Sequence[int], mode: str = "max", seed: int = 0,
                    lam: float = DEFAULT_LAMBDA, nuisances: Nuisances | None = None,
                    sigma: float | None = None) -> tuple[Objective, list[LossEntry]]:
    """Fit (or reuse) pooled nuisances for ``S`` and compute every per-env loss entry."""
    S = tuple(sorted(int(j) for j in S))
    if nuisances is None:
        nuisances = pooled_nuisances(data, S, lam)
    if sigma is None:
        sigma = subset_bandwidth(data, S, seed)
    t_losses = env_losses_T(data, S, nuisances.pi, sigma, seed)
    y_losses = env_losses_Y(data, S, nuisances.mu0, nuisances.mu1, sigma, seed)
    entries = []
    for e, (tl, (y0, y1)) in enumerate(zip(t_losses, y_losses)):
        entries.append(LossEntry(S, "T", e, *tl))
        entries.append(LossEntry(S, "Y0", e, *y0))
        entries.append(LossEntry(S, "Y1", e, *y1))
    J_T = _aggregate([s for _, s in t_losses], mode)
    J_Y = _combine_Y(y_losses, mode)
    return combine(J_T, J_Y), entries


def objective(data: MultiEnvDataset, S: Sequence[int], mode: str = "max", seed: int = 0,
              lam: float = DEFAULT_LAMBDA, nuisances: Nuisances | None = None) -> Objective:
    """``min(J_T, J_Y)`` for subset ``S`` and the node attaining it."""
    return evaluate_subset(data, S, mode, seed, lam, nuisances)[0]


def objective_from_entries(entries: Sequence[LossEntry], mode: str = "max") -> Objective:
    by = {"T": [], "Y0": [], "Y1": []}
    for en in entries:
        by[en.node].append(en.studentized)
    J_Y = max(_aggregate(by["Y0"], mode), _aggregate(by["Y1"], mode))
    return combine(_aggregate(by["T"], mode), J_Y)


def format_subset(S: Sequence[int]) -> str:
    return ";".join(str(j) for j in S)


def parse_subset(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(tok) for tok in text.split(";")) if text else ()


@dataclass
class LossTable:
    """Per (subset, node variant, env) studentized statistics plus per-subset aggregates."""

    entries: list[LossEntry] = field(default_factory=list)
    scores: dict[tuple[int, ...], Objective] = field(default_factory=dict)
    errors: dict[tuple[int, ...], str] = field(default_factory=dict)
    mode: str = "max"

    def add(self, S, obj: Objective, entries=()):
        S = tuple(S)
        self.scores[S] = obj
        self.entries.extend(entries)

    def add_failure(self, S, reason: str):
        S = tuple(S)
        self.scores[S] = Objective(np.inf, np.inf, np.inf, "Y")
        self.errors[S] = reason

    def entries_for(self, S) -> list[LossEntry]:
        S = tuple(S)
        return [en for en in self.entries if en.subset == S]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subset", "node", "env", "statistic", "studentized"])
        for en in self.entries:
            w.writerow([format_subset(en.subset), en.node, en.env,
                        format(en.statistic, ".17g"), format(en.studentized, ".17g")])
        return buf.getvalue()
