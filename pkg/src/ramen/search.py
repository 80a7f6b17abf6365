"""Exhaustive search over covariate subsets for the smallest invariance loss."""

from __future__ import annotations

import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb
from typing import Any, Sequence

import numpy as np

from .invariance import LossTable, Objective, evaluate_subset
from .nuisance import DEFAULT_LAMBDA
from .scm import MultiEnvDataset

log = logging.getLogger(__name__)

MAX_FULL_ENUMERATION = 12


def worker_count(n_jobs: int | None = None) -> int:
    """Workers to use: explicit ``n_jobs``, else ``RAMEN_THREADS``, else all cores."""
    if n_jobs is None:
        env = os.environ.get("RAMEN_THREADS")
        n_jobs = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(n_jobs))


@dataclass
class SelectionResult:
    subset: tuple[int, ...]
    node: str
    loss_table: LossTable
    method: str
    seed: int = 0
    extra: dict[str, Any] = field(default_factory=dict)
    trace: Any = None

    @property
    def score(self) -> Objective:
        return self.loss_table.scores[self.subset]

    def to_json(self) -> str:
        sc = self.score
        payload = {
            "subset": list(self.subset),
            "node": self.node,
            "method": self.method,
            "losses": {"J_T": sc.J_T, "J_Y": sc.J_Y, "combined": sc.combined,
                       "mode": self.loss_table.mode},
            "seed": self.seed,
        }
        payload.update(self.extra)
        return json.dumps(payload, indent=2, sort_keys=False)


def enumerate_subsets(d: int, max_size: int | None = None):
    """All subsets of ``range(d)`` ordered by cardinality, then lexicographically."""
    top = d if max_size is None else min(d, max_size)
    for k in range(top + 1):
        yield from itertools.combinations(range(d), k)


def n_subsets(d: int, max_size: int | None = None) -> int:
    top = d if max_size is None else min(d, max_size)
    return sum(comb(d, k) for k in range(top + 1))


def _evaluate(data, S, mode, seed, lam):
    try:
        obj, entries = evaluate_subset(data, S, mode=mode, seed=seed, lam=lam)
        return S, obj, entries, None
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.warning("subset %s scored +inf: %s", S, exc)
        return S, None, [], str(exc)


def combinatorial_select(data: MultiEnvDataset, max_size: int | None = None, seed: int = 0,
                         lam: float = DEFAULT_LAMBDA, mode: str = "max",
                         n_jobs: int | None = None) -> SelectionResult:
    """Evaluate every candidate subset and return the minimizer of ``min(J_T, J_Y)``.

    Losses are compared on absolute studentized values. Ties go to the
    smaller subset, then to the lexicographically first one, which is the
    enumeration order. Subsets whose evaluation fails score ``+inf``.
    """
    d = data.d
    if max_size is None and d > MAX_FULL_ENUMERATION:
        raise ValueError(
            f"d={d} needs 2^{d}={2 ** d} subset evaluations; pass max_size "
            f"(full enumeration is limited to d <= {MAX_FULL_ENUMERATION})"
        )
    subsets = list(enumerate_subsets(d, max_size))
    workers = min(worker_count(n_jobs), len(subsets))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda S: _evaluate(data, S, mode, seed, lam), subsets))
    else:
        results = [_evaluate(data, S, mode, seed, lam) for S in subsets]

    table = LossTable(mode=mode)
    best, best_loss = None, np.inf
    for S, obj, entries, err in results:
        if err is not None:
            table.add_failure(S, err)
            continue
        table.add(S, obj, entries)
        if obj.combined < best_loss:
            best, best_loss = S, obj.combined
    if best is None:
        raise RuntimeError("every candidate subset failed to evaluate: "
                           + "; ".join(sorted(set(table.errors.values()))))
    return SelectionResult(best, table.scores[best].node, table, "combinatorial", seed,
                           {"n_evaluated": len(subsets)})
