"""Multi-environment structural causal model simulators with known ATE.

Two families of data-generating processes are provided:

* the small known DAG with a post-treatment covariate ``X_c`` (collider,
  descendant of ``Y`` or independent noise) and an environment-level latent
  ``U`` that shifts the noise of ``X_p``, ``X_c`` and, depending on the
  scenario, of ``T`` and/or ``Y``;
* random Erdos-Renyi DAGs with linear-Gaussian equations, a Bernoulli
  treatment and per-environment mean/variance shifts on every node except
  ``T`` and ``Y``.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

INVARIANCES = ("TY", "Y_only", "T_only", "none")
POST_KINDS = {"collider": (1.0, 1.0), "descendant": (0.0, 1.0), "noise": (0.0, 0.0)}
ROLES = ("covariate", "unobserved", "treatment", "outcome", "post_treatment")
VARIANCE_FLOOR = 0.25


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvData:
    """One environment: covariates ``X`` (n x d), binary ``T`` and outcome ``Y``."""

    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class MultiEnvDataset:
    envs: list[EnvData]
    covariate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.envs:
            raise ValueError("dataset has no environments")
        cleaned = []
        d = None
        for e, env in enumerate(self.envs):
            X = np.asarray(env.X, dtype=float)
            if X.ndim == 1:
                X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
            T = np.asarray(env.T, dtype=float).ravel()
            Y = np.asarray(env.Y, dtype=float).ravel()
            if X.ndim != 2:
                raise ValueError(f"env {e}: X must be 2-D")
            if d is None:
                d = X.shape[1]
            if X.shape[1] != d:
                raise ValueError(f"env {e}: has {X.shape[1]} covariates, expected {d}")
            if not (X.shape[0] == T.shape[0] == Y.shape[0]):
                raise ValueError(f"env {e}: X, T, Y row counts differ")
            if X.shape[0] < 4:
                raise ValueError(f"env {e}: needs at least 4 rows, got {X.shape[0]}")
            if not np.all((T == 0.0) | (T == 1.0)):
                raise ValueError(f"env {e}: treatment must be binary 0/1")
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
                raise ValueError(f"env {e}: NaN or Inf entries")
            cleaned.append(EnvData(X, T, Y))
        self.envs = cleaned
        if not self.covariate_names:
            self.covariate_names = [f"x{j}" for j in range(d)]
        if len(self.covariate_names) != d:
            raise ValueError("covariate_names length does not match d")

    @property
    def d(self) -> int:
        return self.envs[0].X.shape[1]

    @property
    def n_env(self) -> int:
        return len(self.envs)

    def pooled(self) -> EnvData:
        return EnvData(
            np.vstack([e.X for e in self.envs]),
            np.concatenate([e.T for e in self.envs]),
            np.concatenate([e.Y for e in self.envs]),
        )


# ---------------------------------------------------------------------------
# Known DAG with a post-treatment covariate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnownDagScenario:
    """Which invariance holds and what kind of post-treatment covariate is appended.

    ``d`` counts observed covariates: ``d - 1`` parents ``X_p`` plus ``X_c``.
    """

    invariance: str = "TY"
    post_kind: str = "collider"
    d: int = 5

    def __post_init__(self):
        if self.invariance not in INVARIANCES:
            raise ValueError(f"invariance must be one of {INVARIANCES}, got {self.invariance!r}")
        if self.post_kind not in POST_KINDS:
            raise ValueError(f"post_kind must be one of {tuple(POST_KINDS)}, got {self.post_kind!r}")
        if self.d < 2:
            raise ValueError("d must be >= 2")

    @property
    def unobserved_dim(self) -> int:
        return self.d + 1

    @property
    def parent_columns(self) -> tuple[int, ...]:
        return tuple(range(self.d - 1))

    @property
    def post_column(self) -> int:
        return self.d - 1

    @property
    def t_invariant(self) -> bool:
        return self.invariance in ("TY", "T_only")

    @property
    def y_invariant(self) -> bool:
        return self.invariance in ("TY", "Y_only")


def all_known_scenarios(d: int = 5) -> list[KnownDagScenario]:
    return [KnownDagScenario(inv, post, d) for inv in INVARIANCES for post in POST_KINDS]


def _sample_post_treatment(scenario, n, n_env, rng, u_scale, variance):
    d = scenario.d
    a, b = POST_KINDS[scenario.post_kind]
    beta_t = rng.standard_normal(d - 1)
    beta_y = rng.standard_normal(d - 1)
    envs = []
    for _ in range(n_env):
        # U is drawn once per environment; it sets the noise laws of that environment.
        U = u_scale * rng.standard_normal(d + 1)
        Xp = U[: d - 1] + np.sqrt(variance(U[: d - 1])) * rng.standard_normal((n, d - 1))
        if scenario.t_invariant:
            eps_t = rng.standard_normal(n)
        else:
            eps_t = U[d - 1] + np.sqrt(variance(U[d - 1])) * rng.standard_normal(n)
        T = (rng.random(n) < sigmoid(Xp @ beta_t + eps_t)).astype(float)
        if scenario.y_invariant:
            eps_y = rng.standard_normal(n)
        else:
            eps_y = U[d - 1] + np.sqrt(variance(U[d - 1])) * rng.standard_normal(n)
        Y = T + Xp @ beta_y + eps_y
        eps_c = U[d] + np.sqrt(variance(U[d])) * rng.standard_normal(n)
        Xc = a * T + b * Y + eps_c
        envs.append(EnvData(np.column_stack([Xp, Xc]), T, Y))
    names = [f"xp{i}" for i in range(d - 1)] + ["xc"]
    return MultiEnvDataset(envs, names)


def _check_sizes(n, n_env):
    if n < 10:
        raise ValueError(f"n must be >= 10, got {n}")
    if n_env < 1:
        raise ValueError(f"n_env must be positive, got {n_env}")


def sample_known_dag(scenario: KnownDagScenario, n: int, n_env: int, seed: int):
    """Draw ``n_env`` environments of ``n`` rows from the known-DAG example.

    Noise laws ``N(U_i, U_i^2)`` have their variance floored at 0.25 so that
    ``U_i = 0`` does not produce a point mass.

    Returns
    -------
    (MultiEnvDataset, np.ndarray)
        The data and the per-environment true ATE (identically 1).
    """
    _check_sizes(n, n_env)
    rng = np.random.default_rng(seed)
    data = _sample_post_treatment(
        scenario, n, n_env, rng, u_scale=1.0,
        variance=lambda u: np.maximum(np.square(u), VARIANCE_FLOOR),
    )
    return data, np.ones(n_env)


def sample_heterogeneity(scenario: KnownDagScenario, epsilon: float, n: int, n_env: int, seed: int):
    """Known-DAG variant where ``U ~ N(0, epsilon^2 I)`` controls heterogeneity.

    Noise variances are ``0.5 + U_i^2``. With ``epsilon = 0`` every environment
    has the same distribution.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    _check_sizes(n, n_env)
    rng = np.random.default_rng(seed)
    data = _sample_post_treatment(
        scenario, n, n_env, rng, u_scale=float(epsilon),
        variance=lambda u: 0.5 + np.square(u),
    )
    return data, np.ones(n_env)


# ---------------------------------------------------------------------------
# Random DAGs
# ---------------------------------------------------------------------------


class RejectionBudgetExceeded(RuntimeError):
    pass


@dataclass
class DagSpec:
    """A DAG over ``p`` nodes with a role per node and a weight per edge."""

    roles: list[str]
    edges: list[tuple[int, int]]
    weights: list[float]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.edges = [(int(u), int(v)) for u, v in self.edges]
        self.weights = [float(w) for w in self.weights]
        if len(self.edges) != len(self.weights):
            raise ValueError("edges and weights must have equal length")
        for r in self.roles:
            if r not in ROLES:
                raise ValueError(f"unknown role {r!r}")
        for u, v in self.edges:
            if not (0 <= u < self.p and 0 <= v < self.p) or u == v:
                raise ValueError(f"invalid edge {u}->{v}")
        if self.roles.count("treatment") != 1 or self.roles.count("outcome") != 1:
            raise ValueError("exactly one treatment and one outcome node required")
        if not self.names:
            self.names = [self._default_name(j) for j in range(self.p)]
        self.topological_order()
        if self.treatment not in self.ancestors(self.outcome):
            raise ValueError("treatment must be an ancestor of the outcome")

    def _default_name(self, j):
        return {"treatment": "T", "outcome": "Y"}.get(self.roles[j], f"z{j}")

    @property
    def p(self) -> int:
        return len(self.roles)

    @property
    def treatment(self) -> int:
        return self.roles.index("treatment")

    @property
    def outcome(self) -> int:
        return self.roles.index("outcome")

    def parents(self, j: int) -> list[int]:
        return [u for u, v in self.edges if v == j]

    def children(self, j: int) -> list[int]:
        return [v for u, v in self.edges if u == j]

    def weight(self, u: int, v: int) -> float:
        for (a, b), w in zip(self.edges, self.weights):
            if (a, b) == (u, v):
                return w
        return 0.0

    def topological_order(self) -> list[int]:
        indeg = [0] * self.p
        for _, v in self.edges:
            indeg[v] += 1
        queue = deque(j for j in range(self.p) if indeg[j] == 0)
        order = []
        while queue:
            u = queue.popleft()
            order.append(u)
            for v in self.children(u):
                indeg[v] -= 1
                if indeg[v] == 0:
                    queue.append(v)
        if len(order) != self.p:
            raise ValueError("graph contains a cycle")
        return order

    def ancestors(self, j: int) -> set[int]:
        return _reach(j, self.parents)

    def descendants(self, j: int) -> set[int]:
        return _reach(j, self.children)

    def mediators(self) -> set[int]:
        t, y = self.treatment, self.outcome
        return (self.descendants(t) & self.ancestors(y)) - {t, y}

    @property
    def observed(self) -> list[int]:
        """Node indices emitted as covariate columns, in index order."""
        return [j for j, r in enumerate(self.roles) if r in ("covariate", "post_treatment")]

    def to_json(self) -> str:
        payload = {
            "nodes": [{"name": nm, "role": r} for nm, r in zip(self.names, self.roles)],
            "edges": [
                {"parent": u, "child": v, "weight": w} for (u, v), w in zip(self.edges, self.weights)
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DagSpec":
        payload = json.loads(text)
        nodes = payload["nodes"]
        edges = payload["edges"]
        return cls(
            roles=[nd["role"] for nd in nodes],
            edges=[(e["parent"], e["child"]) for e in edges],
            weights=[e["weight"] for e in edges],
            names=[nd["name"] for nd in nodes],
        )


def _reach(start, step):
    seen = set()
    stack = list(step(start))
    while stack:
        u = stack.pop()
        if u not in seen:
            seen.add(u)
            stack.extend(step(u))
    return seen


def erdos_renyi_dag(p: int, density: float, rng: np.random.Generator):
    """Sample an ER DAG: a random node order and each forward pair kept w.p. ``density``.

    Returns ``(edges, weights)`` with ``N(0, 1)`` weights.
    """
    order = rng.permutation(p)
    edges = []
    for i, j in itertools.combinations(range(p), 2):
        if rng.random() < density:
            edges.append((int(order[i]), int(order[j])))
    weights = rng.standard_normal(len(edges)).tolist()
    return edges, weights


def _candidate_pairs(p, edges):
    parents = {j: [] for j in range(p)}
    children = {j: [] for j in range(p)}
    for u, v in edges:
        parents[v].append(u)
        children[u].append(v)
    anc = {j: _reach(j, parents.__getitem__) for j in range(p)}
    desc = {j: _reach(j, children.__getitem__) for j in range(p)}
    ok, n_mediated, n_unconfounded = [], 0, 0
    for t, y in edges:
        if (desc[t] & anc[y]) - {t, y}:
            n_mediated += 1
            continue
        # A confounder reaches Y without passing through T.
        anc_y_wo_t = _reach(y, lambda j: [u for u in parents[j] if u != t])
        if not (anc[t] & anc_y_wo_t):
            n_unconfounded += 1
            continue
        ok.append((t, y))
    return ok, n_mediated, n_unconfounded


def sample_random_dag(p: int, density: float, seed: int, invariance: str = "TY",
                      max_attempts: int = 10_000) -> DagSpec:
    """Rejection-sample a random DAG satisfying the no-mediator and confounding constraints.

    Each attempt draws an ER DAG over ``p`` nodes and looks for an edge
    ``T -> Y`` with no observed mediator and at least one common cause. An
    extra node ``X_bad = Y + T + noise`` is appended and the non-shared
    parents of the non-invariant node are marked unobserved.
    """
    if p < 4:
        raise ValueError("p must be >= 4")
    if not 0.0 <= density < 1.0:
        raise ValueError("density must lie in [0, 1)")
    if invariance not in ("TY", "Y_only", "T_only"):
        raise ValueError("invariance must be TY, Y_only or T_only")
    rng = np.random.default_rng(seed)
    n_mediated = n_unconfounded = 0
    for _ in range(max_attempts):
        edges, weights = erdos_renyi_dag(p, density, rng)
        pairs, med, unc = _candidate_pairs(p, edges)
        if not pairs:
            n_mediated += med
            n_unconfounded += unc + (1 if not edges else 0)
            continue
        t, y = pairs[rng.integers(len(pairs))]
        roles = ["covariate"] * p + ["post_treatment"]
        roles[t], roles[y] = "treatment", "outcome"
        pa_t = {u for u, v in edges if v == t}
        pa_y = {u for u, v in edges if v == y} - {t}
        hidden = {"TY": set(), "Y_only": pa_t - pa_y, "T_only": pa_y - pa_t}[invariance]
        for j in hidden:
            roles[j] = "unobserved"
        edges = edges + [(y, p), (t, p)]
        weights = weights + [1.0, 1.0]
        names = [f"z{j}" for j in range(p)] + ["x_bad"]
        names[t], names[y] = "T", "Y"
        return DagSpec(roles, edges, weights, names)
    if n_unconfounded >= n_mediated:
        reason = "no confounder of (T, Y)"
    else:
        reason = "observed mediator between T and Y"
    raise RejectionBudgetExceeded(
        f"no valid DAG after {max_attempts} attempts; most frequent violation: {reason} "
        f"(mediator rejections={n_mediated}, no-confounder rejections={n_unconfounded})"
    )


# ---------------------------------------------------------------------------
# Environment shifts and linear SCM sampling
# ---------------------------------------------------------------------------


@dataclass
class ShiftSpec:
    """Per-environment, per-node additive noise mean and noise-variance multiplier."""

    env_count: int
    mean_shift: np.ndarray
    var_shift: np.ndarray
    epsilon: float = 1.0

    def __post_init__(self):
        self.mean_shift = np.atleast_2d(np.asarray(self.mean_shift, dtype=float))
        self.var_shift = np.atleast_2d(np.asarray(self.var_shift, dtype=float))
        if self.env_count < 2:
            raise ValueError("env_count must be >= 2")
        if self.mean_shift.shape != self.var_shift.shape or self.mean_shift.shape[0] != self.env_count:
            raise ValueError("shift arrays must both have shape (env_count, p)")
        if np.any(self.var_shift <= 0) or not np.all(np.isfinite(self.var_shift)):
            raise ValueError("variance multipliers must be strictly positive")


def make_shift_spec(dag: DagSpec, env_count: int, epsilon: float = 1.0, seed: int = 0,
                    invariant_nodes: Sequence[int] | None = None) -> ShiftSpec:
    """Random shifts: mean ``Uniform(-2, 2) * epsilon`` and variance ``Uniform(0.5, 1.5) ** epsilon``.

    ``invariant_nodes`` (default: ``T`` and ``Y``) receive no shift.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    rng = np.random.default_rng(seed)
    mean = rng.uniform(-2.0, 2.0, size=(env_count, dag.p)) * epsilon
    var = rng.uniform(0.5, 1.5, size=(env_count, dag.p)) ** epsilon
    if invariant_nodes is None:
        invariant_nodes = (dag.treatment, dag.outcome)
    for j in invariant_nodes:
        mean[:, j] = 0.0
        var[:, j] = 1.0
    return ShiftSpec(env_count, mean, var, epsilon)


def _simulate_env(dag, order, parent_w, mean, var, n, rng, do_t=None):
    Z = np.zeros((n, dag.p))
    t_node = dag.treatment
    for j in order:
        lin = np.zeros(n)
        for u, w in parent_w[j]:
            lin += w * Z[:, u]
        noise = mean[j] + np.sqrt(var[j]) * rng.standard_normal(n)
        if j == t_node:
            if do_t is None:
                Z[:, j] = (rng.random(n) < sigmoid(lin + noise)).astype(float)
            else:
                Z[:, j] = do_t
        else:
            Z[:, j] = lin + noise
    return Z


def sample_scm(dag: DagSpec, shifts: ShiftSpec, n: int, seed: int) -> MultiEnvDataset:
    """Sample every environment of a linear SCM; unobserved nodes are not emitted."""
    order = dag.topological_order()
    if shifts.mean_shift.shape[1] != dag.p:
        raise ValueError(f"shift spec covers {shifts.mean_shift.shape[1]} nodes, DAG has {dag.p}")
    if n < 4:
        raise ValueError("n must be >= 4")
    parent_w = {j: [] for j in range(dag.p)}
    for (u, v), w in zip(dag.edges, dag.weights):
        parent_w[v].append((u, w))
    rng = np.random.default_rng(seed)
    cols = dag.observed
    envs = []
    for e in range(shifts.env_count):
        Z = _simulate_env(dag, order, parent_w, shifts.mean_shift[e], shifts.var_shift[e], n, rng)
        envs.append(EnvData(Z[:, cols], Z[:, dag.treatment], Z[:, dag.outcome]))
    return MultiEnvDataset(envs, [dag.names[j] for j in cols])


def true_ate(dag: DagSpec, n_env: int = 1) -> np.ndarray:
    """ATE per environment: the ``T -> Y`` coefficient (Y's equation is linear and additive).

    Raises if ``T`` and ``Y`` are linked through a mediator, since then the
    total effect differs from the direct edge.
    """
    med = dag.mediators()
    if med:
        raise ValueError(f"mediators {sorted(med)} between T and Y; total effect != direct edge")
    return np.full(n_env, dag.weight(dag.treatment, dag.outcome))


def do_intervention_ate(dag: DagSpec, shifts: ShiftSpec | None, env: int = 0,
                        n: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo ``E[Y | do(T=1)] - E[Y | do(T=0)]`` with common random numbers.

    Returns ``(estimate, standard_error)``.
    """
    order = dag.topological_order()
    parent_w = {j: [] for j in range(dag.p)}
    for (u, v), w in zip(dag.edges, dag.weights):
        parent_w[v].append((u, w))
    if shifts is None:
        mean, var = np.zeros(dag.p), np.ones(dag.p)
    else:
        mean, var = shifts.mean_shift[env], shifts.var_shift[env]
    y1 = _simulate_env(dag, order, parent_w, mean, var, n, np.random.default_rng(seed), do_t=1.0)
    y0 = _simulate_env(dag, order, parent_w, mean, var, n, np.random.default_rng(seed), do_t=0.0)
    diff = y1[:, dag.outcome] - y0[:, dag.outcome]
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n))
