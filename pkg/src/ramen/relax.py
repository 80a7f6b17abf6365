"""Differentiable subset selection with Gumbel-sigmoid gates.

Two gate vectors are trained by plain gradient descent: ``w_pi`` for the
treatment model and ``w_y`` shared by the two outcome-arm models. Each model
is a one-hidden-layer tanh network fed the gated covariates ``X * B(w)``
and fitted to its target by squared error. The gates descend the
environment-averaged absolute studentized cross U-statistic; the kernel
bandwidth is held constant when differentiating, the studentizing standard
error is not. After training, covariates with positive gate logits form
the candidate subsets, together with their union. Training is restarted a
few times and every candidate is scored with the exact combinatorial losses.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .invariance import SE_FLOOR, LossTable, evaluate_subset, split_halves
from .kernel import median_bandwidth
from .nuisance import DEFAULT_LAMBDA
from .scm import MultiEnvDataset, sigmoid
from .search import SelectionResult

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 700
    patience: int = 100
    lr_gate: float = 0.1
    lr_model: float = 0.1
    tau_init: float = 1.0
    alpha: float = 0.9
    anneal_every: int = 10
    tau_final: float = 0.1
    width: int = 32
    batch_size: int | None = 256
    bandwidth_cap: int = 512
    final_mode: str = "max"
    detach_se: bool = False
    model_loss: str = "mse"
    restarts: int = 5
    union_candidate: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("annealing rate alpha must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.tau_final <= self.tau_init:
            raise ValueError("need 0 < tau_final <= tau_init")
        if self.anneal_every < 1 or self.width < 1:
            raise ValueError("anneal_every and width must be positive")
        if self.batch_size is not None and self.batch_size < 8:
            raise ValueError("batch_size must be >= 8")
        if self.model_loss not in ("mse", "invariance"):
            raise ValueError("model_loss must be 'mse' or 'invariance'")
        if self.final_mode not in ("max", "mean"):
            raise ValueError("final_mode must be 'max' or 'mean'")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def tau_after(cfg: TrainConfig, anneal_events: int) -> float:
    return max(cfg.tau_final, cfg.tau_init * cfg.alpha ** anneal_events)


# ---------------------------------------------------------------------------
# Gates and model
# ---------------------------------------------------------------------------


def gumbel_noise(rng: np.random.Generator, dim: int) -> np.ndarray:
    """``G1 - G2`` for independent standard Gumbel draws (a Logistic(0, 1) variate)."""
    return rng.gumbel(size=dim) - rng.gumbel(size=dim)


def gumbel_gate_sample(w, tau: float, rng: np.random.Generator | None = None,
                       noise=None) -> np.ndarray:
    """Soft mask ``sigmoid((w + G1 - G2) / tau)``; pass ``noise`` to fix ``G1 - G2``."""
    w = np.asarray(w, dtype=float)
    if not tau > 0:
        raise ValueError("tau must be positive")
    if noise is None:
        noise = gumbel_noise(rng, w.shape[-1] if w.ndim else 1)
    return sigmoid((w + noise) / tau)


@dataclass
class MlpModel:
    """``f(z) = w2 . tanh(z W1 + b1) + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0

    @classmethod
    def init(cls, q: int, width: int, rng: np.random.Generator, bias: float = 0.0) -> "MlpModel":
        W1 = rng.standard_normal((q, width)) / math.sqrt(max(q, 1))
        w2 = 0.1 * rng.standard_normal(width) / math.sqrt(width)
        return cls(W1, np.zeros(width), w2, float(bias))

    @property
    def q(self) -> int:
        return self.W1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": np.array([self.b2])}

    def copy(self) -> "MlpModel":
        return MlpModel(self.W1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2))

    def apply_update(self, grads: dict[str, np.ndarray], lr: float):
        self.W1 -= lr * grads["W1"]
        self.b1 -= lr * grads["b1"]
        self.w2 -= lr * grads["w2"]
        self.b2 -= lr * float(grads["b2"][0])

    def forward(self, Z):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.q:
            raise ValueError(f"expected input with {self.q} columns, got shape {Z.shape}")
        A = np.tanh(Z @ self.W1 + self.b1)
        return A @ self.w2 + self.b2, (Z, A)

    def backward(self, cache, g_out):
        Z, A = cache
        g_pre = np.outer(g_out, self.w2) * (1.0 - A * A)
        grads = {
            "W1": Z.T @ g_pre,
            "b1": g_pre.sum(axis=0),
            "w2": A.T @ g_out,
            "b2": np.array([g_out.sum()]),
        }
        return grads, g_pre @ self.W1.T


def mlp_forward(model: MlpModel, Zw) -> np.ndarray:
    return model.forward(Zw)[0]


# ---------------------------------------------------------------------------
# Differentiable loss
# ---------------------------------------------------------------------------


class LossGrad(NamedTuple):
    loss: float
    stat: float
    se: float
    model_grads: dict
    gate_grad: np.ndarray


def gated_loss_and_grad(model: MlpModel, w, X, V, noise, tau: float, sigma: float,
                        split: tuple[np.ndarray, np.ndarray], se: float | None = None,
                        detach_se: bool = False, absolute: bool = True) -> LossGrad:
    """Studentized cross U-statistic of ``V - f(X * B(w))`` and its analytic gradient.

    ``sigma`` is a constant for differentiation. The standard error is
    differentiated through unless ``detach_se`` is set or a fixed ``se`` is
    passed, in which case it is treated as a constant.
    """
    w = np.asarray(w, dtype=float)
    B = sigmoid((w + noise) / tau)
    Z = X * B
    f, cache = model.forward(Z)
    r = V - f
    first, second = split
    m = len(first)
    ZA, ZB, rA, rB = Z[first], Z[second], r[first], r[second]
    d2 = (np.sum(ZA * ZA, 1)[:, None] + np.sum(ZB * ZB, 1)[None, :] - 2.0 * ZA @ ZB.T)
    K = np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma * sigma))
    u = K @ rB
    h = rA * u / m
    stat = float(h.mean())
    sd = float(h.std(ddof=1))
    if se is None and not detach_se and sd * math.sqrt(1.0 / m) > SE_FLOOR:
        se = sd / math.sqrt(m)
        # z = sqrt(m) mean(h) / sd(h)
        g_h = math.sqrt(m) * (1.0 / (m * sd) - stat * (h - stat) / ((m - 1) * sd ** 3))
    else:
        if se is None:
            se = sd / math.sqrt(m)
        g_h = np.full(m, 1.0 / (m * max(se, SE_FLOOR)))
    z = stat / max(se, SE_FLOOR)
    if absolute:
        # rank on |z| as the exact losses do; the sign of z flips the gradient
        g_h = g_h * (1.0 if z >= 0 else -1.0)
        loss = abs(z)
    else:
        loss = z

    # h_i = rA_i (K rB)_i / m
    a = g_h * rA / m
    g_r = np.zeros_like(r)
    g_r[first] = g_h * u / m
    g_r[second] = K.T @ a
    # through the kernel: dK_ij/dzA_i = -K_ij (zA_i - zB_j) / sigma^2
    M = a[:, None] * rB[None, :] * K
    inv_s2 = 1.0 / (sigma * sigma)
    g_Z = np.zeros_like(Z)
    g_Z[first] = -inv_s2 * (M.sum(axis=1)[:, None] * ZA - M @ ZB)
    g_Z[second] = -inv_s2 * (M.sum(axis=0)[:, None] * ZB - M.T @ ZA)
    # through the model: r = V - f
    model_grads, g_Z_model = model.backward(cache, -g_r)
    g_Z += g_Z_model
    g_B = np.sum(g_Z * X, axis=0)
    g_w = g_B * B * (1.0 - B) / tau
    return LossGrad(loss, stat, se, model_grads, g_w)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GateState:
    w_pi: np.ndarray
    w_y: np.ndarray
    theta_pi: MlpModel
    theta_y0: MlpModel
    theta_y1: MlpModel


@dataclass
class TrainTrace:
    epochs: list[int] = field(default_factory=list)
    taus: list[float] = field(default_factory=list)
    loss_T: list[float] = field(default_factory=list)
    loss_Y: list[float] = field(default_factory=list)

    def append(self, epoch, tau, lt, ly):
        self.epochs.append(epoch)
        self.taus.append(tau)
        self.loss_T.append(lt)
        self.loss_Y.append(ly)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["epoch", "tau", "loss_T", "loss_Y"])
        for row in zip(self.epochs, self.taus, self.loss_T, self.loss_Y):
            wr.writerow([row[0]] + [format(x, ".17g") for x in row[1:]])
        return buf.getvalue()


def _standardize(data: MultiEnvDataset):
    pooled = data.pooled()
    mx, sx = pooled.X.mean(0), pooled.X.std(0)
    sx[sx == 0] = 1.0
    my, sy = pooled.Y.mean(), pooled.Y.std()
    sy = sy if sy > 0 else 1.0
    return [((env.X - mx) / sx, env.T, (env.Y - my) / sy) for env in data.envs]


def _init_state(d, cfg, rng, t_mean):
    return GateState(
        w_pi=np.zeros(d),
        w_y=np.zeros(d),
        theta_pi=MlpModel.init(d, cfg.width, rng, bias=t_mean),
        theta_y0=MlpModel.init(d, cfg.width, rng),
        theta_y1=MlpModel.init(d, cfg.width, rng),
    )


def _batch(n, size, rng):
    if size is None or n <= size:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def _mse_grads(model: MlpModel, Z, V):
    f, cache = model.forward(Z)
    return model.backward(cache, -2.0 * (V - f) / len(V))[0]


def _seed(rng):
    return int(rng.integers(2 ** 31))


def _train(envs, cfg: TrainConfig, state: GateState, rng, trace: TrainTrace):
    d = state.w_pi.shape[0]
    n_env = len(envs)
    tau = cfg.tau_init
    best, since_best = np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        if epoch % cfg.anneal_every == 0:
            tau = max(cfg.tau_final, tau * cfg.alpha)
        g_wpi, g_wy = np.zeros(d), np.zeros(d)
        g_pi = {k: np.zeros_like(v) for k, v in state.theta_pi.params().items()}
        g_y = [{k: np.zeros_like(v) for k, v in m.params().items()}
               for m in (state.theta_y0, state.theta_y1)]
        J_pi = J_y = 0.0
        for X_all, T_all, Y_all in envs:
            idx = _batch(len(T_all), cfg.batch_size, rng)
            X, T, Y = X_all[idx], T_all[idx], Y_all[idx]

            noise = gumbel_noise(rng, d)
            B = sigmoid((state.w_pi + noise) / tau)
            sigma = median_bandwidth(X * B, cap=cfg.bandwidth_cap, seed=_seed(rng))
            lg = gated_loss_and_grad(state.theta_pi, state.w_pi, X, T, noise, tau, sigma,
                                     split_halves(len(T), _seed(rng)), detach_se=cfg.detach_se)
            J_pi += lg.loss / n_env
            g_wpi += lg.gate_grad / n_env
            mg = lg.model_grads if cfg.model_loss == "invariance" else _mse_grads(state.theta_pi, X * B, T)
            for k in g_pi:
                g_pi[k] += mg[k] / n_env

            noise = gumbel_noise(rng, d)
            B = sigmoid((state.w_y + noise) / tau)
            sigma = median_bandwidth(X * B, cap=cfg.bandwidth_cap, seed=_seed(rng))
            for t, model in ((0, state.theta_y0), (1, state.theta_y1)):
                rows = T == t
                if rows.sum() < 4:
                    continue
                lg = gated_loss_and_grad(model, state.w_y, X[rows], Y[rows], noise, tau, sigma,
                                         split_halves(int(rows.sum()), _seed(rng)),
                                         detach_se=cfg.detach_se)
                J_y += lg.loss / (2 * n_env)
                g_wy += lg.gate_grad / (2 * n_env)
                mg = (lg.model_grads if cfg.model_loss == "invariance"
                      else _mse_grads(model, X[rows] * B, Y[rows]))
                for k in g_y[t]:
                    g_y[t][k] += mg[k] / (2 * n_env)

        if not (np.isfinite(J_pi) and np.isfinite(J_y)):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        state.w_pi -= cfg.lr_gate * g_wpi
        state.w_y -= cfg.lr_gate * g_wy
        state.theta_pi.apply_update(g_pi, cfg.lr_model)
        state.theta_y0.apply_update(g_y[0], cfg.lr_model)
        state.theta_y1.apply_update(g_y[1], cfg.lr_model)
        params_ok = all(np.all(np.isfinite(a)) for a in (state.w_pi, state.w_y))
        if not params_ok:
            raise TrainingDivergedError(f"non-finite gate logits at epoch {epoch}")
        trace.append(epoch, tau, J_pi, J_y)

        monitored = J_pi + J_y
        if monitored < best:
            best, since_best = monitored, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.debug("early stop at epoch %d", epoch)
                break
    return state


def _pick(candidates):
    # smallest combined loss; ties to smaller, then lexicographically first subset
    return min(candidates, key=lambda c: (c[1].combined, len(c[0]), c[0]))


def _train_once(data, envs, cfg: TrainConfig, rng_seed, t_mean):
    run_cfg = cfg
    for attempt in range(2):
        rng = np.random.default_rng(rng_seed)
        trace = TrainTrace()
        state = _init_state(data.d, run_cfg, rng, t_mean)
        try:
            return _train(envs, run_cfg, state, rng, trace), trace, run_cfg
        except TrainingDivergedError as exc:
            if attempt == 1:
                raise TrainingDivergedError(f"training diverged twice: {exc}") from exc
            log.warning("%s; restarting with halved learning rates", exc)
            run_cfg = replace(run_cfg, lr_gate=run_cfg.lr_gate / 2, lr_model=run_cfg.lr_model / 2)


def gumbel_select(data: MultiEnvDataset, cfg: TrainConfig = TrainConfig(),
                  lam: float = DEFAULT_LAMBDA) -> SelectionResult:
    """Train both gate vectors, threshold at zero, and keep the best resulting subset.

    Covariates and outcome are standardized with pooled statistics before
    training. Training is repeated ``cfg.restarts`` times from independent
    initializations. Each run proposes ``S_T``, ``S_Y`` and (unless
    ``cfg.union_candidate`` is off) their union; every proposal is scored
    with the exact losses (evaluation seed ``cfg.seed``) and the lowest
    combined loss wins.
    A non-finite loss triggers one restart with halved learning rates.
    """
    if min(env.n for env in data.envs) < 8:
        raise ValueError("gumbel_select needs at least 8 rows per environment")
    envs = _standardize(data)
    t_mean = float(data.pooled().T.mean())
    runs = []
    for k in range(cfg.restarts):
        rng_seed = cfg.seed if k == 0 else np.random.SeedSequence([cfg.seed, k])
        state, trace, run_cfg = _train_once(data, envs, cfg, rng_seed, t_mean)
        S_T = tuple(int(i) for i in np.flatnonzero(state.w_pi > 0))
        S_Y = tuple(int(i) for i in np.flatnonzero(state.w_y > 0))
        runs.append((state, trace, run_cfg, S_T, S_Y))

    table = LossTable(mode=cfg.final_mode)
    candidates = {}
    for *_, S_T, S_Y in runs:
        pool = [S_T, S_Y]
        if cfg.union_candidate:
            # each gate often keeps a different part of the adjustment set
            pool.append(tuple(sorted(set(S_T) | set(S_Y))))
        for S in pool:
            if S in candidates:
                continue
            try:
                obj, entries = evaluate_subset(data, S, mode=cfg.final_mode, seed=cfg.seed, lam=lam)
            except (ValueError, np.linalg.LinAlgError) as exc:
                table.add_failure(S, str(exc))
                candidates[S] = table.scores[S]
                continue
            table.add(S, obj, entries)
            candidates[S] = obj
    best, obj = _pick(candidates.items())
    # report the first restart that produced the winner
    winner = next(k for k, r in enumerate(runs)
                  if best in (r[3], r[4], tuple(sorted(set(r[3]) | set(r[4])))))
    state, trace, run_cfg, S_T, S_Y = runs[winner]
    extra = {
        "S_T": list(S_T),
        "S_Y": list(S_Y),
        "w_pi": [float(x) for x in state.w_pi],
        "w_y": [float(x) for x in state.w_y],
        "epochs_run": len(trace.epochs),
        "restart": winner,
        "restart_subsets": [[list(r[3]), list(r[4])] for r in runs],
        "lr_gate": run_cfg.lr_gate,
        "lr_model": run_cfg.lr_model,
    }
    return SelectionResult(best, obj.node, table, "gumbel", cfg.seed, extra, trace)


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------

DEFAULT_GRID = {
    "lr": (0.001, 0.01, 0.1),
    "tau_init": (0.5, 0.8, 1.0),
    "alpha": (0.9, 0.95, 0.99),
}


def expand_grid(grid: dict[str, Sequence] | Sequence[dict], base: TrainConfig) -> list[TrainConfig]:
    """Grid as a dict of value lists (Cartesian product) or an explicit list of overrides.

    The key ``lr`` sets both ``lr_gate`` and ``lr_model``.
    """
    if isinstance(grid, dict):
        keys = list(grid)
        points = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    else:
        points = [dict(p) for p in grid]
    if not points:
        raise ValueError("hyperparameter grid is empty")
    out = []
    for p in points:
        if "lr" in p:
            lr = p.pop("lr")
            p.setdefault("lr_gate", lr)
            p.setdefault("lr_model", lr)
        if "tau_init" in p and p["tau_init"] < base.tau_final:
            p.setdefault("tau_final", p["tau_init"])
        out.append(replace(base, **p))
    return out


class SweepPoint(NamedTuple):
    config: TrainConfig
    loss: float
    result: SelectionResult | None


def sweep(data: MultiEnvDataset, grid=None, base: TrainConfig = TrainConfig(),
          lam: float = DEFAULT_LAMBDA) -> list[SweepPoint]:
    """Run ``gumbel_select`` at every grid point; failed points get ``inf`` loss."""
    points = []
    for cfg in expand_grid(DEFAULT_GRID if grid is None else grid, base):
        try:
            res = gumbel_select(data, cfg, lam)
            points.append(SweepPoint(cfg, res.score.combined, res))
        except (RuntimeError, ValueError) as exc:
            log.warning("grid point %s skipped: %s", cfg, exc)
            points.append(SweepPoint(cfg, np.inf, None))
    return points


def hyperparameter_sweep(data: MultiEnvDataset, grid=None, base: TrainConfig = TrainConfig(),
                         lam: float = DEFAULT_LAMBDA) -> TrainConfig:
    """Config whose trained subsets reach the lowest exact combined loss (first wins ties)."""
    points = sweep(data, grid, base, lam)
    best = min(range(len(points)), key=lambda i: points[i].loss)
    if not np.isfinite(points[best].loss):
        raise RuntimeError("every grid point failed")
    return points[best].config
