"""Portfolio losses, empirical CVaR in dual form, and the training loop."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyBatch, EmptyScenario, InsufficientHistory, PreconditionFailed
from .market import Dataset, ScenarioBatch
from .model import Params, SitConfig, forward, gate_value, init_params


@dataclass(frozen=True)
class CvarValue:
    value: float
    nu: float


def cvar(losses, alpha: float) -> CvarValue:
    """Empirical CVaR via the dual: nu + sum (L - nu)^+ / ((1 - alpha) K).

    nu is the lower empirical alpha-quantile L_(ceil(alpha K)), which is a
    minimiser of the dual for a discrete sample.
    """
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    if losses.size == 0:
        raise EmptyScenario("cvar of an empty loss sample")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    k = ad.lower_quantile_index(losses.size, alpha)
    nu = float(np.sort(losses)[k])
    tail = np.maximum(losses - nu, 0.0).sum()
    return CvarValue(nu + tail / ((1.0 - alpha) * losses.size), nu)


def dual_objective(losses, alpha: float, nu: float) -> float:
    """The dual inner objective at a given nu (minimising it gives CVaR)."""
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    return nu + np.maximum(losses - nu, 0.0).sum() / ((1.0 - alpha) * losses.size)


def scenario_losses(weights: Tensor, returns) -> Tensor:
    """L^(k) = -w^(k) . r_(t+k); weights and returns are (N, K, d)."""
    return -(weights * Tensor(np.asarray(returns, dtype=np.float64))).sum(axis=-1)


def cvar_tensor(losses: Tensor, alpha: float) -> Tensor:
    """Row-wise dual CVaR of (N, K) losses with nu held constant."""
    nu = ad.quantile_stop_grad(losses, alpha, axis=-1)
    k = losses.shape[-1]
    return nu.reshape(-1) + ad.relu(losses - nu).sum(axis=-1) / ((1.0 - alpha) * k)


def batch_objective(batch: ScenarioBatch, params: Params, config: SitConfig, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Mean scenario CVaR, or the mean loss for the risk-neutral variant."""
    if len(batch) == 0:
        raise EmptyBatch("objective of an empty batch")
    out = forward(batch.features, params, config, train=train, rng=rng)
    losses = scenario_losses(out.weights, batch.returns)
    if config.variant == "no_cvar":
        return losses.mean()
    return cvar_tensor(losses, config.cvar_alpha).mean()


# --- discrete distributions --------------------------------------------------------------
def discrete_cvar(p, x, alpha: float) -> float:
    """Exact CVaR_alpha of a finite distribution by tail enumeration.

    The worst outcomes are taken in decreasing order until a probability
    mass of 1 - alpha has been collected; the last one is taken partially.
    """
    p, x = np.asarray(p, dtype=np.float64), np.asarray(x, dtype=np.float64)
    mass, total = 1.0 - alpha, 0.0
    remaining = mass
    for s in np.argsort(-x, kind="stable"):
        take = min(p[s], remaining)
        total += take * x[s]
        remaining -= take
        if remaining <= 0:
            break
    return total / mass


def _check_dominance_preconditions(p, x, y, alpha) -> None:
    if not (p.ndim == x.ndim == y.ndim == 1 and len(p) == len(x) == len(y) >= 2):
        raise PreconditionFailed("p, X, Y must be vectors of one common length >= 2")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise PreconditionFailed("p must be a probability vector")
    if not 0 < alpha < 1:
        raise PreconditionFailed("alpha must lie in (0, 1)")
    if not np.all(x[0] > x[1:]):
        raise PreconditionFailed("state 0 must be the unique worst state of X")
    if not np.all(y < x):
        raise PreconditionFailed("Y must be strictly below X in every state")
    if not 1.0 - alpha < p[0]:
        raise PreconditionFailed("the crash probability must exceed 1 - alpha")


def dominance_gap(p, x, y, alpha: float) -> tuple[float, float]:
    """(CVaR(X) - CVaR(Y), min_s (X_s - Y_s)) after checking the preconditions."""
    p, x, y = (np.asarray(v, dtype=np.float64) for v in (p, x, y))
    _check_dominance_preconditions(p, x, y, alpha)
    return discrete_cvar(p, x, alpha) - discrete_cvar(p, y, alpha), float(np.min(x - y))


def cvar_dominance_check(p, x, y, alpha: float) -> bool:
    """Whether the hedged losses Y beat X in CVaR by at least min_s (X_s - Y_s)."""
    gap, l_min = dominance_gap(p, x, y, alpha)
    return gap >= l_min - 1e-12 * max(1.0, abs(l_min))


# --- optimisation ---------------------------------------------------------------------
class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:  # unused by this variant, e.g. the gate without bias
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad**2
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10


@dataclass
class EpochRecord:
    epoch: int
    train_objective: float
    val_objective: float
    gamma: float
    wall_time: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.train_objective:.10g}\t{self.val_objective:.10g}"
                f"\t{self.gamma:.10g}\t{self.wall_time:.3f}")


@dataclass
class TrainResult:
    params: Params
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.log)


def _gamma(params: Params, config: SitConfig) -> float:
    g = gate_value(params, config)
    return math.nan if g is None else float(g.item())


def evaluate(batch: ScenarioBatch, params: Params, config: SitConfig, chunk: int = 256) -> float:
    """Objective over a whole batch without dropout or gradient tracking."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(batch), chunk):
            part = batch[start:start + chunk]
            total += batch_objective(part, params, config).item() * len(part)
    return total / len(batch)


def train(dataset: Dataset, config: SitConfig, seed: int, settings: TrainSettings | None = None,
          log: TextIO | None = None) -> TrainResult:
    """Adam on the batch objective with early stopping on validation.

    Three independent streams are spawned from ``seed``: parameter
    initialisation, minibatch shuffling and dropout masks.  Returns the
    parameters of the best validation epoch.
    """
    settings = settings or TrainSettings()
    if len(dataset.train) == 0 or len(dataset.val) == 0:
        raise InsufficientHistory("training needs at least one train and one validation scenario")
    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(seed).spawn(3)
    params = init_params(config, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.Generator(np.random.Philox(drop_seq))
    opt = Adam(params, settings.lr)
    result = TrainResult(params.copy())
    best, stale = math.inf, 0
    n = len(dataset.train)
    for epoch in range(1, settings.max_epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        running = 0.0
        for lo in range(0, n, settings.batch_size):
            batch = dataset.train[order[lo:lo + settings.batch_size]]
            params.zero_grad()
            obj = batch_objective(batch, params, config, train=True, rng=drop_rng)
            obj.backward()
            opt.step()
            running += obj.item() * len(batch)
        val = evaluate(dataset.val, params, config)
        record = EpochRecord(epoch, running / n, val, _gamma(params, config), time.perf_counter() - start)
        result.log.append(record)
        if log is not None:
            log.write(record.line() + "\n")
            log.flush()
        if val < best:
            best, stale = val, 0
            result.params, result.best_epoch = params.copy(), epoch
        else:
            stale += 1
            if stale >= settings.patience:
                break
    return result
