"""Cost-aware rolling backtests, ablations and temperature/cost sweeps.

Time is measured in rebalance periods of P panel rows.  A decision at row
``t`` fixes target weights for the next periods; each period the portfolio
is traded from its drifted weights back to the target, paying a one-way
proportional fee on the traded amount.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .autodiff import no_grad
from .baselines import CovEstimate, cvar_opt, ewp, gmv, hrp
from .errors import InsufficientHistory, InvalidConfig, StrategyViolation
from .market import Dataset, PricePanel, features_at
from .model import VARIANTS, Params, SitConfig, allocation_weights, forward
from .objective import TrainSettings, train

SIMPLEX_TOL = 1e-6
DEFAULT_TAUS = (0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)
DEFAULT_COSTS = (0.0, 5.0, 10.0)


@dataclass(frozen=True)
class CostModel:
    c_bps: float = 0.0

    def __post_init__(self):
        if not self.c_bps >= 0:
            raise InvalidConfig(f"cost must be >= 0 bps, got {self.c_bps}")

    @property
    def rate(self) -> float:
        return self.c_bps * 1e-4


@dataclass(frozen=True)
class Metrics:
    sharpe: float | None
    sortino: float | None
    mdd: float
    wealth: float


def metrics(net_returns) -> Metrics:
    """Per-period Sharpe and Sortino (zero risk-free rate), max drawdown, wealth.

    Undefined ratios (zero deviation) are reported as None.
    """
    r = np.asarray(net_returns, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise InsufficientHistory("metrics need at least 2 periods")
    mean, std = r.mean(), r.std()
    downside = math.sqrt(np.mean(np.minimum(r, 0.0) ** 2))
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + r)])
    peak = np.maximum.accumulate(wealth)
    return Metrics(
        sharpe=float(mean / std) if std > 0 else None,
        sortino=float(mean / downside) if downside > 0 else None,
        mdd=float(np.max(1.0 - wealth / peak)),
        wealth=float(np.prod(1.0 + r)),
    )


@dataclass
class BacktestReport:
    weights: np.ndarray  # (n, d) target weights held over each period
    gross_returns: np.ndarray
    net_returns: np.ndarray
    turnover: np.ndarray  # per period
    cost: CostModel
    sharpe: float | None
    sortino: float | None
    mdd: float
    final_wealth: float
    cost_drag: float
    periods_per_year: float | None = None
    dates: np.ndarray | None = None  # start date of each period
    meta: dict = field(default_factory=dict)

    def _annualize(self, x):
        if x is None or self.periods_per_year is None:
            return None
        return x * math.sqrt(self.periods_per_year)

    @property
    def sharpe_annualized(self) -> float | None:
        return self._annualize(self.sharpe)

    @property
    def sortino_annualized(self) -> float | None:
        return self._annualize(self.sortino)

    def to_json(self) -> dict:
        return {
            **self.meta,
            "c_bps": self.cost.c_bps,
            "n_periods": int(len(self.net_returns)),
            "sharpe": self.sharpe,
            "sortino": self.sortino,
            "sharpe_annualized": self.sharpe_annualized,
            "sortino_annualized": self.sortino_annualized,
            "mdd": self.mdd,
            "final_wealth": self.final_wealth,
            "turnover": float(self.turnover.sum()),
            "cost_drag": self.cost_drag,
            "dates": None if self.dates is None else [str(d) for d in self.dates],
            "net_returns": self.net_returns.tolist(),
            "turnover_per_period": self.turnover.tolist(),
            "weights": self.weights.tolist(),
        }


def check_simplex(weights: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    w = np.asarray(weights)
    if not np.all(np.isfinite(w)):
        raise StrategyViolation("weights contain non-finite values")
    if np.any(w < -tol):
        raise StrategyViolation(f"negative weight {w.min():.3g}")
    worst = np.max(np.abs(w.sum(axis=-1) - 1.0))
    if worst > tol:
        raise StrategyViolation(f"weights sum off 1 by {worst:.3g}")


def run_fixed(weights, period_returns, cost: CostModel, periods_per_year: float | None = None,
              dates=None, meta: dict | None = None) -> BacktestReport:
    """Account a given weight trajectory against realized period returns.

    The book starts in cash, so the first allocation trades a full unit.
    """
    w = np.asarray(weights, dtype=np.float64)
    r = np.asarray(period_returns, dtype=np.float64)
    if w.shape != r.shape or w.ndim != 2:
        raise StrategyViolation(f"weights {w.shape} and returns {r.shape} must both be (periods, assets)")
    check_simplex(w)
    n = len(w)
    turnover = np.empty(n)
    held = np.zeros(w.shape[1])
    gross = np.einsum("td,td->t", w, r)
    for t in range(n):
        turnover[t] = np.abs(w[t] - held).sum()
        held = w[t] * (1.0 + r[t]) / (1.0 + gross[t])
    fees = cost.rate * turnover
    net = gross - fees
    m = metrics(net)
    return BacktestReport(w, gross, net, turnover, cost, m.sharpe, m.sortino, m.mdd, m.wealth,
                          float(fees.sum()), periods_per_year, dates, dict(meta or {}))


# --- strategies ----------------------------------------------------------------------
class Strategy(Protocol):
    name: str

    def decide(self, history: PricePanel, n_periods: int) -> np.ndarray:
        """Weights (n_periods, d) for the periods after the last history row."""


def _daily_returns(history: PricePanel, window: int) -> np.ndarray:
    p = history.prices[-(window + 1):]
    return p[1:] / p[:-1] - 1.0


@dataclass
class EwpStrategy:
    name: str = "ewp"

    def decide(self, history, n_periods):
        return np.tile(ewp(history.n_assets), (n_periods, 1))


@dataclass
class CovStrategy:
    """GMV or HRP on the sample covariance of the trailing daily returns."""

    method: str  # "gmv" or "hrp"
    window: int

    @property
    def name(self) -> str:
        return self.method

    def decide(self, history, n_periods):
        est = CovEstimate.from_returns(_daily_returns(history, self.window))
        w = gmv(est) if self.method == "gmv" else hrp(est)
        return np.tile(w, (n_periods, 1))


@dataclass
class CvarStrategy:
    window: int
    alpha: float = 0.95
    name: str = "cvar"

    def decide(self, history, n_periods):
        return np.tile(cvar_opt(_daily_returns(history, self.window), self.alpha), (n_periods, 1))


@dataclass
class SitStrategy:
    params: Params
    config: SitConfig
    name: str = "sit"

    def logits(self, history: PricePanel) -> np.ndarray:
        feats = features_at(history, history.n_obs - 1, self.config)
        with no_grad():
            return forward(feats, self.params, self.config).mu_hat.data[0]  # (K, d)

    def decide(self, history, n_periods):
        if n_periods > self.config.horizon:
            raise InvalidConfig("decision stride exceeds the model horizon")
        return allocation_weights(self.logits(history)[:n_periods], self.config.tau)


def baseline_strategies(config: SitConfig, window: int | None = None) -> dict[str, Strategy]:
    window = window or config.lookback * config.slice_len
    return {
        "ewp": EwpStrategy(),
        "gmv": CovStrategy("gmv", window),
        "cvar": CvarStrategy(window, config.cvar_alpha),
        "hrp": CovStrategy("hrp", window),
    }


@dataclass
class Schedule:
    rows: np.ndarray  # decision rows
    periods: np.ndarray  # number of periods each decision covers
    returns: np.ndarray  # (total periods, d)
    dates: np.ndarray  # start date of each period


def schedule(panel: PricePanel, config: SitConfig, stride: int | None = None) -> Schedule:
    """Decision rows every ``stride`` periods from the first full lookback window."""
    stride = config.horizon if stride is None else stride
    if not 1 <= stride <= config.horizon:
        raise InvalidConfig(f"stride must lie in 1..{config.horizon}")
    P = config.slice_len
    rows = np.arange(config.lookback * P, panel.n_obs - P, stride * P)
    if len(rows) == 0:
        raise InsufficientHistory(f"{panel.n_obs} rows leave no out-of-sample period")
    periods = np.minimum(stride, (panel.n_obs - 1 - rows) // P)
    starts = np.concatenate([r + P * np.arange(n) for r, n in zip(rows, periods)])
    prices = panel.prices
    returns = prices[starts + P] / prices[starts] - 1.0
    return Schedule(rows, periods, returns, panel.dates[starts])


def collect_weights(strategy: Strategy, panel: PricePanel, sched: Schedule) -> np.ndarray:
    out = []
    for row, n in zip(sched.rows, sched.periods):
        w = np.asarray(strategy.decide(panel.truncate(int(row) + 1), int(n)), dtype=np.float64)
        if w.shape != (n, panel.n_assets):
            raise StrategyViolation(f"{strategy.name}: expected weights of shape {(n, panel.n_assets)}, got {w.shape}")
        check_simplex(w)
        out.append(w)
    return np.concatenate(out)


def collect_logits(strategy: SitStrategy, panel: PricePanel, sched: Schedule) -> np.ndarray:
    """Allocation logits per period, for re-softmaxing at other temperatures."""
    return np.concatenate([strategy.logits(panel.truncate(int(row) + 1))[:int(n)]
                           for row, n in zip(sched.rows, sched.periods)])


def run(strategy: Strategy, panel: PricePanel, config: SitConfig, cost: CostModel,
        stride: int | None = None, meta: dict | None = None) -> BacktestReport:
    sched = schedule(panel, config, stride)
    weights = collect_weights(strategy, panel, sched)
    info = {"strategy": strategy.name, **(meta or {})}
    return run_fixed(weights, sched.returns, cost, 252.0 / config.slice_len, sched.dates, info)


# --- experiments ---------------------------------------------------------------------
def workers() -> int:
    try:
        return max(1, int(os.environ.get("SIGALLOC_THREADS", "1")))
    except ValueError:
        return 1


def _parallel_map(fn, items: Sequence) -> list:
    n = min(workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise InvalidConfig(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


def ablate(variant: str, dataset: Dataset, config: SitConfig, seeds: Iterable[int], cost: CostModel = CostModel(),
           stride: int | None = None, settings: TrainSettings | None = None) -> list[BacktestReport]:
    """Train the given variant once per seed and backtest it on the test rows."""
    _check_variant(variant)
    cfg = config.replace(variant=variant)

    def one(seed):
        result = train(dataset, cfg, seed, settings)
        return run(SitStrategy(result.params, cfg), dataset.test_panel, cfg, cost, stride,
                   {"variant": variant, "seed": int(seed), "best_epoch": result.best_epoch})

    return _parallel_map(one, list(seeds))


@dataclass(frozen=True)
class SweepCell:
    tau: float
    c_bps: float
    sharpe_mean: float
    sharpe_std: float
    wealth_mean: float
    wealth_std: float
    n_seeds: int


SWEEP_FIELDS = ("tau", "c_bps", "sharpe_mean", "sharpe_std", "wealth_mean", "wealth_std", "n_seeds")


def _cell(tau, c_bps, reports: list[BacktestReport]) -> SweepCell:
    sharpes = np.array([r.sharpe for r in reports if r.sharpe is not None])
    wealth = np.array([r.final_wealth for r in reports])
    return SweepCell(float(tau), float(c_bps),
                     float(sharpes.mean()) if len(sharpes) else math.nan,
                     float(sharpes.std()) if len(sharpes) else math.nan,
                     float(wealth.mean()), float(wealth.std()), int(len(sharpes)))


@dataclass
class SweepResult:
    cells: list[SweepCell]
    trajectories: dict  # (seed, tau) -> weight trajectory (periods, d)
    period_returns: np.ndarray


def sweep(tau_grid, cost_grid, dataset: Dataset, config: SitConfig, seeds: Iterable[int],
          stride: int | None = None, settings: TrainSettings | None = None,
          retrain: bool = False) -> SweepResult:
    """Mean +- std Sharpe and wealth over seeds for each (tau, cost) cell.

    Temperature only enters the final softmax, so by default one model per
    seed is trained and its stored logits are re-softmaxed at each tau.
    ``retrain`` trains a separate model per (seed, tau) instead.
    """
    taus, costs, seeds = [float(t) for t in tau_grid], [float(c) for c in cost_grid], list(seeds)
    if not taus or not costs or not seeds:
        raise InvalidConfig("sweep grids and seed list must be non-empty")
    for c in costs:
        CostModel(c)
    sched = schedule(dataset.test_panel, config, stride)

    def logits_for(job):
        seed, tau = job
        cfg = config if tau is None else config.replace(tau=tau)
        return collect_logits(SitStrategy(train(dataset, cfg, seed, settings).params, cfg),
                              dataset.test_panel, sched)

    jobs = [(s, t) for s in seeds for t in (taus if retrain else [None])]
    logits = dict(zip(jobs, _parallel_map(logits_for, jobs)))
    trajectories = {(s, t): allocation_weights(logits[(s, t if retrain else None)], t)
                    for s in seeds for t in taus}
    cells = []
    for tau in taus:
        for c in costs:
            reports = [run_fixed(trajectories[(s, tau)], sched.returns, CostModel(c)) for s in seeds]
            cells.append(_cell(tau, c, reports))
    return SweepResult(cells, trajectories, sched.returns)


def write_jsonl(reports: Iterable[BacktestReport], path, append: bool = True) -> None:
    with open(path, "a" if append else "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_json(), allow_nan=False) + "\n")


def write_sweep_csv(cells: Iterable[SweepCell], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for cell in cells:
            w.writerow([repr(getattr(cell, f)) if isinstance(getattr(cell, f), float) else getattr(cell, f)
                        for f in SWEEP_FIELDS])
