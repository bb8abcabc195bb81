"""Classical long-only allocations: EWP, GMV, scenario CVaR and HRP."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import squareform

from .errors import EmptyPortfolio, InsufficientHistory, InvalidCov

RIDGE = 1e-8


class DegenerateScenarioWarning(UserWarning):
    """All scenario returns are identical; the CVaR baseline fell back to EWP."""


@dataclass(frozen=True)
class CovEstimate:
    mean: np.ndarray
    cov: np.ndarray
    n_samples: int

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise InvalidCov(f"covariance must be square, got {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise InvalidCov("covariance has non-finite entries")
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))

    @classmethod
    def from_returns(cls, returns) -> "CovEstimate":
        r = np.asarray(returns, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] < 2:
            raise InsufficientHistory("covariance needs at least 2 return observations")
        return cls(r.mean(axis=0), np.cov(r, rowvar=False, ddof=1).reshape(r.shape[1], r.shape[1]), r.shape[0])

    @property
    def dim(self) -> int:
        return self.cov.shape[0]


def _as_cov(cov) -> CovEstimate:
    if isinstance(cov, CovEstimate):
        return cov
    c = np.asarray(cov, dtype=np.float64)
    return CovEstimate(np.zeros(c.shape[0]), c, 0)


def ewp(d: int) -> np.ndarray:
    if d < 1:
        raise EmptyPortfolio("no assets to allocate")
    return np.full(d, 1.0 / d)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def gmv(cov, tol: float = 1e-8, max_iter: int = 200_000) -> np.ndarray:
    """Long-only minimum variance by accelerated projected gradient.

    Stops when the natural residual ``|w - P(w - grad)|_inf`` drops below ``tol``.
    """
    sigma = _as_cov(cov).cov
    d = sigma.shape[0]
    if d < 1:
        raise EmptyPortfolio("no assets to allocate")
    sigma = sigma + RIDGE * np.trace(sigma) / d * np.eye(d)
    lipschitz = 2.0 * np.linalg.eigvalsh(sigma)[-1]
    if not lipschitz > 0:
        return ewp(d)
    step = 1.0 / lipschitz
    w = y = ewp(d)
    t = 1.0
    for _ in range(max_iter):
        g = 2.0 * sigma @ w
        if np.max(np.abs(w - project_simplex(w - g))) < tol:
            break
        w_next = project_simplex(y - step * 2.0 * sigma @ y)
        if (w_next - w) @ (y - w_next) > 0:  # adaptive restart
            t, y = 1.0, w
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_next + (t - 1.0) / t_next * (w_next - w)
        w, t = w_next, t_next
    return w


@dataclass(frozen=True)
class CvarOptResult:
    weights: np.ndarray
    objective: float
    nu: float
    iterations: int
    degenerate: bool


def _portfolio_cvar(losses: np.ndarray, alpha: float) -> tuple[float, float, np.ndarray]:
    """Value, lower-quantile nu, and the tail indicator of an empirical CVaR."""
    n = len(losses)
    k = min(max(int(np.ceil(alpha * n - 1e-9)), 1), n) - 1
    nu = float(np.partition(losses, k)[k])
    tail = losses > nu
    return nu + (losses[tail] - nu).sum() / ((1.0 - alpha) * n), nu, tail


def cvar_opt_detailed(scenario_returns, alpha: float = 0.95, max_iter: int = 20_000,
                      tol: float = 1e-9, window: int = 100) -> CvarOptResult:
    """Minimise nu + sum_t (-w.r_t - nu)^+ / ((1 - alpha) T) over the simplex.

    Projected subgradient steps in w alternate with the exact minimisation
    in nu (the lower alpha-quantile of the losses).  Iteration stops when the
    best objective improved by less than ``tol`` over ``window`` iterations.
    """
    r = np.asarray(scenario_returns, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] < 1:
        raise EmptyPortfolio("scenario returns must be a non-empty T x d matrix")
    T, d = r.shape
    if T < 2:
        raise InsufficientHistory("scenario CVaR needs at least 2 scenarios")
    if d == 1:
        value, nu, _ = _portfolio_cvar(-r[:, 0], alpha)
        return CvarOptResult(np.ones(1), value, nu, 0, False)
    if np.all(r == r[0]):
        warnings.warn("identical scenario returns; falling back to equal weights", DegenerateScenarioWarning)
        w = ewp(d)
        value, nu, _ = _portfolio_cvar(-r @ w, alpha)
        return CvarOptResult(w, value, nu, 0, True)
    w = ewp(d)
    best_w, (best, best_nu, _) = w, _portfolio_cvar(-r @ w, alpha)
    history = [best]
    scale = np.max(np.abs(r))
    it = 0
    for it in range(1, max_iter + 1):
        value, nu, tail = _portfolio_cvar(-r @ w, alpha)
        if value < best:
            best, best_nu, best_w = value, nu, w
        history.append(best)
        if it >= window and history[-window - 1] - best < tol:
            break
        g = -r[tail].sum(axis=0) / ((1.0 - alpha) * T)
        g = g - g.mean()  # tangent to the simplex
        norm = np.linalg.norm(g)
        if norm == 0:
            break
        w = project_simplex(w - (0.5 / np.sqrt(it)) * g / norm * min(1.0, 1.0 / scale))
    return CvarOptResult(best_w, best, best_nu, it, False)


def cvar_opt(scenario_returns, alpha: float = 0.95) -> np.ndarray:
    return cvar_opt_detailed(scenario_returns, alpha).weights


def _quasi_diag_order(link: np.ndarray, d: int) -> list[int]:
    # children of each merge ordered by their smallest member index
    members: dict[int, list[int]] = {i: [i] for i in range(d)}
    for m, (a, b, _, _) in enumerate(link):
        left, right = members.pop(int(a)), members.pop(int(b))
        if min(right) < min(left):
            left, right = right, left
        members[d + m] = left + right
    (order,) = members.values()
    return order


def _ivp_variance(sigma: np.ndarray, idx: list[int]) -> float:
    sub = sigma[np.ix_(idx, idx)]
    ivp = 1.0 / np.diag(sub)
    ivp /= ivp.sum()
    return float(ivp @ sub @ ivp)


def hrp(cov) -> np.ndarray:
    """Hierarchical risk parity with single-linkage correlation clustering."""
    sigma = _as_cov(cov).cov
    d = sigma.shape[0]
    if d < 1:
        raise EmptyPortfolio("no assets to allocate")
    var = np.diag(sigma)
    if np.any(var <= 0):
        raise InvalidCov("HRP needs strictly positive variances")
    if d == 1:
        return np.ones(1)
    sd = np.sqrt(var)
    corr = np.clip(sigma / np.outer(sd, sd), -1.0, 1.0)
    dist = np.sqrt(np.clip(0.5 * (1.0 - corr), 0.0, None))
    np.fill_diagonal(dist, 0.0)
    link = linkage(squareform(dist, checks=False), method="single")
    order = _quasi_diag_order(link, d)
    w = np.ones(d)
    clusters = [order]
    while clusters:
        nxt = []
        for c in clusters:
            if len(c) < 2:
                continue
            half = len(c) // 2
            left, right = c[:half], c[half:]
            v_left, v_right = _ivp_variance(sigma, left), _ivp_variance(sigma, right)
            a = 1.0 - v_left / (v_left + v_right)
            w[left] *= a
            w[right] *= 1.0 - a
            nxt += [left, right]
        clusters = nxt
    return w / w.sum()


def portfolio_variance(w, cov) -> float:
    sigma = _as_cov(cov).cov
    w = np.asarray(w, dtype=np.float64)
    return float(w @ sigma @ w)
