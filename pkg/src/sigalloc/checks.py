"""Finite-difference self-checks, run by ``sigalloc gradcheck``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .market import ScenarioBatch
from .model import (
    VARIANTS, Params, ScenarioFeatures, SitConfig, biased_attention_row, directional_derivative_along_query,
    gate_derivative, init_params,
)
from .objective import batch_objective

TINY = SitConfig(n_assets=3, lookback=4, horizon=2, slice_len=3, m_slice=2, m_cross=2, d_model=8, d_ff=8,
                 n_layers=1, n_heads=2, hidden_c=8, dropout=0.0, cvar_alpha=0.5)


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<32} rel err {self.error:.2e} (tol {self.tol:.0e})"


def _weighted(op, out_shape, rng):
    w = ad.Tensor(rng.normal(size=out_shape))
    return lambda *xs: (op(*xs) * w).sum()


_OPS = {
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)], (2, 3, 5)),
    "broadcast add/mul/div": (lambda a, b: (a + b) * a / (b * b + 1.0), [(3, 4), (4,)], (3, 4)),
    "softmax": (lambda x: ad.softmax(x, axis=-1), [(3, 5)], (3, 5)),
    "softplus": (ad.softplus, [(3, 4)], (3, 4)),
    "layer_norm": (ad.layer_norm, [(2, 3, 5), (5,), (5,)], (2, 3, 5)),
    "concat/slice/reshape": (lambda a, b: ad.concat([a, b], 1)[:, 1:].reshape(-1), [(2, 3), (2, 2)], (8,)),
    "mean/sum/transpose": (lambda x: x.transpose(1, 0).mean(axis=0) + x.sum(axis=1), [(3, 4)], (3,)),
}


def autodiff_suite(instances: int = 10, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (op, shapes, out_shape) in _OPS.items():
        worst = 0.0
        for _ in range(instances):
            fn = _weighted(op, out_shape, rng)
            worst = max(worst, *ad.gradcheck(fn, [rng.normal(size=s) for s in shapes]))
        out.append(CheckResult(f"op {name}", worst, 1e-5))
    return out


def tiny_batch(config: SitConfig, n: int, rng: np.random.Generator) -> ScenarioBatch:
    feats = ScenarioFeatures(
        rng.normal(scale=0.5, size=(n, config.lookback, config.n_assets, config.d_sig)),
        rng.normal(scale=0.5, size=(n, config.n_assets, config.n_assets, config.d_cross)),
        rng.uniform(-1, 1, size=(n, config.lookback, config.n_calendar)),
    )
    returns = rng.normal(scale=0.02, size=(n, config.horizon, config.n_assets))
    return ScenarioBatch(feats, returns, np.arange(n), np.datetime64("2020-01-01") + np.arange(n))


def objective_gradient_error(config: SitConfig, seed: int, n: int = 2, h: float = 1e-5) -> float:
    """Worst relative error of the batch-objective gradient over all parameters."""
    rng = np.random.default_rng(seed)
    batch = tiny_batch(config, n, rng)
    params = init_params(config, rng)
    names = list(params)
    arrays = [params[k].data + rng.normal(scale=0.1, size=params[k].shape) for k in names]

    def fn(*tensors):
        return batch_objective(batch, Params(zip(names, tensors)), config)

    return max(ad.gradcheck(fn, arrays, h=h))


def objective_suite(instances: int = 3, seed: int = 0) -> list[CheckResult]:
    return [
        CheckResult(f"objective [{v}]",
                    max(objective_gradient_error(TINY.replace(variant=v), seed + i) for i in range(instances)),
                    1e-4)
        for v in VARIANTS
    ]


def five_point(f, h: float = 1e-3):
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


def random_attention_row(rng):
    d = int(rng.integers(2, 7))
    db = int(rng.integers(1, 6))
    scores = rng.normal(size=d)
    betas = rng.normal(size=(d, db))
    q = rng.normal(size=db)
    return scores, betas, q, float(rng.uniform(0.05, 3.0)), int(rng.integers(d))


def attention_suite(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_dir = worst_gate = 0.0
    for _ in range(instances):
        scores, betas, q, gamma, l = random_attention_row(rng)
        alpha = biased_attention_row(scores, q, betas, gamma)

        def along(t):
            moved = betas.copy()
            moved[l] += t * q
            return biased_attention_row(scores, q, moved, gamma)[l]

        analytic = directional_derivative_along_query(alpha[l], gamma, q)
        worst_dir = max(worst_dir, abs(analytic - five_point(along)) / abs(analytic))
        grad = gate_derivative(alpha, betas @ q)
        fd = five_point(lambda t: biased_attention_row(scores, q, betas, gamma + t))
        worst_gate = max(worst_gate, np.max(np.abs(grad - fd)) / np.max(np.abs(grad)))
    return [CheckResult("attention d alpha / d beta along q", worst_dir, 1e-5),
            CheckResult("attention d alpha / d gamma", worst_gate, 1e-5)]


def run_all(quick: bool = False) -> list[CheckResult]:
    n = 3 if quick else 10
    return autodiff_suite(n) + objective_suite(1 if quick else 3) + attention_suite(50)
