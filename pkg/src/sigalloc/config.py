"""Run configuration: a flat ``key = value`` text file plus overrides.

Every key has a type and a default.  Unknown keys and out-of-range values
are rejected before any computation starts.  Model-shape keys are limited
to the search grid the architecture was tuned over.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import InvalidConfig
from .market import DEFAULT_SPLIT
from .model import VARIANTS, SitConfig
from .objective import TrainSettings

LEGAL_VALUES = {
    "d_model": (8, 16, 32, 64),
    "d_ff": (8, 16, 32, 64),
    "n_layers": (1, 2),
    "n_heads": (2, 4, 8),
    "hidden_c": (8, 16, 32),
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class RunConfig:
    # model
    n_assets: int = 0  # 0: take from the data
    lookback: int = 8
    horizon: int = 20
    slice_len: int = 5
    m_slice: int = 3
    m_cross: int = 2
    d_model: int = 16
    d_ff: int = 16
    n_layers: int = 1
    n_heads: int = 2
    d_beta: int = 0  # 0: d_model / n_heads
    hidden_c: int = 16
    tau: float = 1.0
    dropout: float = 0.1
    cvar_alpha: float = 0.95
    variant: str = "full"
    # data
    data: str = ""
    split: str = "dates"  # "dates" or "fraction"
    train_end: str = DEFAULT_SPLIT[0]
    val_end: str = DEFAULT_SPLIT[1]
    test_end: str = DEFAULT_SPLIT[2]
    split_fractions: tuple[float, ...] = (0.6, 0.2, 0.2)
    train_stride: int = 1
    # optimisation
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seeds: tuple[int, ...] = ()
    # evaluation
    stride: int = 0  # decision stride in periods; 0: the horizon K
    cost_bps: float = 0.0
    cov_window: int = 0  # 0: lookback * slice_len
    tau_grid: tuple[float, ...] = (0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)
    cost_grid: tuple[float, ...] = (0.0, 5.0, 10.0)
    sweep_mode: str = "resoftmax"  # or "retrain"
    out_dir: str = "run"

    def __post_init__(self):
        problems = []
        for key, legal in LEGAL_VALUES.items():
            if getattr(self, key) not in legal:
                problems.append(f"{key}={getattr(self, key)} not in {legal}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if self.split not in ("dates", "fraction"):
            problems.append("split must be 'dates' or 'fraction'")
        if self.sweep_mode not in ("resoftmax", "retrain"):
            problems.append("sweep_mode must be 'resoftmax' or 'retrain'")
        for key in ("train_end", "val_end", "test_end"):
            try:
                dt.date.fromisoformat(getattr(self, key))
            except ValueError:
                problems.append(f"{key} must be an ISO date")
        for key in ("n_assets", "d_beta", "stride", "cov_window", "cost_bps"):
            if getattr(self, key) < 0:
                problems.append(f"{key} must be >= 0")
        for key in ("train_stride", "batch_size", "max_epochs", "patience"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1")
        if not self.lr >= 0:
            problems.append("lr must be >= 0")
        if not self.tau_grid or not self.cost_grid:
            problems.append("tau_grid and cost_grid must be non-empty")
        if any(c < 0 for c in self.cost_grid):
            problems.append("cost_grid entries must be >= 0")
        if problems:
            raise InvalidConfig("; ".join(problems))
        self.sit_config(self.n_assets or 1)  # model-level validation

    # --- parsing -------------------------------------------------------------------
    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise InvalidConfig(f"unknown config key(s): {', '.join(unknown)}")
        parsed = {}
        for key, text in values.items():
            kind = types[key]
            try:
                if kind == "int":
                    parsed[key] = int(text)
                elif kind == "float":
                    parsed[key] = float(text)
                elif kind == "tuple[float, ...]":
                    parsed[key] = _floats(text)
                elif kind == "tuple[int, ...]":
                    parsed[key] = _ints(text)
                else:
                    parsed[key] = text.strip()
            except ValueError as exc:
                raise InvalidConfig(f"{key}: cannot parse {text!r} ({exc})") from exc
        return cls(**parsed)

    @staticmethod
    def read_pairs(path) -> dict[str, str]:
        values = {}
        for number, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{number}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise InvalidConfig(f"{path}:{number}: duplicate key {key}")
            values[key] = value
        return values

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = cls.read_pairs(path) if path else {}
        values.update(overrides or {})
        return cls.from_mapping(values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return RunConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **changes})

    # --- derived objects -----------------------------------------------------------
    def sit_config(self, n_assets: int | None = None) -> SitConfig:
        n = self.n_assets or n_assets
        if not n:
            raise InvalidConfig("n_assets unknown: set it or supply data")
        if self.n_assets and n_assets and self.n_assets != n_assets:
            raise InvalidConfig(f"n_assets={self.n_assets} but the data has {n_assets} assets")
        return SitConfig(
            n_assets=n, lookback=self.lookback, horizon=self.horizon, slice_len=self.slice_len,
            m_slice=self.m_slice, m_cross=self.m_cross, d_model=self.d_model, d_ff=self.d_ff,
            n_layers=self.n_layers, n_heads=self.n_heads, d_beta=self.d_beta or None,
            hidden_c=self.hidden_c, tau=self.tau, dropout=self.dropout, cvar_alpha=self.cvar_alpha,
            variant=self.variant,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                             patience=self.patience)

    def split_spec(self):
        if self.split == "dates":
            return (self.train_end, self.val_end, self.test_end)
        return self.split_fractions

    @property
    def eval_stride(self) -> int:
        return self.stride or self.horizon
