"""Price panels, scenario construction and a synthetic lead-lag market.

A decision at row ``t`` of a panel sees the lookback window of rows
``t - H*P .. t``.  Each asset's log-price path over the window is shifted to
start at 0 and scaled to unit realized quadratic variation, so features do
not depend on the price level or the volatility scale.  The window is cut into H slices of P observations each;
consecutive slices share their boundary row.  Realized returns are the
simple returns over the K following rebalance periods of P rows each.
"""
from __future__ import annotations

import csv
import datetime as dt
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InsufficientHistory, InvalidConfig
from .model import ScenarioFeatures, SitConfig
from .sigcore import signature_from_values

DEFAULT_SPLIT = ("2016-12-31", "2019-12-31", "2024-12-27")


@dataclass(eq=False)
class PricePanel:
    dates: np.ndarray  # datetime64[D], strictly increasing
    assets: tuple[str, ...]
    prices: np.ndarray  # (T, d), all > 0
    rejected_rows: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.prices = np.asarray(self.prices, dtype=np.float64)
        self.assets = tuple(str(a) for a in self.assets)
        if self.prices.ndim != 2 or self.prices.shape != (len(self.dates), len(self.assets)):
            raise FormatError(
                f"prices {self.prices.shape} do not match {len(self.dates)} dates x {len(self.assets)} assets")
        if len(set(self.assets)) != len(self.assets):
            raise FormatError("duplicate asset ids")
        if np.any(np.diff(self.dates.astype(np.int64)) <= 0):
            raise FormatError("dates must be strictly increasing")
        if not np.all(np.isfinite(self.prices)) or np.any(self.prices <= 0):
            raise FormatError("prices must be finite and positive")

    def __eq__(self, other) -> bool:
        if not isinstance(other, PricePanel):
            return NotImplemented
        return (self.assets == other.assets and np.array_equal(self.dates, other.dates)
                and np.array_equal(self.prices, other.prices))

    @property
    def n_obs(self) -> int:
        return self.prices.shape[0]

    @property
    def n_assets(self) -> int:
        return self.prices.shape[1]

    def __len__(self) -> int:
        return self.n_obs

    def rows(self, start: int, stop: int) -> "PricePanel":
        return PricePanel(self.dates[start:stop], self.assets, self.prices[start:stop])

    def truncate(self, n: int) -> "PricePanel":
        """First ``n`` rows; a strategy at row n-1 sees exactly this."""
        return self.rows(0, n)

    def between(self, after, until) -> "PricePanel":
        """Rows with ``after < date <= until``; either bound may be None."""
        keep = np.ones(self.n_obs, dtype=bool)
        if after is not None:
            keep &= self.dates > np.datetime64(after, "D")
        if until is not None:
            keep &= self.dates <= np.datetime64(until, "D")
        return PricePanel(self.dates[keep], self.assets, self.prices[keep])

    def select(self, assets) -> "PricePanel":
        idx = [self.assets.index(a) for a in assets]
        return PricePanel(self.dates, [self.assets[i] for i in idx], self.prices[:, idx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", *self.assets])
            for date, row in zip(self.dates, self.prices):
                w.writerow([str(date), *(repr(float(v)) for v in row)])


def ingest_csv(path, strict: bool = True, min_rows: int | None = None) -> PricePanel:
    """Read ``date,ASSET1,...`` CSV into a date-sorted panel.

    Rows with a missing, unparseable-as-positive or non-positive price are
    rejected.  ``strict`` raises FormatError naming their (1-based, header =
    line 1) line numbers; otherwise they are dropped and listed in
    ``panel.rejected_rows``.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{path}: empty file")
    _, header = rows[0]
    header = [h.strip() for h in header]
    if header[0].lower() != "date" or len(header) < 2:
        raise FormatError(f"{path}: header must be 'date,ASSET1,...'")
    assets = header[1:]
    dates, prices, bad = [], [], []
    for line, row in rows[1:]:
        if len(row) != len(header):
            raise FormatError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
        try:
            date = dt.date.fromisoformat(row[0].strip())
        except ValueError as exc:
            raise FormatError(f"{path}: line {line}: bad date {row[0]!r}") from exc
        values = []
        for cell in row[1:]:
            cell = cell.strip()
            try:
                values.append(float(cell) if cell else np.nan)
            except ValueError as exc:
                raise FormatError(f"{path}: line {line}: bad price {cell!r}") from exc
        values = np.array(values)
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            bad.append(line)
            continue
        dates.append(date)
        prices.append(values)
    if bad and strict:
        raise FormatError(f"{path}: missing or non-positive prices on line(s) {', '.join(map(str, bad))}")
    if not dates:
        raise FormatError(f"{path}: no usable rows")
    order = np.argsort(np.array(dates, dtype="datetime64[D]"), kind="stable")
    sorted_dates = np.array(dates, dtype="datetime64[D]")[order]
    if np.any(np.diff(sorted_dates.astype(np.int64)) == 0):
        raise FormatError(f"{path}: duplicate dates")
    panel = PricePanel(sorted_dates, assets, np.array(prices)[order], rejected_rows=tuple(bad))
    if min_rows is not None and panel.n_obs < min_rows:
        raise InsufficientHistory(f"{path}: {panel.n_obs} rows, need at least {min_rows}")
    return panel


def calendar_features(date) -> np.ndarray:
    """(sin, cos) of day-of-week/7, day-of-month/31 and month/12, zero-based."""
    d = np.datetime64(date, "D").astype(dt.date)
    phases = np.array([d.weekday() / 7.0, (d.day - 1) / 31.0, (d.month - 1) / 12.0]) * 2 * np.pi
    return np.column_stack([np.sin(phases), np.cos(phases)]).reshape(-1)


# --- scenarios ------------------------------------------------------------------------
@dataclass
class ScenarioBatch:
    features: ScenarioFeatures
    returns: np.ndarray  # (N, K, d) realized simple returns per future period
    decision_rows: np.ndarray  # (N,) panel row of each decision
    dates: np.ndarray  # (N,) decision dates

    def __len__(self) -> int:
        return len(self.returns)

    def __getitem__(self, idx) -> "ScenarioBatch":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return ScenarioBatch(self.features[idx], self.returns[idx], self.decision_rows[idx], self.dates[idx])


def _check_panel(panel: PricePanel, config: SitConfig) -> None:
    if panel.n_assets != config.n_assets:
        raise InvalidConfig(f"panel has {panel.n_assets} assets, config expects {config.n_assets}")


def decision_rows(n_obs: int, config: SitConfig, stride: int = 1) -> np.ndarray:
    """Rows with a full lookback window behind and K periods ahead.

    ``stride`` counts rebalance periods between consecutive decisions.
    """
    if stride < 1:
        raise InvalidConfig("stride must be >= 1")
    hp, kp = config.lookback * config.slice_len, config.horizon * config.slice_len
    return np.arange(hp, n_obs - kp, stride * config.slice_len)


def _window_features(panel: PricePanel, rows: np.ndarray, config: SitConfig) -> ScenarioFeatures:
    H, P = config.lookback, config.slice_len
    offsets = np.arange(-H * P, 1)
    logp = np.log(panel.prices)[rows[:, None] + offsets]  # (N, HP+1, d)
    logp = logp - logp[:, :1]
    # unit realized quadratic variation per asset over the window
    qv = np.sqrt(np.sum(np.diff(logp, axis=1) ** 2, axis=1, keepdims=True))
    logp = logp / np.where(qv > 0, qv, 1.0)
    # slices (N, H, d, P+1, 2): time channel first, then normalized log price
    idx = np.arange(H)[:, None] * P + np.arange(P + 1)
    price = np.moveaxis(logp[:, idx], -1, 2)  # (N, H, d, P+1)
    clock = np.broadcast_to(np.linspace(0.0, 1.0, P + 1), price.shape)
    slice_sigs = signature_from_values(np.stack([clock, price], axis=-1), config.m_slice)
    # cross pairs (N, d, d, HP+1, 2) over the whole window
    series = np.moveaxis(logp, 1, -1)  # (N, d, HP+1)
    pairs = np.stack(np.broadcast_arrays(series[:, :, None], series[:, None, :]), axis=-1)
    cross_sigs = signature_from_values(pairs, config.m_cross)
    slice_ends = rows[:, None] - H * P + P * np.arange(1, H + 1)
    calendar = np.stack([[calendar_features(panel.dates[r]) for r in ends] for ends in slice_ends])
    return ScenarioFeatures(slice_sigs, cross_sigs, calendar.reshape(len(rows), H, config.n_calendar))


def features_at(panel: PricePanel, row: int, config: SitConfig) -> ScenarioFeatures:
    """Features for a single decision at ``row``; reads rows <= row only."""
    _check_panel(panel, config)
    if row < config.lookback * config.slice_len or row >= panel.n_obs:
        raise InsufficientHistory(f"row {row} has no full lookback window")
    return _window_features(panel, np.array([row]), config)


def _workers() -> int:
    import os

    try:
        return max(1, int(os.environ.get("SIGALLOC_THREADS", "1")))
    except ValueError:
        return 1


def build_scenarios(panel: PricePanel, config: SitConfig, stride: int = 1) -> ScenarioBatch:
    _check_panel(panel, config)
    rows = decision_rows(panel.n_obs, config, stride)
    if len(rows) == 0:
        need = config.window + config.horizon * config.slice_len
        raise InsufficientHistory(f"panel has {panel.n_obs} rows, need at least {need}")
    chunks = np.array_split(rows, min(_workers(), len(rows)))
    with ThreadPoolExecutor(len(chunks)) as pool:
        parts = list(pool.map(lambda r: _window_features(panel, r, config), chunks))
    features = ScenarioFeatures(*(np.concatenate([getattr(p, n) for p in parts])
                                  for n in ("slice_sigs", "cross_sigs", "calendar")))
    P, K = config.slice_len, config.horizon
    marks = panel.prices[rows[:, None] + P * np.arange(K + 1)]  # (N, K+1, d)
    returns = marks[:, 1:] / marks[:, :-1] - 1.0
    return ScenarioBatch(features, returns, rows, panel.dates[rows])


# --- splits -------------------------------------------------------------------------
def split_by_dates(panel: PricePanel, boundaries=DEFAULT_SPLIT) -> tuple[PricePanel, PricePanel, PricePanel]:
    """Train (<= b0), validation (b0, b1], test (b1, b2]."""
    b0, b1, b2 = boundaries
    return panel.between(None, b0), panel.between(b0, b1), panel.between(b1, b2)


def split_by_fraction(panel: PricePanel, fractions=(0.6, 0.2, 0.2)) -> tuple[PricePanel, PricePanel, PricePanel]:
    f = np.asarray(fractions, dtype=np.float64)
    if len(f) != 3 or np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
        raise InvalidConfig("split fractions must be three positive numbers summing to 1")
    cut = np.round(np.cumsum(f)[:2] * panel.n_obs).astype(int)
    return panel.rows(0, cut[0]), panel.rows(cut[0], cut[1]), panel.rows(cut[1], panel.n_obs)


@dataclass
class Dataset:
    train: ScenarioBatch
    val: ScenarioBatch
    test_panel: PricePanel


def make_dataset(panel: PricePanel, config: SitConfig, split="dates", stride: int = 1) -> Dataset:
    """Chronological partitions; each builds scenarios from its own rows only."""
    if isinstance(split, str) and split == "dates":
        parts = split_by_dates(panel)
    elif isinstance(split, (tuple, list)) and len(split) == 3 and all(isinstance(s, str) for s in split):
        parts = split_by_dates(panel, tuple(split))
    else:
        parts = split_by_fraction(panel, split)
    train_panel, val_panel, test_panel = parts
    return Dataset(build_scenarios(train_panel, config, stride), build_scenarios(val_panel, config, stride),
                   test_panel)


# --- synthetic market ----------------------------------------------------------------
def synth_market(d: int, T: int, leadlag_pairs=(), noise_sigma: float = 0.0, seed: int = 0, lag: int = 1,
                 drift: float = 0.0002, vol: float = 0.01, start: str = "2000-01-03") -> PricePanel:
    """Geometric random walks with planted (leader, lagger) pairs.

    A lagger's log increment at t is its leader's increment at t - lag plus
    N(0, noise_sigma^2) noise.  Dates are consecutive business days.
    """
    if d < 1 or T < 2:
        raise InvalidConfig("need d >= 1 and T >= 2")
    if lag < 1:
        raise InvalidConfig("lag must be >= 1")
    pairs = [tuple(int(i) for i in p) for p in leadlag_pairs]
    flat = [i for p in pairs for i in p]
    if any(len(p) != 2 for p in pairs) or any(not 0 <= i < d for i in flat):
        raise InvalidConfig(f"lead-lag pairs must be index pairs in 0..{d - 1}")
    if len(set(flat)) != len(flat):
        raise InvalidConfig("lead-lag pairs must be disjoint")
    rng = np.random.default_rng(seed)
    # extra `lag` leading increments so laggers have a past to copy
    incs = drift - 0.5 * vol**2 + vol * rng.standard_normal((T - 1 + lag, d))
    noise = noise_sigma * rng.standard_normal((T - 1, d)) if noise_sigma > 0 else np.zeros((T - 1, d))
    out = incs[lag:].copy()
    for leader, lagger in pairs:
        out[:, lagger] = incs[:-lag, leader] + noise[:, lagger]
    logp = np.vstack([np.zeros(d), np.cumsum(out, axis=0)]) + np.log(100.0)
    dates = np.busday_offset(np.datetime64(start, "D"), np.arange(T), roll="forward")
    return PricePanel(dates, [f"A{j}" for j in range(d)], np.exp(logp))
