import datetime as dt

import numpy as np
import pytest

from sigalloc.errors import FormatError, InsufficientHistory, InvalidConfig
from sigalloc.market import (
    PricePanel, build_scenarios, calendar_features, decision_rows, features_at, ingest_csv,
    make_dataset, split_by_dates, split_by_fraction, synth_market,
)
from sigalloc.model import SitConfig
from sigalloc.sigcore import sig_coord_index, signed_area_matrix

CFG = SitConfig(n_assets=3, lookback=3, horizon=2, slice_len=4, m_slice=2, m_cross=2)


def write(tmp_path, text, name="p.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


# --- ingestion -------------------------------------------------------------------------
def test_ingest_small_file(tmp_path):
    panel = ingest_csv(write(tmp_path, "date,A,B\n2020-01-02,1,2\n2020-01-03,1.5,2.5\n2020-01-06,2,3\n"))
    assert panel.n_obs == 3 and panel.n_assets == 2 and panel.assets == ("A", "B")
    assert panel.prices[1, 0] == 1.5


def test_ingest_rejects_zero_price_with_line_number(tmp_path):
    path = write(tmp_path, "date,A,B\n2020-01-02,1,2\n2020-01-03,0,2.5\n2020-01-06,2,\n")
    with pytest.raises(FormatError, match="line\\(s\\) 3, 4"):
        ingest_csv(path)
    panel = ingest_csv(path, strict=False)
    assert panel.n_obs == 1 and panel.rejected_rows == (3, 4)


def test_ingest_shuffled_equals_sorted(tmp_path):
    rows = [f"2021-03-{d:02d},{d},{2 * d}" for d in range(1, 11)]
    a = ingest_csv(write(tmp_path, "date,X,Y\n" + "\n".join(rows), "a.csv"))
    order = np.random.default_rng(0).permutation(10)
    b = ingest_csv(write(tmp_path, "date,X,Y\n" + "\n".join(rows[i] for i in order), "b.csv"))
    assert np.array_equal(a.dates, b.dates) and np.array_equal(a.prices, b.prices)


@pytest.mark.parametrize("text", [
    "",
    "when,A\n2020-01-01,1\n",
    "date,A\n2020-13-01,1\n",
    "date,A\n2020-01-01,abc\n",
    "date,A,B\n2020-01-01,1\n",
    "date,A\n2020-01-01,1\n2020-01-01,2\n",
])
def test_ingest_format_errors(tmp_path, text):
    with pytest.raises(FormatError):
        ingest_csv(write(tmp_path, text))


def test_ingest_min_rows(tmp_path):
    with pytest.raises(InsufficientHistory):
        ingest_csv(write(tmp_path, "date,A\n2020-01-01,1\n"), min_rows=CFG.window + 8)


def test_csv_round_trip(tmp_path):
    panel = synth_market(3, 50, [(0, 1)], 0.001, seed=4)
    panel.to_csv(tmp_path / "s.csv")
    back = ingest_csv(tmp_path / "s.csv")
    assert back == panel


# --- calendar --------------------------------------------------------------------------
def test_calendar_monday():
    f = calendar_features("2024-01-01")  # a Monday, first of January
    assert f.shape == (6,)
    np.testing.assert_allclose(f, [0, 1, 0, 1, 0, 1], atol=1e-15)
    assert np.array_equal(f, calendar_features(np.datetime64("2024-01-01")))


def test_calendar_range():
    rng = np.random.default_rng(0)
    base = dt.date(1990, 1, 1)
    for off in rng.integers(0, 20000, size=1000):
        f = calendar_features(base + dt.timedelta(days=int(off)))
        assert np.all(np.abs(f) <= 1)
        np.testing.assert_allclose(f[0::2] ** 2 + f[1::2] ** 2, 1.0, atol=1e-12)


# --- scenarios -------------------------------------------------------------------------
def test_constant_prices_give_zero_price_coordinates():
    T = 40
    panel = PricePanel(np.datetime64("2020-01-01") + np.arange(T), ["a", "b", "c"], np.full((T, 3), 7.0))
    batch = build_scenarios(panel, CFG)
    assert np.all(batch.returns == 0)
    # words containing the price letter (1) vanish; the pure time words do not
    for word in [(1,), (0, 1), (1, 0), (1, 1)]:
        assert np.all(batch.features.slice_sigs[..., sig_coord_index(2, word)] == 0)
    assert np.all(batch.features.slice_sigs[..., sig_coord_index(2, (0,))] == 1)
    assert np.all(batch.features.cross_sigs == 0)


def test_scenario_shapes_and_alignment():
    panel = synth_market(3, 60, seed=1)
    batch = build_scenarios(panel, CFG)
    n = len(batch)
    assert batch.features.slice_sigs.shape == (n, 3, 3, CFG.d_sig)
    assert batch.features.cross_sigs.shape == (n, 3, 3, CFG.d_cross)
    assert batch.features.calendar.shape == (n, 3, 6)
    assert batch.returns.shape == (n, 2, 3)
    t = int(batch.decision_rows[0])
    assert t == CFG.lookback * CFG.slice_len
    p = panel.prices
    np.testing.assert_allclose(batch.returns[0, 1], p[t + 8] / p[t + 4] - 1)
    np.testing.assert_allclose(batch.features.calendar[0, -1], calendar_features(panel.dates[t]))


def test_slice_signature_matches_direct_computation():
    from sigalloc.sigcore import PiecewisePath, signature

    panel = synth_market(3, 60, seed=2)
    batch = build_scenarios(panel, CFG)
    t, k, j = int(batch.decision_rows[3]), 1, 2
    window = np.log(panel.prices[t - 12:t + 1])
    window = (window - window[0]) / np.sqrt((np.diff(window, axis=0) ** 2).sum(axis=0))
    logp = window[4 * k:4 * k + 5, j]
    path = PiecewisePath.from_values(logp).time_augmented()
    np.testing.assert_allclose(batch.features.slice_sigs[3, k, j], signature(path, 2).coords, atol=1e-14)
    # cross-signature area is the pairwise signed area over the window
    areas = signed_area_matrix(window)
    cs = batch.features.cross_sigs[3]
    np.testing.assert_allclose(cs[..., sig_coord_index(2, (0, 1))] - cs[..., sig_coord_index(2, (1, 0))],
                               areas, atol=1e-14)


def test_no_lookahead_by_truncation():
    panel = synth_market(3, 80, seed=3)
    batch = build_scenarios(panel, CFG)
    for i, t in enumerate(batch.decision_rows):
        cut = features_at(panel.truncate(int(t) + 1), int(t), CFG)
        for name in ("slice_sigs", "cross_sigs", "calendar"):
            assert np.array_equal(getattr(cut, name)[0], getattr(batch.features, name)[i])


def test_stride_counts_decisions():
    for T in (40, 41, 57, 100, 233):
        panel = synth_market(3, T, seed=0)
        K, P = CFG.horizon, CFG.slice_len
        expected = (T - CFG.window) // (K * P)
        if expected == 0:
            with pytest.raises(InsufficientHistory):
                build_scenarios(panel, CFG, stride=K)
            continue
        batch = build_scenarios(panel, CFG, stride=K)
        assert len(batch) == expected
        # evaluation windows tile without overlap
        assert np.all(np.diff(batch.decision_rows) == K * P)


def test_parallel_build_matches_serial(monkeypatch):
    panel = synth_market(3, 120, seed=5)
    serial = build_scenarios(panel, CFG)
    monkeypatch.setenv("SIGALLOC_THREADS", "4")
    parallel = build_scenarios(panel, CFG)
    assert np.array_equal(serial.features.cross_sigs, parallel.features.cross_sigs)
    assert np.array_equal(serial.returns, parallel.returns)


def test_asset_count_mismatch():
    with pytest.raises(InvalidConfig):
        build_scenarios(synth_market(4, 60), CFG)
    with pytest.raises(InvalidConfig):
        decision_rows(60, CFG, stride=0)


# --- splits ----------------------------------------------------------------------------
def test_date_split_is_disjoint():
    panel = synth_market(2, 7000, start="1995-01-02")
    parts = split_by_dates(panel)
    assert parts[0].dates[-1] <= np.datetime64("2016-12-31") < parts[1].dates[0]
    assert parts[1].dates[-1] <= np.datetime64("2019-12-31") < parts[2].dates[0]
    assert parts[2].dates[-1] <= np.datetime64("2024-12-27")
    all_dates = np.concatenate([p.dates for p in parts])
    assert len(np.unique(all_dates)) == len(all_dates)


def test_fraction_split_and_dataset():
    panel = synth_market(3, 300, seed=2)
    tr, va, te = split_by_fraction(panel, (0.6, 0.2, 0.2))
    assert (tr.n_obs, va.n_obs, te.n_obs) == (180, 60, 60)
    assert tr.dates[-1] < va.dates[0] and va.dates[-1] < te.dates[0]
    data = make_dataset(panel, CFG, (0.6, 0.2, 0.2))
    assert data.train.dates.max() < va.dates[0]
    assert data.val.dates.min() >= va.dates[0] and data.val.dates.max() <= va.dates[-1]
    with pytest.raises(InvalidConfig):
        split_by_fraction(panel, (0.5, 0.5, 0.5))


# --- synthetic market ------------------------------------------------------------------
def test_synth_noiseless_lag_one():
    panel = synth_market(4, 200, [(0, 1), (3, 2)], 0.0, seed=7, lag=1)
    r = np.diff(np.log(panel.prices), axis=0)
    np.testing.assert_allclose(r[1:, 1], r[:-1, 0], atol=1e-12)
    np.testing.assert_allclose(r[1:, 2], r[:-1, 3], atol=1e-12)
    assert np.all(np.isin(np.busday_offset(panel.dates, 0), panel.dates))


def test_synth_deterministic():
    a = synth_market(3, 100, [(0, 1)], 0.01, seed=3)
    b = synth_market(3, 100, [(0, 1)], 0.01, seed=3)
    c = synth_market(3, 100, [(0, 1)], 0.01, seed=4)
    assert a == b and not np.array_equal(a.prices, c.prices)


@pytest.mark.parametrize("pairs", [[(0, 1), (1, 2)], [(0, 0)], [(0, 5)], [(0, 1, 2)]])
def test_synth_rejects_bad_pairs(pairs):
    with pytest.raises(InvalidConfig):
        synth_market(4, 50, pairs)


def test_planted_pair_has_positive_area():
    panel = synth_market(4, 200 * 60 + 1, [(0, 1)], noise_sigma=0.005, seed=11, lag=1)
    logp = np.log(panel.prices)
    areas = np.array([signed_area_matrix(logp[i * 60:(i + 1) * 60 + 1])[0, 1] for i in range(200)])
    assert (areas > 0).mean() >= 0.95
    # unpaired assets: no systematic area
    other = np.array([signed_area_matrix(logp[i * 60:(i + 1) * 60 + 1])[2, 3] for i in range(200)])
    assert abs(other.mean()) < 2 * other.std(ddof=1) / np.sqrt(len(other))
