import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigalloc.errors import DegenerateLeadLag, GridMismatch, InvalidPath, UnsupportedLevel
from sigalloc.sigcore import (
    PiecewisePath,
    cross_signature,
    make_leadlag_path,
    segment_signature,
    sig_dim,
    signature,
    signed_area,
    signed_area_matrix,
    tensor_product,
)


def riemann_stieltjes_level2(path: PiecewisePath, n_sub: int = 10_000):
    """Level 1 and 2 by brute-force quadrature on a uniform fine grid."""
    grid = np.linspace(path.times[0], path.times[-1], n_sub + 1)
    x = np.column_stack([np.interp(grid, path.times, path.values[:, i]) for i in range(path.channels)])
    x = x - x[0]
    dx = np.diff(x, axis=0)
    mid = 0.5 * (x[:-1] + x[1:])
    lvl1 = x[-1]
    lvl2 = mid.T @ dx  # [a, b] = int X^a dX^b
    return lvl1, lvl2


def test_single_channel_segment():
    a = 1.7
    sig = signature(PiecewisePath([0.0, 1.0], [[0.0], [a]]), 3)
    np.testing.assert_allclose(sig.coords, [a, a**2 / 2, a**3 / 6], rtol=0, atol=1e-15)


def test_segment_signature_is_tensor_power_over_factorial():
    rng = np.random.default_rng(0)
    delta = rng.normal(size=3)
    sig = signature(PiecewisePath([0.0, 2.0], np.vstack([np.zeros(3), delta])), 3)
    for k, block in enumerate(sig.levels(), start=1):
        power = delta
        for _ in range(k - 1):
            power = np.multiply.outer(power, delta)
        np.testing.assert_array_equal(block, power.ravel() / math.factorial(k))


def test_two_segment_path_is_chen_product():
    pts = np.array([[0.0, 0.0], [1.0, -0.5], [0.3, 2.0]])
    whole = signature(PiecewisePath.from_values(pts), 3)
    left = segment_signature(pts[1] - pts[0], 3)
    right = segment_signature(pts[2] - pts[1], 3)
    np.testing.assert_allclose(whole.coords, (left * right).coords, atol=1e-14)


def test_level2_matches_quadrature_oracle():
    rng = np.random.default_rng(11)
    for _ in range(5):
        times = np.sort(rng.uniform(0, 3, size=4))
        path = PiecewisePath(times, rng.normal(size=(4, 2)))
        sig = signature(path, 2)
        lvl1, lvl2 = riemann_stieltjes_level2(path)
        np.testing.assert_allclose(sig.coords[:2], lvl1, atol=1e-6)
        np.testing.assert_allclose(sig.coords[2:], lvl2.ravel(), atol=1e-6)


@pytest.mark.parametrize("c,m", list(itertools.product([1, 2, 3], [1, 2, 3])))
def test_dimension_law(c, m):
    path = PiecewisePath.from_values(np.random.default_rng(c * 10 + m).normal(size=(5, c)))
    assert len(signature(path, m).coords) == sum(c**k for k in range(1, m + 1)) == sig_dim(c, m)


def test_errors():
    with pytest.raises(InvalidPath):
        PiecewisePath([0.0], [[1.0]])
    with pytest.raises(InvalidPath):
        PiecewisePath([0.0, 0.0], [[1.0], [2.0]])
    path = PiecewisePath.from_values([[0.0], [1.0]])
    for bad in (0, 5):
        with pytest.raises(UnsupportedLevel):
            signature(path, bad)
    other = PiecewisePath([0.0, 2.0], [[0.0], [1.0]])
    with pytest.raises(GridMismatch):
        cross_signature(path, other)


paths = st.integers(3, 8).flatmap(
    lambda n: st.tuples(
        st.integers(1, 3),
        st.integers(1, 3),
        st.integers(1, n - 2),
        st.just(n),
        st.integers(0, 2**31 - 1),
    )
)


@settings(max_examples=60, deadline=None)
@given(paths)
def test_chen_identity_at_any_split(args):
    c, m, split, n, seed = args
    vals = np.random.default_rng(seed).normal(size=(n, c))
    whole = signature(PiecewisePath.from_values(vals), m)
    left = signature(PiecewisePath.from_values(vals[: split + 1]), m)
    right = signature(PiecewisePath.from_values(vals[split:]), m)
    np.testing.assert_allclose(whole.coords, tensor_product(left, right).coords, rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_translation_invariance(seed, shift):
    vals = np.random.default_rng(seed).normal(size=(6, 2))
    a = signature(PiecewisePath.from_values(vals), 3).coords
    b = signature(PiecewisePath.from_values(vals + shift), 3).coords
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_time_reparameterisation_invariance():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(6, 2))
    t1 = np.arange(6.0)
    t2 = np.cumsum(rng.uniform(0.01, 5.0, size=6))
    a = signature(PiecewisePath(t1, vals), 3).coords
    b = signature(PiecewisePath(t2, vals), 3).coords
    np.testing.assert_allclose(a, b, atol=1e-10)
    # inserting a point on an existing segment does not change the geometry
    mid = 0.3 * vals[1] + 0.7 * vals[2]
    refined = np.vstack([vals[:2], mid, vals[2:]])
    c = signature(PiecewisePath.from_values(refined), 3).coords
    np.testing.assert_allclose(a, c, atol=1e-10)


def test_time_augmentation_breaks_scalar_degeneracy():
    up_down = PiecewisePath.from_values([[0.0], [1.0], [0.0], [1.0]])
    straight = PiecewisePath.from_values([[0.0], [0.2], [0.5], [1.0]])
    assert np.allclose(signature(up_down, 3).coords, signature(straight, 3).coords)
    assert not np.allclose(
        signature(up_down.time_augmented(), 3).coords,
        signature(straight.time_augmented(), 3).coords,
    )


class TestCrossSignature:
    def test_constant_second_channel(self):
        rng = np.random.default_rng(5)
        pj = PiecewisePath.from_values(rng.normal(size=(8, 1)))
        pl = PiecewisePath.from_values(np.full((8, 1), 3.0))
        sig = cross_signature(pj, pl, 3)
        own = signature(pj, 3)
        for k in range(1, 4):
            for word in itertools.product([0, 1], repeat=k):
                expected = own[(0,) * k] if 1 not in word else 0.0
                assert sig[word] == pytest.approx(expected, abs=1e-14)
        assert len(sig.coords) == 2 + 4 + 8

    def test_leadlag_single_step(self):
        leader, lagger = make_leadlag_path([0.0, 1.0])
        sig = cross_signature(leader, lagger, 2)
        assert sig[0, 1] - sig[1, 0] == pytest.approx(1.0, abs=1e-15)

    def test_identical_paths_have_symmetric_level2(self):
        p = PiecewisePath.from_values(np.random.default_rng(1).normal(size=(9, 1)))
        sig = cross_signature(p, p, 2)
        assert sig[0, 1] == pytest.approx(sig[1, 0], abs=1e-14)
        assert signed_area(p, p) == pytest.approx(0.0, abs=1e-14)

    def test_basepointing(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(7, 1))
        b = rng.normal(size=(7, 1))
        s1 = cross_signature(PiecewisePath.from_values(a), PiecewisePath.from_values(b), 2)
        s2 = cross_signature(PiecewisePath.from_values(a + 4), PiecewisePath.from_values(b - 9), 2)
        np.testing.assert_allclose(s1.coords, s2.coords, atol=1e-12)


class TestSignedArea:
    def test_identity_for_sync_0_1_3(self):
        leader, lagger = make_leadlag_path([0.0, 1.0, 3.0])
        assert signed_area(leader, lagger) == pytest.approx(5.0, abs=1e-12)
        # quadrature cross-check of int X1 dX2 - int X2 dX1
        joint = PiecewisePath(leader.times, np.column_stack([leader.values, lagger.values]))
        _, lvl2 = riemann_stieltjes_level2(joint)
        assert lvl2[0, 1] - lvl2[1, 0] == pytest.approx(5.0, abs=1e-6)

    def test_zero_net_move(self):
        leader, lagger = make_leadlag_path([0.0, 1.0, 0.0])
        assert signed_area(leader, lagger) == pytest.approx(2.0, abs=1e-12)

    def test_antisymmetry(self):
        rng = np.random.default_rng(8)
        a = PiecewisePath.from_values(rng.normal(size=(12, 1)))
        b = PiecewisePath.from_values(rng.normal(size=(12, 1)))
        assert signed_area(a, b) == -signed_area(b, a)

    def test_matches_raw_integrals_when_endpoints_coincide(self):
        rng = np.random.default_rng(4)
        vals = rng.normal(size=(10, 2))
        vals[0, 1] = vals[0, 0]
        vals[-1, 1] = vals[-1, 0]
        grid = np.linspace(0, 9, 20_001)
        x = np.column_stack([np.interp(grid, np.arange(10.0), vals[:, i]) for i in range(2)])
        mid, dx = 0.5 * (x[:-1] + x[1:]), np.diff(x, axis=0)
        raw = mid[:, 0] @ dx[:, 1] - mid[:, 1] @ dx[:, 0]
        area = signed_area(PiecewisePath.from_values(vals[:, :1]), PiecewisePath.from_values(vals[:, 1:]))
        assert area == pytest.approx(raw, abs=1e-6)

    def test_raw_integrals_differ_by_start_times_net_moves(self):
        # shared start a only: raw - basepointed = a * (dX2 - dX1)
        rng = np.random.default_rng(6)
        vals = rng.normal(size=(10, 2))
        vals[0, 1] = vals[0, 0]
        a = vals[0, 0]
        inc = np.diff(vals, axis=0)
        raw = 0.5 * (vals[:-1, 0] + vals[1:, 0]) @ inc[:, 1] - 0.5 * (vals[:-1, 1] + vals[1:, 1]) @ inc[:, 0]
        area = signed_area(PiecewisePath.from_values(vals[:, :1]), PiecewisePath.from_values(vals[:, 1:]))
        net = vals[-1] - vals[0]
        assert raw - area == pytest.approx(a * (net[1] - net[0]), abs=1e-12)

    def test_matrix_matches_pairwise(self):
        vals = np.random.default_rng(9).normal(size=(15, 4)).cumsum(axis=0)
        m = signed_area_matrix(vals)
        for j in range(4):
            for l in range(4):
                pj = PiecewisePath.from_values(vals[:, j])
                pl = PiecewisePath.from_values(vals[:, l])
                assert m[j, l] == pytest.approx(signed_area(pj, pl), abs=1e-12)

    def test_area_equals_quadratic_variation(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            n = rng.integers(1, 12)
            steps = rng.normal(size=n)
            steps[np.abs(steps) < 1e-3] = 0.5
            sync = rng.normal() + np.concatenate([[0.0], np.cumsum(steps)])
            leader, lagger = make_leadlag_path(sync, segment_len=rng.uniform(0.1, 3))
            area = signed_area(leader, lagger)
            assert area > 0
            assert area == pytest.approx(np.sum(np.diff(sync) ** 2), abs=1e-9)


class TestLeadLagConstruction:
    def test_shape_of_single_step(self):
        leader, lagger = make_leadlag_path([0.0, 1.0], segment_len=2.0)
        np.testing.assert_array_equal(leader.times, [0.0, 2.0, 4.0])
        np.testing.assert_array_equal(leader.values[:, 0], [0.0, 1.0, 1.0])
        np.testing.assert_array_equal(lagger.values[:, 0], [0.0, 0.0, 1.0])

    def test_degenerate(self):
        with pytest.raises(DegenerateLeadLag):
            make_leadlag_path([5.0, 5.0])
        with pytest.raises(DegenerateLeadLag):
            make_leadlag_path([0.0, 1.0, 1.0])
