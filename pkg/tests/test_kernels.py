import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kslab.kernels import cutoff_phi, drift_field, drift_field_blocked, kernel_regularized, kernel_singular

coord = st.floats(-50, 50, allow_nan=False)


def test_singular_values():
    np.testing.assert_array_equal(kernel_singular((0.0, 0.0)), [0.0, 0.0])
    np.testing.assert_allclose(kernel_singular((1.0, 0.0)), [-1 / (2 * math.pi), 0.0], rtol=1e-15)
    np.testing.assert_allclose(kernel_singular((0.0, 2.0)), [0.0, -1 / (4 * math.pi)], rtol=1e-15)
    assert kernel_singular((1.0, 0.0))[0] == pytest.approx(-0.15915494, abs=1e-8)


def test_regularized_values():
    np.testing.assert_allclose(kernel_regularized((1.0, 0.0), 1.0), [-1 / (4 * math.pi), 0.0], rtol=1e-15)
    for eps in (0.0, 0.3, 1.0):
        np.testing.assert_array_equal(kernel_regularized((0.0, 0.0), eps), [0.0, 0.0])
    np.testing.assert_array_equal(kernel_regularized((1.0, 0.0), 0.0), kernel_singular((1.0, 0.0)))


@given(coord, coord, st.floats(0, 1))
def test_regularized_odd_and_bounded(x, y, eps):
    k = kernel_regularized((x, y), eps)
    np.testing.assert_array_equal(kernel_regularized((-x, -y), eps), -k)
    r = math.sqrt(x * x + y * y + eps * eps)
    if r > 0:
        assert np.hypot(*k) <= 1 / (2 * math.pi * r) * (1 + 1e-12)
    if eps > 0:
        assert np.hypot(*k) <= 1 / (2 * math.pi * eps) * (1 + 1e-12)


@pytest.mark.parametrize("m,expected", [(2.0, 1.0), (0.5, 0.0), (0.75, 0.5)])
def test_cutoff_phi(m, expected):
    ell = 3.0
    # equilateral triangle with perimeter m / ell
    side = m / ell / 3
    pos = [(0, 0), (side, 0), (side / 2, side * math.sqrt(3) / 2)]
    assert cutoff_phi(pos, ell) == pytest.approx(expected, abs=1e-12)


def test_cutoff_needs_triples():
    with pytest.raises(ValueError):
        cutoff_phi([(0, 0), (1, 0)], 1.0)


def test_drift_two_particles():
    b = drift_field([(1, 0), (0, 0)], 4 * math.pi, 0.0)
    np.testing.assert_allclose(b, [[-1, 0], [1, 0]], atol=1e-15)


def _brute_drift(pos, chi, eps):
    # independent fixed-order evaluation at 40 digits
    mpmath.mp.dps = 40
    n = len(pos)
    out = []
    for i in range(n):
        bx = by = mpmath.mpf(0)
        for j in range(n):
            if i == j:
                continue
            dx = mpmath.mpf(pos[i][0]) - mpmath.mpf(pos[j][0])
            dy = mpmath.mpf(pos[i][1]) - mpmath.mpf(pos[j][1])
            den = 2 * mpmath.pi * (dx * dx + dy * dy + mpmath.mpf(eps) ** 2)
            bx -= dx / den
            by -= dy / den
        out.append((mpmath.mpf(chi) / n * bx, mpmath.mpf(chi) / n * by))
    return np.array(out, dtype=float)


def test_drift_equilateral_against_brute_force():
    pos = [(0.0, 0.0), (1.0, 0.0), (0.5, math.sqrt(3) / 2)]
    b = drift_field(pos, 2 * math.pi, 0.0)
    ref = _brute_drift(pos, 2 * math.pi, 0.0)
    np.testing.assert_allclose(b, ref, rtol=1e-14, atol=1e-15)
    # each particle is pulled toward the centroid with |b| = (chi/N) sqrt(3)/(2 pi)
    np.testing.assert_allclose(np.hypot(*b.T), 2 * math.pi / 3 * math.sqrt(3) / (2 * math.pi), rtol=1e-14)


def test_drift_random_against_brute_force():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(7, 2))
    np.testing.assert_allclose(drift_field(pos, 5.0, 0.05), _brute_drift(pos.tolist(), 5.0, 0.05), rtol=1e-13)


def test_drift_sums_to_zero_random_configs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 20))
        pos = rng.normal(size=(n, 2)) * rng.uniform(0.01, 10)
        b = drift_field(pos, rng.uniform(0.1, 100), rng.uniform(0, 1) * rng.integers(0, 2))
        assert np.all(np.abs(b.sum(axis=0)) <= 1e-12 * n * max(1.0, np.abs(b).max()))


def test_drift_with_cutoff():
    rng = np.random.default_rng(2)
    pos = rng.normal(size=(6, 2))
    ell = 100.0
    # well separated: the cutoff is inactive
    np.testing.assert_array_equal(drift_field(pos, 3.0, 0.0, cutoff=ell), drift_field(pos, 3.0, 0.0))
    squeezed = pos.copy()
    squeezed[1] = squeezed[0] + 1e-4
    squeezed[2] = squeezed[0] - 1e-4
    assert np.all(drift_field(squeezed, 3.0, 0.0, cutoff=ell) == 0.0)


def test_drift_deterministic_and_coincident_points():
    pos = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    a = drift_field(pos, 3.0, 0.0)
    assert np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, drift_field(pos, 3.0, 0.0))
    np.testing.assert_array_equal(a[0], a[1])


@settings(max_examples=50)
@given(st.integers(2, 150), st.floats(0, 1), st.integers(0, 10**6))
def test_blocked_path_matches(n, eps, seed):
    pos = np.random.default_rng(seed).normal(size=(n, 2))
    naive = drift_field(pos, 4.0, eps)
    blocked = drift_field_blocked(pos, 4.0, eps, block=16)
    scale = np.abs(naive).max()
    assert np.all(np.abs(naive - blocked) <= 1e-10 * scale)
