import itertools
import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kslab.core import InitialLaw, NoiseStream, SimParams
from kslab.diagnostics import (
    NO_COLLISION,
    REFLECTING,
    STICKY,
    DiagnosticsReport,
    NoRealRoots,
    alpha_interval,
    bessel_dimension,
    classify_regimes,
    collision_roots,
    default_triple_threshold,
    density_histogram,
    first_moment_bound,
    fund_bound,
    law_first_moment,
    min_separations,
    path_moment,
    replica_slope,
    slope_fit,
    subset_variance,
    triple_collision_threshold,
)
from kslab.integrator import ParticleSystemState, TrajectoryRecord

PI = math.pi


def test_subset_variance_examples():
    assert subset_variance([(0, 0), (2, 0)]) == pytest.approx(1.0)
    assert subset_variance([(0, 0), (2, 0), (5, 5)], [0, 1]) == pytest.approx(1.0)
    # equilateral triangle of side s: half of sum |x - c|^2 = s^2 / 2
    s = 1.7
    tri = [(0, 0), (s, 0), (s / 2, s * math.sqrt(3) / 2)]
    assert subset_variance(tri) == pytest.approx(s * s / 2, rel=1e-14)
    with pytest.raises(ValueError):
        subset_variance(tri, [1])


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=8))
def test_subset_variance_pairwise_form(points):
    # same quantity through pairwise distances: sum_{i<j} |xi - xj|^2 / (2k)
    pts = np.array(points)
    k = len(pts)
    pair = sum(float(np.sum((pts[i] - pts[j]) ** 2)) for i, j in itertools.combinations(range(k), 2))
    assert subset_variance(pts) == pytest.approx(pair / (2 * k), rel=1e-9, abs=1e-9)


def test_bessel_dimension_examples():
    assert bessel_dimension(10, 4 * PI, 2) == pytest.approx(1.8)
    assert bessel_dimension(32, 4 * PI, 32) == pytest.approx(31.0)
    assert bessel_dimension(5, 10 * PI, 4) == pytest.approx(0.0, abs=1e-15)
    assert bessel_dimension(7, 3.0, 1) == 0.0


@pytest.mark.parametrize("n", range(6, 51))
def test_roots_at_four_pi_n_over_three(n):
    xm, xp = collision_roots(n, 4 * PI * n / 3)
    assert xm == pytest.approx(3.0, abs=1e-12)
    assert xp == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("n", [3, 5, 8, 20])
def test_n_is_a_root_at_triple_threshold(n):
    # delta(N) = 2 there; for N = 3 it is the lower root (roots 3 and 4)
    roots = collision_roots(n, triple_collision_threshold(n))
    assert min(abs(r - n) for r in roots) <= 1e-12 * n
    if n >= 4:
        assert roots[1] == pytest.approx(n, rel=1e-12)


def test_no_real_roots():
    # a = 8 pi N / chi = 3 gives discriminant 16 - 24 < 0
    with pytest.raises(NoRealRoots):
        collision_roots(3, 8 * PI)
    assert classify_regimes(3, 8 * PI).x_minus is None


def _fraction_regimes(n, chi_over_pi):
    # exact oracle with chi given as a rational multiple of pi
    out = {}
    for k in range(2, n + 1):
        d = (k - 1) * (2 - Fraction(chi_over_pi) * k / (4 * n))
        out[k] = NO_COLLISION if d >= 2 else STICKY if d <= 0 else REFLECTING
    return out


def _table(reflecting, sticky=(), n=5):
    return {k: REFLECTING if k in reflecting else STICKY if k in sticky else NO_COLLISION for k in range(2, n + 1)}


@pytest.mark.parametrize("chi_over_pi,expected", [
    (Fraction(5), _table({2})),
    (Fraction(13, 2), _table({2, 5})),
    (Fraction(15, 2), _table({2, 3, 4, 5})),
    (Fraction(10), _table({2, 3}, {4, 5})),
    (Fraction(25), _table(set(), {2, 3, 4, 5})),
])
def test_n5_table(chi_over_pi, expected):
    got = classify_regimes(5, float(chi_over_pi) * PI).regimes
    assert got == expected
    assert _fraction_regimes(5, chi_over_pi) == expected


@pytest.mark.parametrize("n,chi_over_pi", [(10, Fraction(2)), (10, Fraction(16)), (7, Fraction(48, 7)), (12, Fraction(9)),
                                           (40, Fraction(160, 3)), (6, Fraction(24))])
def test_classification_against_fractions(n, chi_over_pi):
    assert classify_regimes(n, float(chi_over_pi) * PI).regimes == _fraction_regimes(n, chi_over_pi)


@pytest.mark.parametrize("n", [3, 4, 6, 9, 25])
def test_below_triple_threshold_only_binary_reflecting(n):
    for frac in (0.1, 0.5, 0.99, 1.0):
        tab = classify_regimes(n, frac * triple_collision_threshold(n))
        assert tab.ks_with(REFLECTING) == [2]
        assert tab.ks_with(NO_COLLISION) == list(range(3, n + 1))


def test_threshold_inequality_up_to_a_million():
    n = np.arange(3, 10**6 + 1, dtype=float)
    assert np.all(8 * PI * (n - 2) / (n - 1) <= 4 * PI * n / 3 * (1 + 1e-15))
    # exact rational form: 6(N-2) <= N(N-1)
    assert all(6 * (m - 2) <= m * (m - 1) for m in range(3, 10**4))


@settings(max_examples=200)
@given(st.integers(3, 200), st.floats(0.01, 2000))
def test_dimension_concave_and_max_location(n, chi):
    d = np.array([bessel_dimension(n, chi, k) for k in range(1, n + 1)])
    assert np.all(np.diff(d, 2) <= 1e-9 * max(1.0, np.abs(d).max()))
    kmax = 2 + int(np.argmax(d[1:]))
    # the real maximizer is (1 + a) / 2 with a = 8 pi N / chi
    xstar = (1 + 8 * PI * n / chi) / 2
    assert abs(kmax - min(max(xstar, 2), n)) <= 1


def test_fund_bound_example():
    # N=8, chi=pi, alpha=0.75, m=1, T=1: (2 sqrt2 + 4 sqrt2)^0.75 / (0.75 (1.5 - 7/8))
    mpmath.mp.dps = 30
    ref = (6 * mpmath.sqrt(2)) ** mpmath.mpf("0.75") / (mpmath.mpf("0.75") * (mpmath.mpf("1.5") - mpmath.mpf(7) / 8))
    assert fund_bound(1.0, 1.0, 0.75, 8, PI) == pytest.approx(float(ref), rel=1e-14)


def test_fund_bound_small_example():
    # N=2, chi=pi, alpha=0.5, m=1, T=0: (2 sqrt2)^0.5 / (0.5 (1 - 1/2)) = 2^(3/4) / 0.25
    assert fund_bound(1.0, 0.0, 0.5, 2, PI) == pytest.approx(2**0.75 / 0.25, rel=1e-14)
    assert fund_bound(1.0, 0.0, 0.5, 2, PI) == pytest.approx(6.72717132, rel=1e-8)


def test_fund_bound_domain_and_pole():
    lo, hi = alpha_interval(8, PI)
    assert lo == pytest.approx(7 / 16) and hi == 1.0
    with pytest.raises(ValueError):
        fund_bound(1.0, 1.0, 0.3, 8, PI)
    with pytest.raises(ValueError):
        fund_bound(0.5, 1.0, 0.75, 8, PI)
    vals = [fund_bound(1.0, 1.0, lo + h, 8, PI) for h in (1e-2, 1e-4, 1e-6)]
    assert vals[0] < vals[1] < vals[2] and vals[2] > 1e5


@given(st.floats(0, 10), st.floats(0, 10))
def test_fund_bound_monotone_in_horizon(t1, t2):
    a, b = sorted((t1, t2))
    assert fund_bound(1.3, a, 0.75, 8, PI) <= fund_bound(1.3, b, 0.75, 8, PI)


def test_first_moment_bound():
    assert first_moment_bound(1.5, 0.25) == 2.0
    with pytest.raises(ValueError):
        first_moment_bound(1.0, -1.0)


def test_law_first_moment():
    # E sqrt(1 + |X|^2) for X standard 2D Gaussian via mpmath: int sqrt(1+s) e^{-s/2}/2 ds
    ref = mpmath.quad(lambda s: mpmath.sqrt(1 + s) * mpmath.exp(-s / 2) / 2, [0, mpmath.inf])
    assert law_first_moment(InitialLaw.standard_gaussian()) == pytest.approx(float(ref), rel=1e-12)
    # uniform disk of radius a: (2/(3a^2)) ((1+a^2)^{3/2} - 1)
    a = 2.0
    assert law_first_moment(InitialLaw.uniform_disk(a)) == pytest.approx(2 / (3 * a * a) * ((1 + a * a) ** 1.5 - 1), rel=1e-12)
    assert law_first_moment(InitialLaw.point_cloud([(0, 0), (3, 4)])) == pytest.approx((1 + math.sqrt(26)) / 2)


def test_min_separations_examples():
    mp, mt = min_separations([(0, 0), (3, 4)])
    assert mp == 5.0 and mt == math.inf
    mp, mt = min_separations([(0, 0), (1, 0), (0, 1), (10, 10)])
    assert mp == 1.0 and mt == pytest.approx(2 + math.sqrt(2))


@settings(max_examples=100)
@given(st.integers(3, 8), st.integers(0, 10**6))
def test_triple_perimeter_against_enumeration(n, seed):
    pos = np.random.default_rng(seed).normal(size=(n, 2))
    mp, mt = min_separations(pos)
    d = lambda i, j: float(np.hypot(*(pos[i] - pos[j])))
    brute_pair = min(d(i, j) for i, j in itertools.combinations(range(n), 2))
    brute = min(d(i, j) + d(j, k) + d(i, k) for i, j, k in itertools.combinations(range(n), 3))
    assert mp == pytest.approx(brute_pair, rel=1e-14)
    assert mt == pytest.approx(brute, rel=1e-14)
    assert mt >= 2 * mp * (1 - 1e-14)


def test_default_triple_threshold():
    assert default_triple_threshold(SimParams(epsilon=1e-3, dt=1e-4)) == pytest.approx(0.1)
    assert default_triple_threshold(SimParams(epsilon=0.1, dt=1e-4)) == pytest.approx(1.0)
    assert default_triple_threshold(SimParams(triple_threshold=0.5)) == 0.5


def _record(times, positions, eps=0.0, dt=0.5):
    p = SimParams(n_particles=len(positions[0]), epsilon=eps, dt=dt, horizon=float(times[-1]))
    return TrajectoryRecord(p, np.asarray(times, float),
                            [ParticleSystemState(t, np.asarray(x, float)) for t, x in zip(times, positions)], 0)


def test_path_moment_examples():
    # constant separation 2 over [0, 1]: integral of 2^(alpha - 2)
    rec = _record([0, 0.5, 1.0], [[(0, 0), (2, 0)]] * 3)
    assert path_moment(rec, 0.5, 0, 1) == pytest.approx(2**-1.5, rel=1e-14)
    # left-point rule: the last state does not contribute
    rec = _record([0, 0.5, 1.0], [[(0, 0), (1, 0)], [(0, 0), (4, 0)], [(0, 0), (0, 0)]])
    assert path_moment(rec, 0.5, 0, 1) == pytest.approx(0.5 * (1 + 4**-1.5), rel=1e-14)
    # coincident particles are floored at sqrt(dt) for singular runs
    rec = _record([0, 0.5, 1.0], [[(0, 0), (0, 0)]] * 3, eps=0.0, dt=0.5)
    assert path_moment(rec, 0.5, 0, 1) == pytest.approx(math.sqrt(0.5) ** -1.5, rel=1e-14)
    rec = _record([0, 0.5, 1.0], [[(0, 0), (0, 0)]] * 3, eps=0.25)
    assert path_moment(rec, 0.5, 0, 1) == pytest.approx(0.25**-1.5, rel=1e-14)
    with pytest.raises(ValueError):
        path_moment(rec, 0.5, 1, 1)


def test_slope_fit_examples():
    t = np.linspace(0, 1, 20)
    s, h = slope_fit(list(zip(t, 3 * t)))
    assert s == pytest.approx(3.0) and h <= 1e-10
    s, h = slope_fit(list(zip(t, np.full(20, 2.5))))
    assert s == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        slope_fit([(1, 0), (1, 1), (1, 2)])
    with pytest.raises(ValueError):
        slope_fit([(0, 0), (1, 1)])


def test_slope_fit_calibration():
    t = np.linspace(0, 2, 30)
    cover = 0
    for rep in range(100):
        y = 1.5 * t + 0.7 * NoiseStream(61, rep).gaussian_pairs(15).ravel()
        s, h = slope_fit(list(zip(t, y)))
        cover += abs(s - 1.5) <= h
    assert cover >= 90


def test_replica_slope_equals_slope_of_mean():
    t = np.linspace(0.5, 1, 11)
    v = np.array([2 * t + 0.1 * np.sin(7 * t * (r + 1)) for r in range(6)])
    s, h = replica_slope(t, v)
    ref, _ = slope_fit(list(zip(t, v.mean(axis=0))))
    assert s == pytest.approx(ref, rel=1e-12)
    assert h > 0


def test_density_histogram():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, size=(1000, 2))
    h = density_histogram(pts, 1.0, 8)
    assert h.sum() == pytest.approx(1.0, abs=1e-12) and h.shape == (8, 8)
    one = density_histogram([(0.3, -0.2)], 1.0, 4)
    assert one.max() == 1.0 and np.count_nonzero(one) == 1
    # reflection x -> -x maps bin i to bins-1-i exactly (points avoid bin edges)
    sym = np.vstack([pts, pts * [-1, 1]])
    hs = density_histogram(sym, 1.0, 7)
    np.testing.assert_array_equal(hs, hs[::-1, :])
    assert density_histogram([(5, 5), (0, 0)], 1.0, 3).sum() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        density_histogram(pts, 1.0, 0)


def test_report_csv_has_bound_columns():
    rep = DiagnosticsReport(SimParams())
    rep.add("m", 1.25, half_width=0.5, bound=2.0, passed=True)
    rep.add("info", 3.0)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "name,estimate,half_width,confidence,n,bound,passed,note"
    assert lines[1].startswith("m,1.25,0.5,0.94999999999999996,1,2,true")
    assert rep.passed
    rep.add("bad", 9.0, bound=1.0, passed=False)
    assert not rep.passed
