"""Squared Bessel oracle and the statistical test kit.

``R_t / t`` for a squared Bessel process of dimension ``delta`` started at
``x0`` is non-central chi-square with ``delta`` degrees of freedom and
non-centrality ``x0 / t``.  Sampling uses the Poisson mixture
``K ~ Poisson(x0 / (2t))``, ``R_t = t * chi2(delta + 2K)``, drawn by inverse
transform from two uniforms so every draw costs exactly one noise block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .core import NoiseStream

TAU = 2.0 * math.pi


@dataclass(frozen=True)
class BesqSpec:
    dimension: float
    start: float = 0.0

    def __post_init__(self):
        if not self.start >= 0:
            raise ValueError("start must be nonnegative")


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n_samples: int

    __test__ = False  # not a pytest class


def _check_dim(spec: BesqSpec):
    if not spec.dimension > 0:
        raise ValueError(
            f"dimension {spec.dimension} <= 0 is unsupported; use frozen-at-zero semantics at the caller"
        )


def besq_sample_many(spec: BesqSpec, t: float, noise: NoiseStream, n: int, start=None) -> np.ndarray:
    """``n`` exact draws of ``R_t``; ``start`` may override ``spec.start`` per draw."""
    _check_dim(spec)
    if not t > 0:
        raise ValueError("t must be positive")
    x0 = spec.start if start is None else np.asarray(start, dtype=float)
    u = noise.uniform_pairs(n) + 2.0**-54  # in (0, 1)
    mu = np.broadcast_to(np.asarray(x0, dtype=float) / (2.0 * t), (n,))
    k = np.where(mu > 0, stats.poisson.ppf(u[:, 0], np.where(mu > 0, mu, 1.0)), 0.0)
    shape = 0.5 * spec.dimension + k
    return 2.0 * t * special.gammaincinv(shape, u[:, 1])


def besq_sample(spec: BesqSpec, t: float, noise: NoiseStream) -> float:
    """One exact draw of ``R_t``."""
    return float(besq_sample_many(spec, t, noise, 1)[0])


def besq_path(spec: BesqSpec, times: Sequence[float], noise: NoiseStream, n: int) -> np.ndarray:
    """``n`` exact skeletons of the process on the increasing grid ``times``.

    ``times[0]`` is the start time; returns shape ``(n, len(times))``.
    """
    times = np.asarray(times, dtype=float)
    out = np.empty((n, len(times)))
    out[:, 0] = spec.start
    for k in range(1, len(times)):
        out[:, k] = besq_sample_many(spec, times[k] - times[k - 1], noise, n, start=out[:, k - 1])
    return out


def besq_cdf(spec: BesqSpec, t: float, y, tol: float = 1e-15, max_terms: int = 200_000):
    """``P(R_t <= y)`` by the Poisson-weighted series of central chi-square cdfs."""
    _check_dim(spec)
    if not t > 0:
        raise ValueError("t must be positive")
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    half_dim = 0.5 * spec.dimension
    arg = np.maximum(y, 0.0) / (2.0 * t)
    mu = spec.start / (2.0 * t)
    if mu == 0.0:
        out = special.gammainc(half_dim, arg)
    else:
        k_hi = int(mu + 12.0 * math.sqrt(mu) + 60)
        if k_hi > max_terms:
            raise ArithmeticError(f"series needs more than {max_terms} terms (x0/(2t)={mu:g})")
        k = np.arange(k_hi + 1)
        w = stats.poisson.pmf(k, mu)
        if stats.poisson.sf(k_hi, mu) > tol:
            raise ArithmeticError("Poisson tail exceeds tolerance; increase max_terms")
        out = special.gammainc(half_dim + k[None, :], arg[:, None]) @ w
    out = np.where(y <= 0, 0.0, np.clip(out, 0.0, 1.0))
    return float(out[0]) if scalar else out


def wrap_angle(theta):
    """Representative of ``theta`` modulo 2 pi in ``[0, 2 pi)``."""
    th = np.asarray(theta, dtype=float)
    w = th - TAU * np.floor(th / TAU)
    w = np.where(w >= TAU, 0.0, w)
    return float(w) if w.ndim == 0 else w


def angular_path_sample(radial, noise: NoiseStream) -> np.ndarray:
    """Wrapped angle path driven by ``d(theta) = r^{-1/2} d(gamma)``.

    ``radial`` is a sequence of ``(time, r)`` pairs.  A uniform angle is
    drawn at the first time, then each interval adds a Gaussian with variance
    ``dt / r`` evaluated at its left end.  Returns ``(m, 2)`` rows of
    ``(time, angle)``.
    """
    rad = np.asarray(radial, dtype=float).reshape(-1, 2)
    t, r = rad[:, 0], rad[:, 1]
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be increasing")
    if np.any(r[1:-1] <= 0) or (len(r) > 1 and r[0] <= 0):
        raise ValueError("radial values must be strictly positive where they drive the angle")
    theta0 = TAU * noise.uniforms(1)[0]
    m = len(t) - 1
    g = noise.gaussian_pairs((m + 1) // 2).ravel()[:m]
    incr = np.sqrt(np.diff(t) / r[:-1]) * g
    unwrapped = theta0 + np.concatenate([[0.0], np.cumsum(incr)])
    return np.column_stack([t, wrap_angle(unwrapped)])


def angular_paths_with_floor(times, radial: np.ndarray, noise: NoiseStream, floor: float = 1e-12) -> np.ndarray:
    """Batch angle sampler for radial skeletons that may touch zero.

    ``radial`` has shape ``(n, len(times))``.  The angle is redrawn uniformly
    at the first grid time after any point where the radius is at or below
    ``floor``; elsewhere it follows :func:`angular_path_sample`'s increments.
    """
    times = np.asarray(times, dtype=float)
    n, m = radial.shape
    theta = TAU * noise.uniforms(n)
    out = np.empty((n, m))
    out[:, 0] = theta
    dt = np.diff(times)
    for k in range(1, m):
        g = noise.gaussian_pairs(n)[:, 0]
        fresh = TAU * noise.uniforms(n)
        r = radial[:, k - 1]
        ok = r > floor
        step = np.sqrt(dt[k - 1] / np.where(ok, r, 1.0)) * g
        theta = np.where(ok, theta + step, fresh)
        out[:, k] = theta
    return wrap_angle(out)


def ks_statistic(samples, cdf: Callable) -> TestResult:
    """Two-sided one-sample Kolmogorov-Smirnov test, asymptotic p-value."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = len(x)
    if n < 1:
        raise ValueError("need at least one sample")
    try:
        f = np.asarray(cdf(x), dtype=float)
        if f.shape != x.shape:
            raise ValueError
    except (TypeError, ValueError):
        f = np.array([cdf(v) for v in x], dtype=float)
    i = np.arange(1, n + 1)
    d = max(float(np.max(i / n - f)), float(np.max(f - (i - 1) / n)))
    return TestResult(d, float(special.kolmogorov(math.sqrt(n) * d)), n)


def chi_square_uniformity(counts) -> TestResult:
    """Pearson statistic against equal cell probabilities."""
    c = np.asarray(counts, dtype=float)
    total = c.sum()
    if not total > 0:
        raise ValueError("total count must be positive")
    expected = total / len(c)
    stat = float(np.sum((c - expected) ** 2) / expected)
    return TestResult(stat, float(stats.chi2.sf(stat, len(c) - 1)), int(total))
