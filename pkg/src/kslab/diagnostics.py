"""Functionals of particle configurations and trajectories, collision-regime
arithmetic, moment bounds and the report container."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, stats

from .core import InitialLaw, SimParams
from .kernels import _min_pair, _min_triple_sum

NO_COLLISION = "no_collision"
REFLECTING = "reflecting"
STICKY = "sticky"

# relative tolerance used to snap regime boundaries computed in floating point
BOUNDARY_RTOL = 1e-9


class NoRealRoots(ValueError):
    """``delta_{N,chi}(x) = 2`` has no real solution."""


# --------------------------------------------------------------------------
# subset variances and Bessel dimensions


def subset_variance(positions, subset: Iterable[int] | None = None) -> float:
    """Half the sum of squared distances of ``subset`` to its barycenter."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    idx = np.arange(len(pos)) if subset is None else np.fromiter(subset, dtype=int)
    if len(idx) < 2:
        raise ValueError("subset must contain at least 2 particles")
    sub = pos[idx]
    return 0.5 * float(np.sum((sub - sub.mean(axis=0)) ** 2))


def bessel_dimension(n: int, chi: float, k: float) -> float:
    """``(k - 1)(2 - chi k / (4 pi N))``; ``k`` may be real."""
    return (k - 1.0) * (2.0 - chi * k / (4.0 * math.pi * n))


def collision_roots(n: int, chi: float) -> tuple[float, float]:
    """Roots ``x_- <= x_+`` of ``bessel_dimension(n, chi, x) = 2``."""
    if not chi > 0:
        raise ValueError("chi must be positive")
    a = 8.0 * math.pi * n / chi
    disc = (1.0 + a) ** 2 - 8.0 * a
    if disc < 0:
        raise NoRealRoots(f"negative discriminant {disc:.6g} for N={n}, chi={chi:.6g}")
    s = math.sqrt(disc)
    return (1.0 + a - s) / 2.0, (1.0 + a + s) / 2.0


def _snap(value: float, target: float, scale: float) -> float:
    return target if abs(value - target) <= BOUNDARY_RTOL * max(1.0, scale) else value


@dataclass(frozen=True)
class RegimeTable:
    n: int
    chi: float
    regimes: dict[int, str]
    x_minus: float | None = None
    x_plus: float | None = None

    def ks_with(self, regime: str) -> list[int]:
        return [k for k, r in self.regimes.items() if r == regime]

    def format(self) -> str:
        lines = [f"N={self.n} chi={self.chi:.17g} (chi/pi={self.chi / math.pi:.6g})"]
        if self.x_minus is not None:
            lines.append(f"x_minus={self.x_minus:.17g} x_plus={self.x_plus:.17g}")
        else:
            lines.append("x_minus, x_plus: no real roots")
        lines.append("k,delta,regime")
        for k, reg in self.regimes.items():
            lines.append(f"{k},{bessel_dimension(self.n, self.chi, k):.17g},{reg}")
        return "\n".join(lines)


def classify_regimes(n: int, chi: float) -> RegimeTable:
    """Collision regime of every subsystem size ``k = 2..N``.

    ``delta >= 2``: no collisions; ``delta <= 0``: sticky; otherwise
    reflecting.  Values within ``BOUNDARY_RTOL`` of a boundary count as on it.
    """
    if n < 3:
        raise ValueError("classification needs N >= 3")
    regimes = {}
    for k in range(2, n + 1):
        d = bessel_dimension(n, chi, k)
        scale = (k - 1) * (2.0 + chi * k / (4.0 * math.pi * n))
        d = _snap(_snap(d, 2.0, scale), 0.0, scale)
        regimes[k] = NO_COLLISION if d >= 2.0 else STICKY if d <= 0.0 else REFLECTING
    try:
        xm, xp = collision_roots(n, chi)
    except NoRealRoots:
        xm = xp = None
    return RegimeTable(n, float(chi), regimes, xm, xp)


def triple_collision_threshold(n: int) -> float:
    """``8 pi (N - 2) / (N - 1)``: above it triple collisions happen a.s."""
    return 8.0 * math.pi * (n - 2) / (n - 1)


# --------------------------------------------------------------------------
# moment bounds


def alpha_interval(n: int, chi: float) -> tuple[float, float]:
    return (n - 1) * chi / (2.0 * math.pi * n), 1.0


def fund_bound(first_moment: float, horizon: float, alpha: float, n: int, chi: float) -> float:
    """Upper bound on ``E int_0^T |X^1 - X^2|^{alpha - 2} ds``."""
    lo, hi = alpha_interval(n, chi)
    if not lo < alpha < hi:
        raise ValueError(f"alpha={alpha} outside ((N-1)chi/(2 pi N), 1) = ({lo:.6g}, 1)")
    if first_moment < 1:
        raise ValueError("first_moment is <f0, sqrt(1+|x|^2)> and cannot be below 1")
    num = (2.0 * math.sqrt(2.0) * first_moment + 4.0 * math.sqrt(2.0) * horizon) ** alpha
    return num / (alpha * (2.0 * alpha - (n - 1) * chi / (math.pi * n)))


def first_moment_bound(first_moment: float, t: float) -> float:
    if t < 0:
        raise ValueError("t must be nonnegative")
    return first_moment + 2.0 * t


def law_first_moment(law: InitialLaw) -> float:
    """``<f0, sqrt(1 + |x|^2)>`` for the supported initial laws."""
    if law.kind == "standard_gaussian":
        # |X|^2 is exponential with mean 2
        val, _ = integrate.quad(lambda s: math.sqrt(1.0 + s) * 0.5 * math.exp(-0.5 * s), 0.0, math.inf,
                                epsabs=1e-13, epsrel=1e-13)
        return val
    if law.kind == "uniform_disk":
        a = law.radius
        val, _ = integrate.quad(lambda r: math.sqrt(1.0 + r * r) * 2.0 * r / (a * a), 0.0, a,
                                epsabs=1e-13, epsrel=1e-13)
        return val
    if law.kind == "point_cloud":
        pts = np.asarray(law.points, dtype=float).reshape(-1, 2)
        return float(np.mean(np.sqrt(1.0 + np.sum(pts**2, axis=1))))
    raise ValueError("first moment of a product law depends on the particle index")


# --------------------------------------------------------------------------
# separations and trajectory functionals


def min_separations(positions) -> tuple[float, float]:
    """Smallest pairwise distance and smallest triple perimeter (inf if N < 3)."""
    pos = np.ascontiguousarray(positions, dtype=float).reshape(-1, 2)
    if len(pos) < 2:
        raise ValueError("need at least 2 positions")
    triple = float(_min_triple_sum(pos)) if len(pos) >= 3 else math.inf
    return float(_min_pair(pos)), triple


def default_triple_threshold(params: SimParams) -> float:
    if params.triple_threshold is not None:
        return params.triple_threshold
    return max(10.0 * params.epsilon, 10.0 * math.sqrt(params.dt))


def path_moment(trajectory, alpha: float, i: int, j: int, floor: float | None = None) -> float:
    """Left-point Riemann sum of ``|X^i - X^j|^{alpha - 2}`` over the recorded grid.

    Distances below ``floor`` (default: the run's epsilon, or ``sqrt(dt)``
    for singular runs) are raised to it.
    """
    if i == j:
        raise ValueError("i and j must differ")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if floor is None:
        p = trajectory.params
        floor = p.epsilon if p.epsilon > 0 else math.sqrt(p.dt)
    pos = trajectory.positions()
    d = np.hypot(*(pos[:-1, i] - pos[:-1, j]).T)
    return float(np.sum(np.diff(trajectory.times) * np.maximum(d, floor) ** (alpha - 2.0)))


def slope_fit(series: Sequence[tuple[float, float]], confidence: float = 0.95) -> tuple[float, float]:
    """Least-squares slope and its ``confidence`` half-width (Student t)."""
    arr = np.asarray(series, dtype=float).reshape(-1, 2)
    if len(arr) < 3:
        raise ValueError("need at least 3 points")
    t, y = arr[:, 0], arr[:, 1]
    tc = t - t.mean()
    sxx = float(tc @ tc)
    if not sxx > 0:
        raise ValueError("degenerate time grid")
    slope = float(tc @ (y - y.mean())) / sxx
    resid = y - y.mean() - slope * tc
    dof = len(t) - 2
    s2 = float(resid @ resid) / dof
    half = stats.t.ppf(0.5 + confidence / 2.0, dof) * math.sqrt(s2 / sxx)
    return slope, float(half)


def replica_slope(times, values, confidence: float = 0.95) -> tuple[float, float]:
    """Slope of the ensemble mean of ``values`` (shape ``(replicas, len(times))``)
    with a half-width from the spread of per-replica slopes.

    The least-squares slope of the mean equals the mean of per-replica slopes,
    so the replica spread gives an honest interval for correlated series.
    """
    t = np.asarray(times, dtype=float)
    v = np.atleast_2d(np.asarray(values, dtype=float))
    tc = t - t.mean()
    slopes = (v - v.mean(axis=1, keepdims=True)) @ tc / float(tc @ tc)
    n = len(slopes)
    if n < 2:
        return float(slopes[0]), math.inf
    half = stats.t.ppf(0.5 + confidence / 2.0, n - 1) * slopes.std(ddof=1) / math.sqrt(n)
    return float(slopes.mean()), float(half)


def mean_ci(values, confidence: float = 0.95) -> tuple[float, float]:
    v = np.asarray(values, dtype=float).ravel()
    if len(v) < 2:
        return float(v.mean()), math.inf
    return float(v.mean()), float(stats.norm.ppf(0.5 + confidence / 2.0) * v.std(ddof=1) / math.sqrt(len(v)))


def density_histogram(positions, extent: float, bins: int) -> np.ndarray:
    """Empirical measure on the square ``[-extent, extent]^2``, ``bins x bins`` cells.

    Each particle carries mass ``1/N``; particles outside the square are dropped.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    h, _, _ = np.histogram2d(pos[:, 0], pos[:, 1], bins=bins, range=[[-extent, extent], [-extent, extent]])
    return h / len(pos)


# --------------------------------------------------------------------------
# report container


@dataclass
class CIEntry:
    estimate: float
    half_width: float = 0.0
    confidence: float = 0.95
    n: int = 1
    bound: float | None = None
    passed: bool | None = None
    note: str = ""


@dataclass
class DiagnosticsReport:
    params: SimParams
    scalars: dict[str, CIEntry] = field(default_factory=dict)
    series: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, name: str, estimate: float, **kw) -> CIEntry:
        entry = CIEntry(float(estimate), **kw)
        self.scalars[name] = entry
        return entry

    def add_series(self, name: str, times, values) -> None:
        self.series[name] = (np.asarray(times, dtype=float), np.asarray(values, dtype=float))

    @property
    def passed(self) -> bool:
        return all(e.passed is not False for e in self.scalars.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "estimate", "half_width", "confidence", "n", "bound", "passed", "note"])
        for name, e in self.scalars.items():
            w.writerow([
                name, fmt(e.estimate), fmt(e.half_width), fmt(e.confidence), e.n,
                "" if e.bound is None else fmt(e.bound),
                "" if e.passed is None else str(bool(e.passed)).lower(), e.note,
            ])
        return buf.getvalue()

    def series_csv(self, name: str) -> str:
        t, v = self.series[name]
        lines = ["time,value"] + [f"{fmt(a)},{fmt(b)}" for a, b in zip(t, v)]
        return "\n".join(lines) + "\n"


def fmt(x: float) -> str:
    """17 significant digits, the serialization used by every CSV output."""
    return format(float(x), ".17g")
