"""Supercritical dynamics with masses: mass-scaled diffusion, mass-weighted
drift and sticky merges of colliding groups heavy enough to stay together.

Masses are stored as integer multiples of ``1/N`` so the total is exactly 1
after any sequence of merges.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction

import numba
import numpy as np

from .core import NoiseStream, SimParams, sample_initial
from .integrator import _checksum_update, _chunks, _digest, _record_steps, _slots
from .kernels import TWO_PI, _drift_into


@dataclass(frozen=True)
class ClusterState:
    """Positions ``(m, 2)`` and integer mass units ``(m,)`` out of ``n_total``."""

    time: float
    positions: np.ndarray
    units: np.ndarray
    n_total: int

    def __post_init__(self):
        if len(self.positions) != len(self.units):
            raise ValueError("positions and units must have equal length")
        if int(np.sum(self.units)) != self.n_total:
            raise ValueError("masses must sum to 1")
        if np.any(self.units < 1):
            raise ValueError("masses must be positive")

    @classmethod
    def singletons(cls, positions, time: float = 0.0) -> "ClusterState":
        pos = np.asarray(positions, dtype=float).reshape(-1, 2)
        return cls(time, pos, np.ones(len(pos), dtype=np.int64), len(pos))

    @property
    def masses(self) -> np.ndarray:
        return self.units / self.n_total

    def mass_fractions(self) -> list[Fraction]:
        return [Fraction(int(k), self.n_total) for k in self.units]

    def barycenter(self) -> np.ndarray:
        return self.units @ self.positions / self.n_total


def min_merge_units(n: int, chi: float) -> int:
    """Smallest ``k`` with ``k / N >= 8 pi / chi`` (inclusive, boundary snapped)."""
    x = 8.0 * math.pi * n / chi
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, x):
        return int(r)
    return math.ceil(x)


def is_boundary_case(n: int, chi: float) -> bool:
    """True when ``8 pi N / chi`` is (numerically) an integer, so some merge
    would have ``S`` exactly equal to ``8 pi / chi``."""
    x = 8.0 * math.pi * n / chi
    return abs(x - round(x)) <= 1e-9 * max(1.0, x)


def allowed_mass_set(n: int, chi: float) -> set[Fraction]:
    """``{1/N} U {k/N : ceil(8 pi N / chi) <= k <= N}``."""
    if not chi > 0:
        raise ValueError("chi must be positive")
    k1 = max(min_merge_units(n, chi), 2)
    return {Fraction(1, n)} | {Fraction(k, n) for k in range(k1, n + 1)}


def default_merge_threshold(eps: float, dt: float) -> float:
    return max(eps, 10.0 * math.sqrt(dt))


def cluster_drift(state: ClusterState, chi: float, eps: float = 0.0) -> np.ndarray:
    """``b_i = chi sum_j nu_j K_eps(x_i - x_j)``."""
    pos = np.ascontiguousarray(state.positions, dtype=float)
    out = np.empty_like(pos)
    _drift_into(pos, state.units.astype(float), chi / (TWO_PI * state.n_total), float(eps) ** 2, out)
    return out


def step_cluster(state: ClusterState, chi: float, eps: float, dt: float,
                 noise: NoiseStream | None = None, increments=None) -> ClusterState:
    """Euler step ``x_i += sqrt(2/(N nu_i)) sqrt(dt) xi_i + dt b_i``; masses unchanged."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    m = len(state.units)
    xi = noise.gaussian_pairs(m) if increments is None else np.asarray(increments, dtype=float).reshape(m, 2)
    scale = np.sqrt(2.0 / state.units)[:, None] * math.sqrt(dt)
    pos = state.positions + scale * xi + dt * cluster_drift(state, chi, eps)
    return ClusterState(state.time + dt, pos, state.units.copy(), state.n_total)


@numba.njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@numba.njit(cache=True)
def _merge_inplace(pos, units, m, threshold, k_min):
    """Merge threshold-graph components of total units >= k_min.

    Works on the first ``m`` rows, returns the new count and whether any merge
    happened at exactly ``k_min`` units.
    """
    parent = np.arange(m)
    t2 = threshold * threshold
    for i in range(m):
        for j in range(i + 1, m):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            if dx * dx + dy * dy <= t2:
                ri = _find(parent, i)
                rj = _find(parent, j)
                if ri != rj:
                    if ri < rj:
                        parent[rj] = ri
                    else:
                        parent[ri] = rj
    total = np.zeros(m, dtype=np.int64)
    size = np.zeros(m, dtype=np.int64)
    wx = np.zeros(m)
    wy = np.zeros(m)
    for i in range(m):
        root = _find(parent, i)
        total[root] += units[i]
        size[root] += 1
        wx[root] += units[i] * pos[i, 0]
        wy[root] += units[i] * pos[i, 1]
    new_pos = np.empty((m, 2))
    new_units = np.empty(m, dtype=np.int64)
    count = 0
    boundary = False
    for i in range(m):
        root = _find(parent, i)
        if size[root] >= 2 and total[root] >= k_min:
            # roots are the smallest index of their component
            if root == i:
                new_pos[count, 0] = wx[root] / total[root]
                new_pos[count, 1] = wy[root] / total[root]
                new_units[count] = total[root]
                if total[root] == k_min:
                    boundary = True
                count += 1
        else:
            new_pos[count, 0] = pos[i, 0]
            new_pos[count, 1] = pos[i, 1]
            new_units[count] = units[i]
            count += 1
    for i in range(count):
        pos[i, 0] = new_pos[i, 0]
        pos[i, 1] = new_pos[i, 1]
        units[i] = new_units[i]
    for i in range(count, m):
        pos[i, 0] = np.nan
        pos[i, 1] = np.nan
        units[i] = 0
    return count, boundary


def merge_components(state: ClusterState, chi: float, threshold: float) -> ClusterState:
    """Replace each connected group (pairwise links at distance <= threshold)
    of total mass ``S >= 8 pi / chi`` by one particle of mass ``S`` at its
    mass-weighted centroid.  Survivors keep ascending original order."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    pos = np.array(state.positions, dtype=float)
    units = np.array(state.units, dtype=np.int64)
    count, _ = _merge_inplace(pos, units, len(units), float(threshold), min_merge_units(state.n_total, chi))
    return ClusterState(state.time, pos[:count], units[:count], state.n_total)


@numba.njit(cache=True, nogil=True)
def _advance_clusters(pos, units, count, xi, chi, eps2, dt, n_total, threshold, k_min,
                      step0, rec_slot, snap_pos, snap_units, coalesce_step, boundary_merges):
    n_rep, n_steps, n = xi.shape[0], xi.shape[1], xi.shape[2]
    coef = chi / (TWO_PI * n_total)
    sq = math.sqrt(dt)
    b = np.empty((n, 2))
    w = np.empty(n)
    for r in range(n_rep):
        p = pos[r]
        u = units[r]
        for s in range(n_steps):
            m = count[r]
            if m > 1:
                for i in range(m):
                    w[i] = u[i]
                _drift_into(p[:m], w[:m], coef, eps2, b[:m])
                for i in range(m):
                    c = math.sqrt(2.0 / u[i]) * sq
                    p[i, 0] = p[i, 0] + c * xi[r, s, i, 0] + dt * b[i, 0]
                    p[i, 1] = p[i, 1] + c * xi[r, s, i, 1] + dt * b[i, 1]
                m, boundary = _merge_inplace(p, u, m, threshold, k_min)
                if boundary:
                    boundary_merges[r] += 1
                count[r] = m
                if m == 1 and coalesce_step[r] < 0:
                    coalesce_step[r] = step0 + s + 1
            else:
                # a lone cluster of mass 1 diffuses with coefficient sqrt(2/N)
                c = math.sqrt(2.0 / u[0]) * sq
                p[0, 0] = p[0, 0] + c * xi[r, s, 0, 0]
                p[0, 1] = p[0, 1] + c * xi[r, s, 0, 1]
            if rec_slot[s] >= 0:
                snap_pos[r, rec_slot[s]] = p
                snap_units[r, rec_slot[s]] = u


@dataclass
class ClusterEnsemble:
    """Snapshots padded to ``N`` rows (NaN positions, zero units past the count)."""

    params: SimParams
    times: np.ndarray
    positions: np.ndarray  # (replicas, len(times), N, 2)
    units: np.ndarray  # (replicas, len(times), N)
    coalesce_step: np.ndarray
    boundary_merges: np.ndarray
    merge_threshold: float
    checksums: list[int]

    def counts(self) -> np.ndarray:
        return np.count_nonzero(self.units, axis=-1)

    def state(self, replica: int, k: int) -> ClusterState:
        m = int(np.count_nonzero(self.units[replica, k]))
        return ClusterState(float(self.times[k]), self.positions[replica, k, :m].copy(),
                            self.units[replica, k, :m].copy(), self.params.n_particles)


def simulate_cluster_ensemble(
    params: SimParams,
    record_every: int | None = None,
    merge_threshold: float | None = None,
    streams: list[NoiseStream] | None = None,
) -> ClusterEnsemble:
    """Replicas of the mass dynamics started from ``N`` unit-mass particles.

    Each step moves the particles, then merges once.  Every replica draws
    ``N`` Gaussian pairs per step regardless of how many particles remain.
    """
    record_every = record_every or params.record_every
    n, dt, n_steps = params.n_particles, params.dt, params.n_steps
    if merge_threshold is None:
        merge_threshold = params.merge_threshold or default_merge_threshold(params.epsilon, dt)
    if streams is None:
        streams = [NoiseStream(params.seed, r) for r in range(params.replicas)]
    n_rep = len(streams)
    k_min = min_merge_units(n, params.chi)
    pos = np.stack([sample_initial(params.initial_law, n, s) for s in streams])
    units = np.ones((n_rep, n), dtype=np.int64)
    count = np.full(n_rep, n, dtype=np.int64)
    coalesce = np.full(n_rep, -1, dtype=np.int64)
    boundary = np.zeros(n_rep, dtype=np.int64)
    # merges already present in the initial configuration
    for r in range(n_rep):
        count[r], hit = _merge_inplace(pos[r], units[r], n, float(merge_threshold), k_min)
        boundary[r] += hit
        if count[r] == 1:
            coalesce[r] = 0
    rec_steps = _record_steps(n_steps, record_every)
    times = np.concatenate([[0.0], rec_steps * dt])
    snap_pos = np.empty((n_rep, len(times), n, 2))
    snap_units = np.empty((n_rep, len(times), n), dtype=np.int64)
    snap_pos[:, 0] = pos
    snap_units[:, 0] = units
    hashes = [hashlib.blake2b(digest_size=8) for _ in range(n_rep)]
    for start, length in _chunks(n_steps, n * n_rep):
        xi = np.empty((n_rep, length, n, 2))
        for r, stream in enumerate(streams):
            g = stream.gaussian_pairs(length * n)
            _checksum_update(hashes[r], g)
            xi[r] = g.reshape(length, n, 2)
        _advance_clusters(pos, units, count, xi, float(params.chi), float(params.epsilon) ** 2, dt, n,
                          float(merge_threshold), k_min, start, _slots(start, length, rec_steps),
                          snap_pos, snap_units, coalesce, boundary)
    return ClusterEnsemble(params, times, snap_pos, snap_units, coalesce, boundary,
                           float(merge_threshold), [_digest(h) for h in hashes])
