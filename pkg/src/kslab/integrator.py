"""Euler-Maruyama stepping for the N-particle system, the regularized pair
difference and the cubed pair process ``Z = |D|^2 D``.

Ensembles are advanced replica by replica inside numba kernels; each replica
owns its :class:`~kslab.core.NoiseStream`, so a replica simulated alone is
bit-identical to the same replica simulated inside a batch.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import NoiseStream, SimParams, sample_initial
from .kernels import TWO_PI, _drift_into, _min_pair, _min_triple_sum, _phi, kernel_regularized

# pairs of Gaussians generated per chunk across all replicas
_CHUNK_PAIRS = 1 << 21


class IntegrationError(FloatingPointError):
    """A step produced a non-finite state."""

    def __init__(self, step: int, time: float, replica: int = 0):
        self.step = step
        self.time = time
        self.replica = replica
        # (times, snapshots, replica indices) recorded before the failure, if any
        self.partial = None
        super().__init__(f"non-finite state at step {step} (t={time:.17g}), replica {replica}")


@dataclass(frozen=True)
class ParticleSystemState:
    time: float
    positions: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")


@dataclass(frozen=True)
class PairState:
    time: float
    z: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        if self.frozen and np.any(self.z != 0.0):
            raise ValueError("a frozen pair state must sit at the origin")


@dataclass
class TrajectoryRecord:
    params: SimParams
    times: np.ndarray
    states: list
    noise_checksum: int

    def positions(self) -> np.ndarray:
        """Stacked positions, shape ``(len(times), N, 2)``."""
        return np.stack([s.positions for s in self.states])


@dataclass
class EnsembleResult:
    """Snapshots and per-replica running statistics of an ensemble run.

    ``snapshots`` has shape ``(replicas, len(times), N, 2)``.  ``stats`` holds
    whatever the run was asked to track (``variance``: ``(replicas, steps+1)``
    full-set subset variance; ``min_pair``/``min_triple``: running minima over
    the grid; ``tau_step``: first step with triple perimeter at or below the
    threshold, -1 if none; ``path_moment``: left-point sum for particles 0, 1).
    """

    params: SimParams
    times: np.ndarray
    snapshots: np.ndarray
    checksums: list[int]
    stats: dict[str, np.ndarray] = field(default_factory=dict)


def default_freeze_radius(dt: float) -> float:
    return 10.0 * dt**0.75


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _full_variance(pos):
    n = pos.shape[0]
    cx = 0.0
    cy = 0.0
    for i in range(n):
        cx += pos[i, 0]
        cy += pos[i, 1]
    cx /= n
    cy /= n
    s = 0.0
    for i in range(n):
        s += (pos[i, 0] - cx) ** 2 + (pos[i, 1] - cy) ** 2
    return 0.5 * s


@numba.njit(cache=True, nogil=True)
def _advance_system(
    pos, xi, chi, eps2, ell, dt, step0, rec_slot, snaps,
    track_var, var_out, track_sep, min_pair, min_triple, theta, tau_step,
    track_moment, moment_exp, moment_floor, moment,
):
    n_rep, n_steps, n = xi.shape[0], xi.shape[1], xi.shape[2]
    coef = chi / (TWO_PI * n)
    sq = math.sqrt(2.0 * dt)
    ones = np.ones(n)
    b = np.empty((n, 2))
    failed = np.full(n_rep, -1)
    for r in range(n_rep):
        p = pos[r]
        for s in range(n_steps):
            if track_moment:
                d = math.hypot(p[0, 0] - p[1, 0], p[0, 1] - p[1, 1])
                moment[r] += dt * max(d, moment_floor) ** moment_exp
            _drift_into(p, ones, coef, eps2, b)
            if ell > 0.0:
                phi = _phi(_min_triple_sum(p), ell)
                for i in range(n):
                    b[i, 0] *= phi
                    b[i, 1] *= phi
            ok = True
            for i in range(n):
                p[i, 0] = p[i, 0] + sq * xi[r, s, i, 0] + dt * b[i, 0]
                p[i, 1] = p[i, 1] + sq * xi[r, s, i, 1] + dt * b[i, 1]
                if not (math.isfinite(p[i, 0]) and math.isfinite(p[i, 1])):
                    ok = False
            if not ok:
                failed[r] = step0 + s + 1
                break
            if rec_slot[s] >= 0:
                snaps[r, rec_slot[s]] = p
            if track_var:
                var_out[r, s] = _full_variance(p)
            if track_sep:
                mp = _min_pair(p)
                if mp < min_pair[r]:
                    min_pair[r] = mp
                if n >= 3:
                    mt = _min_triple_sum(p)
                    if mt < min_triple[r]:
                        min_triple[r] = mt
                    if tau_step[r] < 0 and mt <= theta:
                        tau_step[r] = step0 + s + 1
    return failed


@numba.njit(cache=True)
def _sigma_xi(zx, zy, ex, ey):
    # sigma(z) xi = 2|z|^{-4/3} (|z|^2 xi + 2 z (z . xi)); sigma(0) = 0
    r2 = zx * zx + zy * zy
    if r2 == 0.0:
        return 0.0, 0.0
    c = 2.0 * r2 ** (-2.0 / 3.0)
    dot = zx * ex + zy * ey
    return c * (r2 * ex + 2.0 * zx * dot), c * (r2 * ey + 2.0 * zy * dot)


@numba.njit(cache=True)
def _cubed_drift(zx, zy, chi):
    r2 = zx * zx + zy * zy
    if r2 == 0.0:
        return 0.0, 0.0
    c = (16.0 - 3.0 * chi / TWO_PI) * r2 ** (-1.0 / 3.0)
    return c * zx, c * zy


@numba.njit(cache=True, nogil=True)
def _advance_cubed(z, frozen, xi, chi, dt, freeze_radius, can_freeze, rec_slot, snaps, snap_frozen):
    n_rep, n_steps = xi.shape[0], xi.shape[1]
    sq = math.sqrt(dt)
    for r in range(n_rep):
        for s in range(n_steps):
            if not frozen[r]:
                zx, zy = z[r, 0], z[r, 1]
                sx, sy = _sigma_xi(zx, zy, xi[r, s, 0], xi[r, s, 1])
                bx, by = _cubed_drift(zx, zy, chi)
                zx = zx + sq * sx + dt * bx
                zy = zy + sq * sy + dt * by
                if can_freeze and math.hypot(zx, zy) <= freeze_radius:
                    zx = 0.0
                    zy = 0.0
                    frozen[r] = True
                z[r, 0] = zx
                z[r, 1] = zy
            if rec_slot[s] >= 0:
                snaps[r, rec_slot[s], 0] = z[r, 0]
                snaps[r, rec_slot[s], 1] = z[r, 1]
                snap_frozen[r, rec_slot[s]] = frozen[r]


@numba.njit(cache=True, nogil=True)
def _advance_pair_regularized(d, xi, chi, eps2, dt):
    n_rep, n_steps = xi.shape[0], xi.shape[1]
    sq = 2.0 * math.sqrt(dt)
    for r in range(n_rep):
        for s in range(n_steps):
            dx, dy = d[r, 0], d[r, 1]
            r2 = dx * dx + dy * dy + eps2
            inv = 1.0 / r2 if r2 > 0.0 else 0.0
            c = -chi * inv / TWO_PI
            d[r, 0] = dx + sq * xi[r, s, 0] + dt * c * dx
            d[r, 1] = dy + sq * xi[r, s, 1] + dt * c * dy


# --------------------------------------------------------------------------
# helpers


def _checksum_update(h, arr: np.ndarray) -> None:
    h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _digest(h) -> int:
    return int.from_bytes(h.digest(), "little")


def _record_steps(n_steps: int, record_every: int) -> np.ndarray:
    """Global step indices (1-based, after the step) whose states are kept."""
    steps = list(range(record_every, n_steps + 1, record_every))
    if not steps or steps[-1] != n_steps:
        steps.append(n_steps)
    return np.asarray(steps, dtype=np.int64)


def _chunks(n_steps: int, pairs_per_step: int):
    size = max(1, _CHUNK_PAIRS // max(1, pairs_per_step))
    for start in range(0, n_steps, size):
        yield start, min(size, n_steps - start)


def _slots(start: int, length: int, rec_steps: np.ndarray) -> np.ndarray:
    slots = np.full(length, -1, dtype=np.int64)
    # slot 0 holds the initial state
    for k, st in enumerate(rec_steps):
        if start < st <= start + length:
            slots[st - start - 1] = k + 1
    return slots


# --------------------------------------------------------------------------
# N-particle system


def step_system(
    state: ParticleSystemState,
    params: SimParams,
    noise: NoiseStream | None = None,
    increments: np.ndarray | None = None,
) -> ParticleSystemState:
    """One explicit Euler step ``x += sqrt(2 dt) xi + dt b(x)``.

    ``increments`` injects the standard Gaussians ``xi`` (shape ``(N, 2)``)
    instead of drawing them from ``noise``.
    """
    pos = np.array(state.positions, dtype=float).reshape(1, -1, 2)
    n = pos.shape[1]
    if increments is None:
        if noise is None:
            raise ValueError("either noise or increments is required")
        increments = noise.gaussian_pairs(n)
    xi = np.ascontiguousarray(increments, dtype=float).reshape(1, 1, n, 2)
    failed = _run_system_kernel(pos, xi, params, 0, np.full(1, -1), np.empty((1, 1, n, 2)))
    if failed[0] >= 0:
        raise IntegrationError(0, state.time + params.dt)
    return ParticleSystemState(state.time + params.dt, pos[0])


def _run_system_kernel(pos, xi, params, step0, slots, snaps, tracks=None):
    tracks = tracks or {}
    n_rep, n_steps = xi.shape[0], xi.shape[1]
    dummy2 = np.empty((n_rep, 1))
    dummy1 = np.empty(n_rep)
    var_out = tracks.get("variance_chunk", dummy2)
    return _advance_system(
        pos, xi, float(params.chi), float(params.epsilon) ** 2,
        float(params.ell) if params.ell else -1.0, float(params.dt), step0, slots, snaps,
        "variance_chunk" in tracks, var_out,
        "min_pair" in tracks, tracks.get("min_pair", dummy1), tracks.get("min_triple", dummy1),
        float(tracks.get("theta", 0.0)), tracks.get("tau_step", np.full(n_rep, -1)),
        "path_moment" in tracks, float(tracks.get("moment_exp", 0.0)),
        float(tracks.get("moment_floor", 0.0)), tracks.get("path_moment", dummy1),
    )


def simulate_ensemble(
    params: SimParams,
    record_every: int | None = None,
    *,
    streams: list[NoiseStream] | None = None,
    initial: np.ndarray | None = None,
    track_variance: bool = False,
    track_separations: bool = False,
    triple_threshold: float | None = None,
    moment_alpha: float | None = None,
    moment_floor: float | None = None,
    extra_steps=(),
) -> EnsembleResult:
    """Run ``params.replicas`` independent copies of the particle system.

    Replica ``r`` uses ``NoiseStream(params.seed, r)`` unless ``streams`` is
    given; it first draws its initial positions, then one Gaussian pair per
    particle per step.  ``extra_steps`` adds step indices to the recorded grid.
    """
    record_every = record_every or params.record_every
    n, dt, n_steps = params.n_particles, params.dt, params.n_steps
    if streams is None:
        streams = [NoiseStream(params.seed, r) for r in range(params.replicas)]
    n_rep = len(streams)
    if initial is None:
        pos = np.stack([sample_initial(params.initial_law, n, s) for s in streams])
    else:
        pos = np.array(initial, dtype=float).reshape(n_rep, n, 2)
    rec_steps = _record_steps(n_steps, record_every)
    extra = [int(k) for k in extra_steps if 0 < int(k) <= n_steps]
    if extra:
        rec_steps = np.union1d(rec_steps, extra).astype(np.int64)
    times = np.concatenate([[0.0], rec_steps * dt])
    snaps = np.empty((n_rep, len(times), n, 2))
    snaps[:, 0] = pos

    stats: dict[str, np.ndarray] = {}
    tracks: dict = {}
    if track_variance:
        stats["variance"] = np.empty((n_rep, n_steps + 1))
        stats["variance"][:, 0] = [_full_variance(p) for p in pos]
    if track_separations:
        tracks["min_pair"] = np.array([_min_pair(p) for p in pos])
        tracks["min_triple"] = np.array([_min_triple_sum(p) if n >= 3 else np.inf for p in pos])
        tracks["theta"] = triple_threshold if triple_threshold is not None else -1.0
        tracks["tau_step"] = np.full(n_rep, -1, dtype=np.int64)
        if n >= 3 and triple_threshold is not None:
            tracks["tau_step"][tracks["min_triple"] <= triple_threshold] = 0
    if moment_alpha is not None:
        tracks["path_moment"] = np.zeros(n_rep)
        tracks["moment_exp"] = moment_alpha - 2.0
        tracks["moment_floor"] = moment_floor if moment_floor is not None else path_moment_floor(params)

    hashes = [hashlib.blake2b(digest_size=8) for _ in range(n_rep)]
    for start, length in _chunks(n_steps, n * n_rep):
        xi = np.empty((n_rep, length, n, 2))
        for r, stream in enumerate(streams):
            g = stream.gaussian_pairs(length * n)
            _checksum_update(hashes[r], g)
            xi[r] = g.reshape(length, n, 2)
        slots = _slots(start, length, rec_steps)
        if track_variance:
            tracks["variance_chunk"] = np.empty((n_rep, length))
        failed = _run_system_kernel(pos, xi, params, start, slots, snaps, tracks)
        if track_variance:
            stats["variance"][:, start + 1 : start + 1 + length] = tracks["variance_chunk"]
        bad = np.flatnonzero(failed >= 0)
        if bad.size:
            first = int(bad[np.argmin(failed[bad])])
            step = int(failed[first])
            err = IntegrationError(step, step * dt, streams[first].replica_index)
            # every replica is valid on the recorded grid strictly before the failing step
            k = 1 + int(np.sum(rec_steps < step))
            err.partial = (times[:k], snaps[:, :k].copy(), [s.replica_index for s in streams])
            raise err

    for key in ("min_pair", "min_triple", "tau_step", "path_moment"):
        if key in tracks:
            stats[key] = tracks[key]
    return EnsembleResult(params, times, snaps, [_digest(h) for h in hashes], stats)


def simulate_system(params: SimParams, noise: NoiseStream, record_every: int = 1) -> TrajectoryRecord:
    """Single trajectory over ``[0, horizon]`` with snapshots every ``record_every`` steps."""
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    res = simulate_ensemble(params, record_every, streams=[noise])
    states = [ParticleSystemState(float(t), res.snapshots[0, k]) for k, t in enumerate(res.times)]
    return TrajectoryRecord(params, res.times, states, res.checksums[0])


# --------------------------------------------------------------------------
# pair processes


def step_pair_regularized(d, chi: float, eps: float, dt: float, noise: NoiseStream | None = None,
                          increments=None) -> np.ndarray:
    """One Euler step of ``dD = 2 dW + chi K_eps(D) dt``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    xi = noise.gaussian_pairs(1)[0] if increments is None else np.asarray(increments, dtype=float)
    d = np.asarray(d, dtype=float)
    return d + 2.0 * math.sqrt(dt) * xi + dt * chi * kernel_regularized(d, eps)


def cubed_sigma(z) -> np.ndarray:
    """Diffusion matrix ``2|z|^{-4/3} (|z|^2 I + 2 z z^T)``; zero at the origin."""
    z = np.asarray(z, dtype=float)
    r2 = float(z @ z)
    if r2 == 0.0:
        return np.zeros((2, 2))
    return 2.0 * r2 ** (-2.0 / 3.0) * (r2 * np.eye(2) + 2.0 * np.outer(z, z))


def cubed_drift(z, chi: float) -> np.ndarray:
    """``(16 - 3 chi / (2 pi)) |z|^{-2/3} z``; zero at the origin."""
    return np.array(_cubed_drift(float(z[0]), float(z[1]), float(chi)))


def step_cubed(
    state: PairState,
    chi: float,
    dt: float,
    noise: NoiseStream | None = None,
    freeze_radius: float | None = None,
    increments=None,
) -> PairState:
    """One Euler step of the cubed pair process, freezing at the origin when
    ``chi >= 8 pi`` and the new point lies within ``freeze_radius``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if freeze_radius is None:
        freeze_radius = default_freeze_radius(dt)
    xi = noise.gaussian_pairs(1) if increments is None else np.asarray(increments, dtype=float).reshape(1, 2)
    z = np.array(state.z, dtype=float).reshape(1, 2)
    frozen = np.array([state.frozen])
    _advance_cubed(z, frozen, xi.reshape(1, 1, 2), float(chi), float(dt), float(freeze_radius),
                   chi >= 8.0 * math.pi, np.full(1, -1), np.empty((1, 1, 2)), np.empty((1, 1), dtype=np.bool_))
    return PairState(state.time + dt, z[0], bool(frozen[0]))


def project_pair(state) -> np.ndarray:
    """``|z|^{-2/3} z`` for ``z != 0``, else the origin."""
    z = np.asarray(state.z if isinstance(state, PairState) else state, dtype=float)
    r = math.hypot(z[0], z[1])
    if r == 0.0:
        return np.zeros(2)
    return z * r ** (-2.0 / 3.0)


@dataclass
class PairEnsemble:
    times: np.ndarray
    z: np.ndarray  # (replicas, len(times), 2)
    frozen: np.ndarray  # (replicas, len(times))
    checksums: list[int]


def simulate_cubed_ensemble(
    chi: float,
    dt: float,
    horizon: float,
    replicas: int,
    seed: int,
    d0=(1.0, 0.0),
    record_every: int = 1,
    freeze_radius: float | None = None,
    streams: list[NoiseStream] | None = None,
) -> PairEnsemble:
    """Replicas of the cubed process started at ``Z0 = |D0|^2 D0``."""
    n_steps = max(1, math.ceil(horizon / dt - 1e-9))
    if freeze_radius is None:
        freeze_radius = default_freeze_radius(dt)
    d0 = np.asarray(d0, dtype=float)
    if streams is None:
        streams = [NoiseStream(seed, r) for r in range(replicas)]
    replicas = len(streams)
    z = np.tile(float(d0 @ d0) * d0, (replicas, 1))
    frozen = np.zeros(replicas, dtype=np.bool_)
    rec_steps = _record_steps(n_steps, record_every)
    times = np.concatenate([[0.0], rec_steps * dt])
    snaps = np.empty((replicas, len(times), 2))
    snap_frozen = np.zeros((replicas, len(times)), dtype=np.bool_)
    snaps[:, 0] = z
    hashes = [hashlib.blake2b(digest_size=8) for _ in range(replicas)]
    for start, length in _chunks(n_steps, replicas):
        xi = np.empty((replicas, length, 2))
        for r, stream in enumerate(streams):
            xi[r] = stream.gaussian_pairs(length)
            _checksum_update(hashes[r], xi[r])
        _advance_cubed(z, frozen, xi, float(chi), float(dt), float(freeze_radius),
                       chi >= 8.0 * math.pi, _slots(start, length, rec_steps), snaps, snap_frozen)
    return PairEnsemble(times, snaps, snap_frozen, [_digest(h) for h in hashes])


def simulate_pair_regularized_ensemble(chi, eps, dt, horizon, replicas, seed, d0=(1.0, 0.0)) -> np.ndarray:
    """Final values ``D^eps_T`` of ``replicas`` regularized pair differences."""
    n_steps = max(1, math.ceil(horizon / dt - 1e-9))
    d = np.tile(np.asarray(d0, dtype=float), (replicas, 1))
    streams = [NoiseStream(seed, r) for r in range(replicas)]
    for start, length in _chunks(n_steps, replicas):
        xi = np.stack([s.gaussian_pairs(length) for s in streams])
        _advance_pair_regularized(d, xi, float(chi), float(eps) ** 2, float(dt))
    return d


def path_moment_floor(params: SimParams) -> float:
    return params.epsilon if params.epsilon > 0 else math.sqrt(params.dt)
