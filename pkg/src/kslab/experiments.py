"""Preset configurations and the ensemble runners behind them.

A run takes a validated :class:`~kslab.core.SimParams`, simulates every
replica (optionally split across threads), and returns an
:class:`ExperimentResult` holding the diagnostics report, snapshot tables and
per-replica noise checksums.  Nothing here touches the filesystem.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .bessel import BesqSpec, angular_paths_with_floor, besq_cdf, besq_path, chi_square_uniformity, ks_statistic, wrap_angle
from .clusters import (
    ClusterEnsemble,
    allowed_mass_set,
    is_boundary_case,
    min_merge_units,
    simulate_cluster_ensemble,
)
from .core import InitialLaw, NoiseStream, SimParams
from .diagnostics import (
    DiagnosticsReport,
    bessel_dimension,
    classify_regimes,
    default_triple_threshold,
    first_moment_bound,
    fund_bound,
    law_first_moment,
    replica_slope,
    triple_collision_threshold,
)
from .integrator import EnsembleResult, PairEnsemble, simulate_cubed_ensemble, simulate_ensemble

PI = math.pi

_PRESETS: dict[str, dict] = {
    "variance_slope": dict(
        experiment="system", experiment_name="variance_slope", n_particles=32, chi=4 * PI,
        epsilon=1e-3, dt=1e-4, horizon=1.0, replicas=500, seed=1, record_every=1000,
    ),
    "pair_bessel": dict(
        experiment="pair_cubed", experiment_name="pair_bessel", n_particles=2, chi=2 * PI,
        epsilon=0.0, dt=1e-4, horizon=1.0, replicas=2000, seed=2, record_every=1000, pair_start=(1.0, 0.0),
    ),
    "freezing": dict(
        experiment="pair_cubed", experiment_name="freezing", n_particles=2, chi=12 * PI,
        epsilon=0.0, dt=1e-4, horizon=5.0, replicas=2000, seed=3, record_every=100, pair_start=(1.0, 0.0),
    ),
    "first_moment": dict(
        experiment="system", experiment_name="first_moment", n_particles=16, chi=2 * PI,
        epsilon=1e-2, dt=1e-4, horizon=1.0, replicas=500, seed=4, record_every=2500,
        moment_times=(0.25, 0.5, 1.0),
    ),
    "fund_bound": dict(
        experiment="system", experiment_name="fund_bound", n_particles=8, chi=PI, epsilon=1e-3,
        dt=1e-4, horizon=1.0, replicas=500, seed=5, record_every=1000, alpha=0.75,
    ),
    "triple_dichotomy": dict(
        experiment="system", experiment_name="triple_dichotomy", n_particles=8, chi=7 * PI,
        epsilon=1e-3, dt=1e-4, horizon=1.0, replicas=200, seed=6, record_every=1000,
        chi_sweep=(7 * PI, 23 * PI),
    ),
    "pair_collision": dict(
        experiment="system", experiment_name="pair_collision", n_particles=4, chi=4 * PI,
        epsilon=1e-2, dt=1e-4, horizon=1.0, replicas=200, seed=7, record_every=1000,
        epsilon_sweep=(1e-2, 1e-3, 1e-4),
    ),
    "cluster_coalescence": dict(
        experiment="cluster", experiment_name="cluster_coalescence", n_particles=10, chi=16 * PI,
        epsilon=1e-3, dt=1e-4, horizon=2.0, replicas=200, seed=8, record_every=200,
        chi_sweep=(16 * PI, 48 * PI),
    ),
    "angular_uniformity": dict(
        experiment="angular", experiment_name="angular_uniformity", n_particles=2, chi=4 * PI,
        epsilon=0.0, dt=1e-3, horizon=0.5, replicas=10_000, seed=9, record_every=100, pair_start=(0.0, 0.0),
    ),
    "regime_table": dict(
        experiment="regimes", experiment_name="regime_table", n_particles=5, chi=6.5 * PI,
        dt=1.0, horizon=1.0, seed=10, chi_sweep=(5 * PI, 6.5 * PI, 7.5 * PI, 10 * PI, 25 * PI),
    ),
}


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def preset(name: str) -> SimParams:
    """The exact configuration used by the matching acceptance test."""
    try:
        doc = _PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(preset_names())}") from None
    return SimParams(initial_law=InitialLaw.standard_gaussian(), **doc)


# --------------------------------------------------------------------------
# results


@dataclass
class SnapshotTable:
    """Rows of ``replica, time, particle_index, x, y[, mass]``."""

    name: str
    replica: np.ndarray
    time: np.ndarray
    particle: np.ndarray
    xy: np.ndarray
    mass: np.ndarray | None = None

    @classmethod
    def empty(cls, name: str = "snapshots.csv") -> "SnapshotTable":
        z = np.empty(0, dtype=np.int64)
        return cls(name, z, np.empty(0), z, np.empty((0, 2)))

    @classmethod
    def from_array(cls, name: str, times, snaps: np.ndarray, units: np.ndarray | None = None,
                   n_total: int | None = None) -> "SnapshotTable":
        """``snaps`` is ``(replicas, len(times), m, 2)``; rows with zero units are dropped."""
        r, t, m, _ = snaps.shape
        rep = np.repeat(np.arange(r), t * m)
        tim = np.tile(np.repeat(np.asarray(times, dtype=float), m), r)
        part = np.tile(np.arange(m), r * t)
        xy = snaps.reshape(-1, 2)
        mass = None
        if units is not None:
            u = units.reshape(-1)
            keep = u > 0
            rep, tim, part, xy = rep[keep], tim[keep], part[keep], xy[keep]
            mass = u[keep] / n_total
        return cls(name, rep, tim, part, xy, mass)

    def __len__(self) -> int:
        return len(self.replica)


@dataclass
class ExperimentResult:
    params: SimParams
    report: DiagnosticsReport
    tables: list[SnapshotTable]
    checksums: dict[str, list[int]]
    plots: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# replica splitting


def _streams(params: SimParams) -> list[NoiseStream]:
    return [NoiseStream(params.seed, r) for r in range(params.replicas)]


def _pmap(fn: Callable, streams: list[NoiseStream], jobs: int) -> list:
    """Run ``fn`` on contiguous replica blocks; results come back in replica order."""
    jobs = max(1, min(int(jobs), len(streams)))
    if jobs == 1:
        return [fn(streams)]
    bounds = np.linspace(0, len(streams), jobs + 1).astype(int)
    blocks = [streams[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, blocks))


def _system(params: SimParams, jobs: int, **kw) -> EnsembleResult:
    parts = _pmap(lambda ss: simulate_ensemble(params, streams=ss, **kw), _streams(params), jobs)
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    return EnsembleResult(
        params, first.times, np.concatenate([p.snapshots for p in parts]),
        [c for p in parts for c in p.checksums],
        {k: np.concatenate([p.stats[k] for p in parts]) for k in first.stats},
    )


def _cubed(params: SimParams, jobs: int) -> PairEnsemble:
    def run(ss):
        return simulate_cubed_ensemble(params.chi, params.dt, params.horizon, len(ss), params.seed,
                                       d0=params.pair_start, record_every=params.record_every,
                                       freeze_radius=params.freeze_radius, streams=ss)

    parts = _pmap(run, _streams(params), jobs)
    return PairEnsemble(parts[0].times, np.concatenate([p.z for p in parts]),
                        np.concatenate([p.frozen for p in parts]), [c for p in parts for c in p.checksums])


def _clusters(params: SimParams, jobs: int) -> ClusterEnsemble:
    parts = _pmap(lambda ss: simulate_cluster_ensemble(params, streams=ss), _streams(params), jobs)
    first = parts[0]
    return ClusterEnsemble(
        params, first.times, np.concatenate([p.positions for p in parts]),
        np.concatenate([p.units for p in parts]), np.concatenate([p.coalesce_step for p in parts]),
        np.concatenate([p.boundary_merges for p in parts]), first.merge_threshold,
        [c for p in parts for c in p.checksums],
    )


def _proportion_hw(p: float, n: int) -> float:
    return 1.959963984540054 * math.sqrt(max(p * (1 - p), 0.0) / n)


def _arm_label(name: str, value: float, over_pi: bool = True) -> str:
    return f"{name}/pi={value / PI:.6g}" if over_pi else f"{name}={value:.6g}"


# --------------------------------------------------------------------------
# system runs


def _run_system(params: SimParams, jobs: int) -> ExperimentResult:
    if params.epsilon_sweep:
        return _run_pair_collision(params, jobs)
    if params.chi_sweep:
        return _run_triple_dichotomy(params, jobs)
    rep = DiagnosticsReport(params)
    n, dt, n_steps = params.n_particles, params.dt, params.n_steps
    extra = [round(t / dt) for t in params.moment_times]
    kw = dict(track_variance=True, extra_steps=extra)
    if params.alpha is not None:
        kw["moment_alpha"] = params.alpha
    res = _system(params, jobs, **kw)
    plots = {}

    # variance slope over the second half of the horizon
    v = res.stats["variance"]
    t_all = np.arange(n_steps + 1) * dt
    half = n_steps // 2
    slope, hw = replica_slope(t_all[half:], v[:, half:])
    target = bessel_dimension(n, params.chi, n)
    rep.add("variance_slope", slope, half_width=hw, n=params.replicas, bound=target,
            passed=abs(slope - target) <= 0.03 * abs(target),
            note="second-half fit of the ensemble mean; pass iff |estimate - bound| <= 0.03 |bound|")
    stride = max(1, n_steps // 1000)
    rep.add_series("mean_variance", t_all[::stride], v.mean(axis=0)[::stride])
    plots["variance"] = dict(times=t_all[::stride], mean=v.mean(axis=0)[::stride], slope=slope,
                             target=target, fit_start=t_all[half])

    if params.moment_times:
        m = law_first_moment(params.initial_law)
        rows = []
        for t in params.moment_times:
            k = int(np.argmin(np.abs(res.times - t)))
            x = res.snapshots[:, k, 0]
            f = np.sqrt(1.0 + np.sum(x * x, axis=1))
            se = f.std(ddof=1) / math.sqrt(len(f))
            bound = first_moment_bound(m, t)
            rep.add(f"first_moment[t={t:g}]", f.mean(), half_width=3 * se, confidence=0.9973, n=len(f),
                    bound=bound, passed=bool(f.mean() <= bound + 3 * se),
                    note="particle 0; pass iff estimate <= bound + half_width (3 standard errors)")
            rows.append((t, f.mean(), 3 * se, bound))
        plots["first_moment"] = rows

    if params.alpha is not None:
        pm = res.stats["path_moment"]
        m = law_first_moment(params.initial_law)
        z = stats.norm.ppf(0.95)
        hw = z * pm.std(ddof=1) / math.sqrt(len(pm))
        bound = fund_bound(m, params.horizon, params.alpha, n, params.chi)
        rep.add("path_moment", pm.mean(), half_width=hw, confidence=0.95, n=len(pm), bound=bound,
                passed=bool(pm.mean() + hw <= bound),
                note="particles 0 and 1; one-sided, pass iff estimate + half_width <= bound")
        plots["path_moment"] = dict(values=pm, bound=bound)

    tables = [SnapshotTable.from_array("snapshots.csv", res.times, res.snapshots)]
    return ExperimentResult(params, rep, tables, {"": res.checksums}, plots)


def _run_triple_dichotomy(params: SimParams, jobs: int) -> ExperimentResult:
    """Lowest sweep value is expected to stay above the triple threshold, the
    highest to fall below it."""
    rep = DiagnosticsReport(params)
    n = params.n_particles
    crit = triple_collision_threshold(n)
    rep.add("triple_threshold_chi", crit, note="8 pi (N - 2) / (N - 1)")
    chis = sorted(params.chi_sweep)
    tables, checks, plots = [], {}, {}
    for i, chi in enumerate(chis):
        arm = params.replace(chi=chi, chi_sweep=())
        theta = default_triple_threshold(arm)
        res = _system(arm, jobs, track_separations=True, triple_threshold=theta)
        mt = res.stats["min_triple"]
        r = len(mt)
        stay = float(np.mean(mt > theta))
        side = "above" if chi > crit else "at or below"
        label = _arm_label("chi", chi)
        note = f"theta={theta:.6g}; chi is {side} 8 pi (N-2)/(N-1)"
        if i == 0:
            rep.add(f"stay_above_theta[{label}]", stay, half_width=_proportion_hw(stay, r), n=r, bound=0.95,
                    passed=stay >= 0.95, note=note + "; pass iff estimate >= bound")
        if i == len(chis) - 1 and len(chis) > 1:
            hit = float(np.mean(res.stats["tau_step"] >= 0))
            rep.add(f"falls_below_theta[{label}]", hit, half_width=_proportion_hw(hit, r), n=r, bound=0.80,
                    passed=hit >= 0.80, note=note + "; pass iff estimate >= bound")
        if 0 < i < len(chis) - 1:
            rep.add(f"stay_above_theta[{label}]", stay, half_width=_proportion_hw(stay, r), n=r, note=note)
        rep.add(f"median_min_triple[{label}]", float(np.median(mt)), n=r)
        plots[label] = dict(min_triple=mt, theta=theta)
        tables.append(SnapshotTable.from_array(_table_name(i), res.times, res.snapshots))
        checks[label] = res.checksums
    return ExperimentResult(params, rep, tables, checks, {"separations": plots, "kind": "min_triple"})


def _run_pair_collision(params: SimParams, jobs: int) -> ExperimentResult:
    rep = DiagnosticsReport(params)
    tables, checks, plots, medians = [], {}, {}, []
    for i, eps in enumerate(params.epsilon_sweep):
        arm = params.replace(epsilon=eps, epsilon_sweep=())
        res = _system(arm, jobs, track_separations=True)
        mp = res.stats["min_pair"]
        r = len(mp)
        label = _arm_label("eps", eps, over_pi=False)
        med = float(np.median(mp))
        medians.append(med)
        frac = float(np.mean(mp <= 10 * eps))
        rep.add(f"median_min_pair[{label}]", med, n=r)
        rep.add(f"fraction_min_pair_le_10eps[{label}]", frac, half_width=_proportion_hw(frac, r), n=r,
                bound=0.10, passed=frac >= 0.10, note="pass iff estimate >= bound")
        plots[label] = dict(min_pair=mp, eps=eps)
        tables.append(SnapshotTable.from_array(_table_name(i), res.times, res.snapshots))
        checks[label] = res.checksums
    decreasing = all(a > b for a, b in zip(medians, medians[1:]))
    rep.add("median_strictly_decreasing", float(decreasing), bound=1.0, passed=decreasing,
            note="medians in sweep order: " + ", ".join(f"{m:.6g}" for m in medians) + "; pass iff estimate >= bound")
    return ExperimentResult(params, rep, tables, checks, {"separations": plots, "kind": "min_pair"})


def _table_name(i: int) -> str:
    return "snapshots.csv" if i == 0 else f"snapshots_arm{i}.csv"


# --------------------------------------------------------------------------
# pair process, angular law, clusters, regimes


def _pair_difference(z: np.ndarray) -> np.ndarray:
    r = np.hypot(z[..., 0], z[..., 1])
    scale = np.where(r > 0, np.where(r > 0, r, 1.0) ** (-2.0 / 3.0), 0.0)
    return z * scale[..., None]


def _run_pair_cubed(params: SimParams, jobs: int) -> ExperimentResult:
    rep = DiagnosticsReport(params)
    ens = _cubed(params, jobs)
    chi, horizon = params.chi, params.horizon
    d = _pair_difference(ens.z)
    plots = {}
    if chi < 8 * PI:
        delta = 2.0 - chi / (4 * PI)
        x0 = float(np.dot(params.pair_start, params.pair_start)) / 4.0
        spec = BesqSpec(delta, x0)
        r_final = np.hypot(ens.z[:, -1, 0], ens.z[:, -1, 1]) ** (2.0 / 3.0) / 4.0
        ks = ks_statistic(r_final, lambda y: besq_cdf(spec, horizon, y))
        rep.add("ks_statistic", ks.statistic, n=ks.n_samples)
        rep.add("ks_p_value", ks.p_value, n=ks.n_samples, bound=0.01, passed=ks.p_value > 0.01,
                note=f"R_T against BESQ(delta={delta:.6g}, x0={x0:.6g}, t={horizon:g}); pass iff estimate > bound")
        se = r_final.std(ddof=1) / math.sqrt(len(r_final))
        rep.add("mean_radial", r_final.mean(), half_width=1.96 * se, n=len(r_final), bound=x0 + delta * horizon,
                note="bound column holds x0 + delta t")
        plots["ks"] = dict(samples=r_final, cdf=lambda y: besq_cdf(spec, horizon, y), p=ks.p_value)
    else:
        f = ens.frozen
        frac = float(np.mean(f[:, -1]))
        rep.add("frozen_fraction", frac, half_width=_proportion_hw(frac, len(f)), n=len(f), bound=0.99,
                passed=frac >= 0.99, note=f"by t={horizon:g}; pass iff estimate >= bound")
        unfrozen = int(np.sum(f[:, :-1] & ~f[:, 1:]))
        off_origin = int(np.sum(np.any(ens.z[f] != 0.0, axis=-1)))
        rep.add("unfreeze_events", unfrozen + off_origin, n=len(f), bound=0.0, passed=unfrozen + off_origin == 0,
                note="recorded grid: frozen flag drops or frozen state away from the origin; pass iff estimate <= bound")
        rep.add_series("frozen_fraction", ens.times, f.mean(axis=0))
        plots["frozen"] = dict(times=ens.times, fraction=f.mean(axis=0))
    tables = [SnapshotTable.from_array("snapshots.csv", ens.times, d[:, :, None, :])]
    return ExperimentResult(params, rep, tables, {"": ens.checksums}, plots)


def _run_angular(params: SimParams, jobs: int) -> ExperimentResult:
    """Exact BESQ skeleton for the pair radius, the angle driven on top of it."""
    rep = DiagnosticsReport(params)
    delta = 2.0 - params.chi / (4 * PI)
    if not delta > 0:
        raise ValueError("the angular experiment needs chi < 8 pi")
    x0 = float(np.dot(params.pair_start, params.pair_start)) / 4.0
    times = np.arange(params.n_steps + 1) * params.dt
    times[-1] = params.horizon
    radial = besq_path(BesqSpec(delta, x0), times, NoiseStream(params.seed, 0), params.replicas)
    angles = angular_paths_with_floor(times, radial, NoiseStream(params.seed, 1))
    # D = 2 sqrt(R) (cos, sin), Z = |D|^2 D, then back through the projection
    dmod = 2.0 * np.sqrt(radial)
    d = np.stack([dmod * np.cos(angles), dmod * np.sin(angles)], axis=-1)
    z = d * (dmod**2)[..., None]
    proj = _pair_difference(z)
    final_angle = wrap_angle(np.arctan2(proj[:, -1, 1], proj[:, -1, 0]))
    final_radius = np.hypot(proj[:, -1, 0], proj[:, -1, 1])
    counts = np.histogram(final_angle, bins=16, range=(0, 2 * PI))[0]
    chi2 = chi_square_uniformity(counts)
    corr = float(np.corrcoef(final_angle, final_radius)[0, 1])
    n = params.replicas
    rep.add("chi_square_statistic", chi2.statistic, n=n)
    rep.add("chi_square_p_value", chi2.p_value, n=n, bound=0.01, passed=chi2.p_value > 0.01,
            note="16 bins at the final time; pass iff estimate > bound")
    rep.add("abs_corr_angle_radius", abs(corr), n=n, bound=0.05, passed=abs(corr) < 0.05,
            note="pass iff estimate < bound")
    rec = np.unique(np.concatenate([np.arange(0, params.n_steps + 1, params.record_every), [params.n_steps]]))
    tables = [SnapshotTable.from_array("snapshots.csv", times[rec], proj[:, rec, None, :])]
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(radial, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(angles, dtype="<f8").tobytes())
    plots = {"angles": dict(angle=final_angle, radius=final_radius, counts=counts, p=chi2.p_value)}
    return ExperimentResult(params, rep, tables, {"": [int.from_bytes(h.digest(), "little")]}, plots,
                            ["angular checksum digests the radial skeleton and angle paths"])


def _run_clusters(params: SimParams, jobs: int) -> ExperimentResult:
    rep = DiagnosticsReport(params)
    n = params.n_particles
    chis = list(params.chi_sweep) or [params.chi]
    tables, checks, plots = [], {}, {}
    for i, chi in enumerate(chis):
        arm = params.replace(chi=chi, chi_sweep=())
        ens = _clusters(arm, jobs)
        label = _arm_label("chi", chi)
        allowed = {int(f * n) for f in allowed_mass_set(n, chi)}
        u = ens.units
        bad_mass = int(np.sum((u > 0) & ~np.isin(u, list(allowed))))
        bad_total = int(np.sum(u.sum(axis=-1) != n))
        counts = ens.counts()
        bad_count = int(np.sum(np.diff(counts, axis=1) > 0))
        boundary = is_boundary_case(n, chi)
        r = len(u)
        rep.add(f"masses_outside_allowed_set[{label}]", bad_mass, n=r, bound=0.0, passed=bad_mass == 0,
                note=f"k_min={min_merge_units(n, chi)}" + ("; boundary case S = 8 pi / chi" if boundary else "")
                + "; pass iff estimate <= bound")
        rep.add(f"total_mass_violations[{label}]", bad_total, n=r, bound=0.0, passed=bad_total == 0,
                note="pass iff estimate <= bound")
        rep.add(f"count_increases[{label}]", bad_count, n=r, bound=0.0, passed=bad_count == 0,
                note="pass iff estimate <= bound")
        frac = float(np.mean(ens.coalesce_step >= 0))
        if chi >= 4 * PI * n:
            rep.add(f"coalescence_fraction[{label}]", frac, half_width=_proportion_hw(frac, r), n=r, bound=0.9,
                    passed=frac >= 0.9, note=f"single particle before t={params.horizon:g}; pass iff estimate >= bound")
        else:
            rep.add(f"coalescence_fraction[{label}]", frac, half_width=_proportion_hw(frac, r), n=r)
        rep.add(f"boundary_merges[{label}]", int(ens.boundary_merges.sum()), n=r,
                note="merges whose mass equals 8 pi / chi exactly")
        rep.add_series(f"mean_count[{label}]", ens.times, counts.mean(axis=0))
        plots[label] = dict(times=ens.times, counts=counts)
        tables.append(SnapshotTable.from_array(_table_name(i), ens.times, ens.positions, ens.units, n))
        checks[label] = ens.checksums
    return ExperimentResult(params, rep, tables, checks, {"clusters": plots})


def _run_regimes(params: SimParams, jobs: int) -> ExperimentResult:
    rep = DiagnosticsReport(params)
    n = params.n_particles
    chis = list(params.chi_sweep) or [params.chi]
    tables = []
    rep.add("triple_threshold_chi", triple_collision_threshold(n), note="8 pi (N - 2) / (N - 1)")
    rep.add("four_pi_n_over_three", 4 * PI * n / 3)
    formatted = []
    for chi in chis:
        tab = classify_regimes(n, chi)
        label = _arm_label("chi", chi)
        if tab.x_minus is not None:
            rep.add(f"x_minus[{label}]", tab.x_minus)
            rep.add(f"x_plus[{label}]", tab.x_plus)
        for k, regime in tab.regimes.items():
            rep.add(f"delta[{label},k={k}]", bessel_dimension(n, chi, k), note=regime)
        formatted.append(tab.format())
    return ExperimentResult(params, rep, [SnapshotTable.empty()], {}, {"tables": formatted})


_RUNNERS = {
    "system": _run_system,
    "pair_cubed": _run_pair_cubed,
    "angular": _run_angular,
    "cluster": _run_clusters,
    "regimes": _run_regimes,
}


def run(params: SimParams, jobs: int = 1) -> ExperimentResult:
    """Execute the experiment described by ``params``.

    The result does not depend on ``jobs``: every replica owns its stream and
    blocks are reassembled in replica order.
    """
    return _RUNNERS[params.experiment](params, jobs)
