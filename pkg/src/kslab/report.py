"""Static figures written next to a run's CSV files (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import ExperimentResult  # noqa: E402


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path.name


def _variance(data, out: Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t, m = data["times"], data["mean"]
    ax.plot(t, m, lw=1, label="ensemble mean")
    sel = t >= data["fit_start"]
    t0 = t[sel][0]
    ax.plot(t[sel], m[sel][0] + data["slope"] * (t[sel] - t0), "--", label=f"fit slope {data['slope']:.3g}")
    ax.plot(t[sel], m[sel][0] + data["target"] * (t[sel] - t0), ":", label=f"Bessel slope {data['target']:.3g}")
    ax.set_xlabel("t")
    ax.set_ylabel("subset variance, full set")
    ax.legend(fontsize=8)
    return _save(fig, out / "variance.png")


def _ks(data, out: Path) -> str:
    x = np.sort(data["samples"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step(x, np.arange(1, len(x) + 1) / len(x), where="post", lw=1, label="empirical")
    grid = np.linspace(0, x[-1], 400)
    ax.plot(grid, data["cdf"](grid), "--", label="BESQ cdf")
    ax.set_xlabel("R_T")
    ax.set_title(f"KS p = {data['p']:.3g}", fontsize=9)
    ax.legend(fontsize=8)
    return _save(fig, out / "radial_ecdf.png")


def _frozen(data, out: Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(data["times"], data["fraction"])
    ax.set_xlabel("t")
    ax.set_ylabel("frozen fraction")
    ax.set_ylim(0, 1.02)
    return _save(fig, out / "frozen_fraction.png")


def _angles(data, out: Path) -> str:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    counts = data["counts"]
    edges = np.linspace(0, 2 * np.pi, len(counts) + 1)
    axes[0].bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="k", lw=0.3)
    axes[0].axhline(counts.mean(), color="r", lw=1)
    axes[0].set_xlabel("angle")
    axes[0].set_title(f"chi-square p = {data['p']:.3g}", fontsize=9)
    axes[1].plot(data["angle"], data["radius"], ",", alpha=0.5)
    axes[1].set_xlabel("angle")
    axes[1].set_ylabel("|D|")
    return _save(fig, out / "angles.png")


def _separations(data, kind: str, out: Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, d in data.items():
        vals = np.log10(np.maximum(d[kind], 1e-300))
        ax.hist(vals, bins=40, histtype="step", label=label)
        if "theta" in d:
            ax.axvline(np.log10(d["theta"]), ls=":", lw=0.8)
    ax.set_xlabel(f"log10 {kind}")
    ax.set_ylabel("replicas")
    ax.legend(fontsize=8)
    return _save(fig, out / f"{kind}.png")


def _clusters(data, out: Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, d in data.items():
        ax.plot(d["times"], d["counts"].mean(axis=0), label=label)
    ax.set_xlabel("t")
    ax.set_ylabel("mean particle count")
    ax.legend(fontsize=8)
    return _save(fig, out / "cluster_counts.png")


def _moments(rows, out: Path) -> str:
    t, est, hw, bound = map(np.array, zip(*rows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(t, est, yerr=hw, fmt="o", label="estimate +- 3 se")
    ax.plot(t, bound, "s--", label="bound")
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    return _save(fig, out / "first_moment.png")


def render(result: ExperimentResult, out_dir: str | Path) -> list[str]:
    """Draw whatever the run produced; returns the written file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plots = result.plots
    written = []
    if "variance" in plots:
        written.append(_variance(plots["variance"], out))
    if "first_moment" in plots:
        written.append(_moments(plots["first_moment"], out))
    if "ks" in plots:
        written.append(_ks(plots["ks"], out))
    if "frozen" in plots:
        written.append(_frozen(plots["frozen"], out))
    if "angles" in plots:
        written.append(_angles(plots["angles"], out))
    if "separations" in plots:
        written.append(_separations(plots["separations"], plots["kind"], out))
    if "clusters" in plots:
        written.append(_clusters(plots["clusters"], out))
    return written


def plot_series(times, values, ylabel: str, path: str | Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(times, values)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    return _save(fig, Path(path))
