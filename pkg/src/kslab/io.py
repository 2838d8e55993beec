"""Run directories: manifest, snapshot and diagnostics CSVs, failure marker."""

from __future__ import annotations

import datetime as _dt
import json
import os
import shutil
from pathlib import Path

import numpy as np

from . import __version__
from .core import GAUSSIAN_METHOD, ConfigError, SimParams
from .experiments import ExperimentResult, SnapshotTable

FAILED_MARKER = "FAILED"
OUT_ENV = "KSLAB_OUT"
SNAPSHOT_COLUMNS = ["replica", "time", "particle_index", "x", "y"]


class RunExistsError(FileExistsError):
    pass


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def load_config(path: str | Path) -> SimParams:
    """A SimParams document, or a run manifest (its ``params`` are replayed)."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if isinstance(doc, dict) and "params" in doc and "experiment_name" in doc and "tool_version" in doc:
        doc = doc["params"]
    return SimParams.from_dict(doc)


def prepare_run_dir(out_root: str | Path, name: str, overwrite: bool) -> Path:
    run_dir = Path(out_root) / name
    if run_dir.exists() and any(run_dir.iterdir()):
        if not overwrite:
            raise RunExistsError(f"{run_dir} exists and is not empty; pass --overwrite to replace it")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_snapshots(path: Path, table: SnapshotTable) -> None:
    cols = list(SNAPSHOT_COLUMNS)
    data = [table.replica, table.time, table.particle, table.xy[:, 0], table.xy[:, 1]]
    fmt = ["%d", "%.17g", "%d", "%.17g", "%.17g"]
    if table.mass is not None:
        cols.append("mass")
        data.append(table.mass)
        fmt.append("%.17g")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        if len(table):
            np.savetxt(fh, np.column_stack([np.asarray(c, dtype=float) for c in data]), fmt=fmt, delimiter=",")


def read_snapshots(path: str | Path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.size == 0:
        raw = np.empty((0, len(header)))
    return {name: raw[:, i] for i, name in enumerate(header)}


def manifest_doc(result: ExperimentResult | None, params: SimParams, started: str, finished: str | None,
                 status: str, files: list[str], error: str | None = None) -> dict:
    doc = {
        "experiment_name": params.experiment_name,
        "status": status,
        "params": params.to_dict(),
        "started_at": started,
        "finished_at": finished,
        "tool_version": __version__,
        "gaussian_method": GAUSSIAN_METHOD,
        "noise_checksums": {} if result is None else {k or "all": [f"{c:016x}" for c in v]
                                                      for k, v in result.checksums.items()},
        "files": files,
    }
    if result is not None and result.notes:
        doc["notes"] = result.notes
    if error is not None:
        doc["error"] = error
    return doc


def write_manifest(run_dir: Path, doc: dict) -> None:
    (run_dir / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def write_result(run_dir: Path, result: ExperimentResult, started: str) -> list[str]:
    """Write every output of a completed run from a single writer."""
    files = []
    for table in result.tables:
        write_snapshots(run_dir / table.name, table)
        files.append(table.name)
    (run_dir / "diagnostics.csv").write_text(result.report.to_csv())
    files.append("diagnostics.csv")
    for name in result.report.series:
        fname = "series_" + "".join(c if c.isalnum() or c in "._=-" else "_" for c in name) + ".csv"
        (run_dir / fname).write_text(result.report.series_csv(name))
        files.append(fname)
    files.append("manifest.json")
    write_manifest(run_dir, manifest_doc(result, result.params, started, now(), "complete", files))
    return files


def write_failure(run_dir: Path, params: SimParams, started: str, message: str) -> None:
    (run_dir / FAILED_MARKER).write_text(message + "\n")
    files = sorted(p.name for p in run_dir.iterdir()) + ["manifest.json"]
    write_manifest(run_dir, manifest_doc(None, params, started, now(), "failed", sorted(set(files)), message))
