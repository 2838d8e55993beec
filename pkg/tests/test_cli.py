import json
import math

import numpy as np
import pytest

from kslab.cli import main, parse_chi, recheck_bounds
from kslab.core import SimParams
from kslab.experiments import preset, preset_names, run


def _write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


MINIMAL = {"experiment_name": "tiny", "n_particles": 3, "chi": 2.0, "dt": 0.1, "horizon": 0.1, "seed": 1}


def test_minimal_config_three_files(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"), "--no-figures"]) == 0
    files = {p.name for p in (tmp_path / "o" / "tiny").iterdir()}
    assert {"manifest.json", "snapshots.csv", "diagnostics.csv"} <= files
    man = json.loads((tmp_path / "o" / "tiny" / "manifest.json").read_text())
    assert man["status"] == "complete" and SimParams.from_dict(man["params"]) == SimParams.from_dict(MINIMAL)
    lines = (tmp_path / "o" / "tiny" / "snapshots.csv").read_text().splitlines()
    assert lines[0] == "replica,time,particle_index,x,y"
    assert len(lines) == 1 + 2 * 3


def test_figures_written(tmp_path):
    cfg = _write(tmp_path, dict(MINIMAL, horizon=0.5, dt=0.01, replicas=3))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "tiny" / "figures" / "variance.png").stat().st_size > 0


def test_alpha_outside_interval_names_constraint(tmp_path, capsys):
    cfg = _write(tmp_path, dict(MINIMAL, n_particles=8, chi=math.pi, alpha=0.2))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "alpha" in err and "(N-1)chi/(2 pi N)" in err


def test_invalid_json_and_unknown_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "chi": 2.0,\n  "dt": ,\n}')
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err
    cfg = _write(tmp_path, dict(MINIMAL, colour="red"))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "colour" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2


def test_rerun_byte_identical_and_overwrite_flag(tmp_path):
    cfg = _write(tmp_path, dict(MINIMAL, dt=0.01, horizon=0.3, replicas=5, epsilon=0.01))
    out = str(tmp_path / "o")
    assert main(["simulate", "--config", cfg, "--out", out, "--no-figures"]) == 0
    first = (tmp_path / "o" / "tiny" / "snapshots.csv").read_bytes()
    assert main(["simulate", "--config", cfg, "--out", out, "--no-figures"]) == 2
    assert main(["simulate", "--config", cfg, "--out", out, "--no-figures", "--overwrite", "--jobs", "3"]) == 0
    assert (tmp_path / "o" / "tiny" / "snapshots.csv").read_bytes() == first
    # replaying the manifest reproduces the run
    man = str(tmp_path / "o" / "tiny" / "manifest.json")
    assert main(["simulate", "--config", man, "--out", str(tmp_path / "replay"), "--no-figures"]) == 0
    assert (tmp_path / "replay" / "tiny" / "snapshots.csv").read_bytes() == first


def test_env_var_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("KSLAB_OUT", str(tmp_path / "envroot"))
    cfg = _write(tmp_path, MINIMAL)
    assert main(["simulate", "--config", cfg, "--no-figures"]) == 0
    assert (tmp_path / "envroot" / "tiny" / "manifest.json").exists()


def test_blowup_leaves_marker_and_partial_output(tmp_path, capsys):
    # the pair distance overflows to inf on the first drift evaluation
    doc = dict(MINIMAL, n_particles=2, initial_law={"kind": "point_cloud", "points": [[1.5e308, 0], [-1.5e308, 0]]})
    cfg = _write(tmp_path, doc)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 3
    run_dir = tmp_path / "tiny"
    assert (run_dir / "FAILED").exists()
    man = json.loads((run_dir / "manifest.json").read_text())
    assert man["status"] == "failed" and "step 1" in man["error"]
    rows = (run_dir / "snapshots.csv").read_text().splitlines()
    assert len(rows) == 3  # header plus the initial state of both particles
    assert "blow-up" in capsys.readouterr().err


def test_presets_round_trip_and_contents(tmp_path, capsys):
    for name in preset_names():
        p = preset(name)
        assert SimParams.from_json(p.to_json()) == p
        out = tmp_path / f"{name}.json"
        assert main(["preset", "--name", name, "--write", str(out)]) == 0
        assert SimParams.from_json(out.read_text()) == p
    reg = preset("regime_table")
    assert reg.n_particles == 5 and any(abs(c - 6.5 * math.pi) < 1e-12 for c in reg.chi_sweep)
    v = preset("variance_slope")
    assert (v.n_particles, v.chi, v.dt, v.horizon, v.replicas) == (32, 4 * math.pi, 1e-4, 1.0, 500)
    assert main(["preset", "--name", "regime_table"]) == 0
    assert json.loads(capsys.readouterr().out)["n_particles"] == 5


def test_unknown_preset_lists_names(capsys):
    assert main(["preset", "--name", "nope"]) == 2
    err = capsys.readouterr().err
    assert all(n in err for n in preset_names())


def test_regimes_command(capsys):
    assert main(["regimes", "--n", "5", "--chi", "6.5pi"]) == 0
    out = capsys.readouterr().out
    rows = {line.split(",")[0]: line.split(",") for line in out.splitlines() if line[:1].isdigit()}
    # delta(k) = (k - 1)(2 - 6.5 k / 20)
    assert float(rows["2"][1]) == pytest.approx(1.35) and rows["2"][2] == "reflecting"
    assert [rows[k][2] for k in "345"] == ["no_collision", "no_collision", "reflecting"]
    assert main(["regimes", "--n", "2", "--chi", "1"]) == 2


def test_parse_chi():
    assert parse_chi("6.5pi") == pytest.approx(6.5 * math.pi)
    assert parse_chi("48/7 pi") == pytest.approx(48 * math.pi / 7)
    assert parse_chi("20.4") == 20.4
    assert parse_chi("pi") == pytest.approx(math.pi)
    with pytest.raises(Exception):
        parse_chi("abc")


def test_diagnose_suites(tmp_path):
    cfg = _write(tmp_path, dict(MINIMAL, n_particles=6, dt=0.01, horizon=0.4, replicas=4, record_every=5))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path), "--no-figures"]) == 0
    run_dir = tmp_path / "tiny"
    for suite in ("variance", "separations", "density"):
        main(["diagnose", "--run", str(run_dir), "--suite", suite, "--no-figures"])
        assert (run_dir / f"diagnose_{suite}.csv").exists()
    assert main(["diagnose", "--run", str(run_dir), "--suite", "bounds"]) == 0
    assert main(["diagnose", "--run", str(run_dir), "--suite", "masses"]) == 2
    assert main(["diagnose", "--run", str(tmp_path / "nowhere"), "--suite", "variance"]) == 2


def test_diagnose_masses_on_cluster_run(tmp_path):
    doc = dict(MINIMAL, experiment="cluster", n_particles=6, chi=24 * math.pi, dt=1e-3, horizon=0.2,
               replicas=4, record_every=20, chi_sweep=[24 * math.pi, 30 * math.pi],
               initial_law={"kind": "uniform_disk", "radius": 0.2})
    cfg = _write(tmp_path, doc)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path), "--no-figures"]) == 0
    head = (tmp_path / "tiny" / "snapshots.csv").read_text().splitlines()[0]
    assert head == "replica,time,particle_index,x,y,mass"
    assert (tmp_path / "tiny" / "snapshots_arm1.csv").exists()
    assert main(["diagnose", "--run", str(tmp_path / "tiny"), "--suite", "masses"]) == 0


def test_bounds_recheck_matches_report(tmp_path):
    res = run(SimParams(experiment="pair_cubed", experiment_name="pc", chi=2 * math.pi, dt=1e-3, horizon=0.2,
                        replicas=50, seed=2))
    path = tmp_path / "d.csv"
    path.write_text(res.report.to_csv())
    checks = recheck_bounds(path)
    assert checks and all(a == b for _, a, b in checks)
