"""Command-line interface contract.

Covers the merge order config-file < flags, validation failures mapping to
exit code 2 (solver failures 3, missing files 4), VTK/CSV artifact layout,
byte-identical re-runs of convergence tables, the thread-cap environment
variable, and the rounded-cube demo preset.
"""

import json
import subprocess
import sys

import numpy as np
import pytest

from evolvefem import cli
from evolvefem.errors import SolverError
from evolvefem.vtk_io import read_vtk


def run_cli(*argv):
    return cli.main(list(argv))


# ------------------------------------------------------------ coefficients


def test_coefficients_exact_low_orders(capsys):
    assert run_cli("coefficients", "--p", "2") == 0
    out = capsys.readouterr().out
    assert "delta: 1.5, -2, 0.5" in out
    assert "gamma: 2, -1" in out
    assert "zero-stable: yes" in out


def test_coefficients_prints_known_multiplier(capsys):
    assert run_cli("coefficients", "--p", "5") == 0
    assert "eta: 0.8160" in capsys.readouterr().out


def test_coefficients_verdict_for_unstable_order(capsys):
    assert run_cli("coefficients", "--p", "7") == 0
    out = capsys.readouterr().out
    assert "no, not zero-stable" in out
    assert "eta: none known" in out


def test_coefficients_rejects_orders_outside_table(capsys):
    assert run_cli("coefficients", "--p", "9") == 2
    assert "1..7" in capsys.readouterr().err


# --------------------------------------------------------------------- run


def test_run_writes_parseable_frames_and_summary(tmp_path):
    out = tmp_path / "nested" / "series"  # missing directories are created
    code = run_cli("run", "--law", "regularized", "--p", "2", "--tau", "0.1",
                   "--end-time", "0.3", "--level", "1", "--manufactured",
                   "--output-dir", str(out))
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["num_steps"] == 3
    assert summary["files"] == [f"surface_{i:06d}.vtk" for i in range(4)]
    assert summary["times"] == pytest.approx([0.0, 0.1, 0.2, 0.3])
    grid = read_vtk(out / summary["files"][-1])
    assert grid.cell_types[0] == 22
    assert "velocity" in grid.point_data
    assert "u" not in grid.point_data  # no scalar field for this law


def test_run_coupled_attaches_scalar_field(tmp_path):
    out = tmp_path / "coupled"
    code = run_cli("run", "--law", "coupled", "--p", "2", "--tau", "0.1",
                   "--end-time", "0.2", "--level", "1", "--manufactured",
                   "--output-dir", str(out))
    assert code == 0
    grid = read_vtk(out / "surface_000002.vtk")
    assert grid.point_data["u"].shape == (grid.points.shape[0],)


def test_observer_stride_thins_the_series(tmp_path):
    out = tmp_path / "strided"
    code = run_cli("run", "--law", "regularized", "--p", "1", "--tau", "0.1",
                   "--end-time", "0.6", "--level", "0", "--manufactured",
                   "--observer-stride", "3", "--output-dir", str(out))
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["times"] == pytest.approx([0.0, 0.3, 0.6])


def test_short_horizon_writes_starting_phase_with_warning(tmp_path):
    out = tmp_path / "short"
    with pytest.warns(UserWarning, match="starting window"):
        code = run_cli("run", "--law", "regularized", "--p", "4", "--tau", "0.2",
                       "--end-time", "0.1", "--level", "0", "--manufactured",
                       "--output-dir", str(out))
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["num_steps"] == 0
    assert len(summary["files"]) == 4  # the four-step starting window


# ----------------------------------------------------------- configuration


def test_config_file_drives_run_and_flags_override(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(
        'law = "regularized"\np = 2\ntau = 0.1\nend_time = 0.3\n'
        f'level = 1\noutput_dir = "{tmp_path / "a"}"\n'
    )
    assert run_cli("run", "--config", str(cfg)) == 0
    assert json.loads((tmp_path / "a" / "summary.json").read_text())["num_steps"] == 3

    code = run_cli("run", "--config", str(cfg), "--end-time", "0.2",
                   "--output-dir", str(tmp_path / "b"))
    assert code == 0
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["num_steps"] == 2


def test_unknown_config_keys_are_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("bogus_key = 1\n")
    assert run_cli("run", "--config", str(cfg)) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_missing_config_file_is_an_io_error(tmp_path):
    assert run_cli("run", "--config", str(tmp_path / "nope.toml")) == 4


@pytest.mark.parametrize(
    "argv",
    [
        ("run", "--law", "bogus", "--level", "1"),
        ("run", "--law", "regularized", "--p", "0", "--level", "1"),
        ("run", "--law", "regularized", "--degree", "3", "--level", "1"),
        ("run", "--law", "regularized", "--level", "-1"),
        ("run", "--law", "regularized", "--tau", "-0.1", "--level", "1"),
    ],
)
def test_invalid_configurations_exit_2(argv):
    assert run_cli(*argv) == 2


def test_solver_failure_maps_to_exit_3(monkeypatch, capsys):
    def boom(cfg):
        raise SolverError("iteration stalled")

    monkeypatch.setattr(cli, "cmd_run", boom)
    assert run_cli("run", "--law", "regularized", "--level", "1") == 3
    assert "iteration stalled" in capsys.readouterr().err


# ----------------------------------------------------------------- sweeps


def test_converge_time_tables_are_byte_identical(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("EVOLVEFEM_THREADS", "1")
    argv = ("converge-time", "--law", "regularized", "--p", "2", "--end-time",
            "0.3", "--level", "1", "--taus", "0.1", "0.05")
    assert run_cli(*argv, "--output-dir", str(tmp_path / "s1")) == 0
    assert run_cli(*argv, "--output-dir", str(tmp_path / "s2")) == 0
    first = (tmp_path / "s1" / "convergence_time_level1.csv").read_bytes()
    second = (tmp_path / "s2" / "convergence_time_level1.csv").read_bytes()
    assert first == second
    lines = first.decode().splitlines()
    assert lines[0] == "param,L2,H1,EOC_L2,EOC_H1"
    assert len(lines) == 3
    assert "convergence_time_level1.csv" in capsys.readouterr().out


def test_converge_time_rejects_increasing_steps():
    assert run_cli("converge-time", "--law", "regularized", "--level", "1",
                   "--taus", "0.05", "0.1") == 2


def test_converge_space_sweeps_mesh_levels(tmp_path, monkeypatch):
    monkeypatch.setenv("EVOLVEFEM_THREADS", "2")
    code = run_cli("converge-space", "--law", "regularized", "--p", "2",
                   "--tau", "0.1", "--end-time", "0.2", "--levels", "0", "1",
                   "--output-dir", str(tmp_path))
    assert code == 0
    rows = (tmp_path / "convergence_space.csv").read_text().splitlines()[1:]
    widths = [float(r.split(",")[0]) for r in rows]
    assert widths[0] > widths[1] > 0  # parameter column holds mesh widths


def test_sweeps_require_the_manufactured_solution():
    assert run_cli("converge-time", "--law", "regularized", "--level", "1",
                   "--free", "--taus", "0.1") == 2


def test_worker_count_honours_environment(monkeypatch):
    monkeypatch.setenv("EVOLVEFEM_THREADS", "2")
    assert cli.worker_count(8) == 2
    assert cli.worker_count(1) == 1
    monkeypatch.setenv("EVOLVEFEM_THREADS", "0")
    with pytest.raises(cli.ConfigError, match="positive"):
        cli.worker_count(4)
    monkeypatch.setenv("EVOLVEFEM_THREADS", "four")
    with pytest.raises(cli.ConfigError, match="integer"):
        cli.worker_count(4)


def test_bad_thread_cap_exits_2(monkeypatch):
    monkeypatch.setenv("EVOLVEFEM_THREADS", "banana")
    assert run_cli("converge-time", "--law", "regularized", "--p", "2",
                   "--end-time", "0.2", "--level", "1", "--taus", "0.1") == 2


# ------------------------------------------------------------------- demo


def demo_summary(tmp_path, *argv):
    out = tmp_path / "demo"
    with pytest.warns(UserWarning, match="regularization"):  # the alpha = 0 run
        assert run_cli(*argv, "--output-dir", str(out)) == 0
    return out, json.loads((out / "summary.json").read_text())


def test_mcf_demo_runs_four_alpha_series(tmp_path):
    out, summary = demo_summary(
        tmp_path, "mcf-demo", "--level", "1", "--tau", "0.05", "--end-time", "0.2"
    )
    assert sorted(summary) == ["alpha-0", "alpha-0.001", "alpha-0.01", "alpha-0.1"]
    for name, series in summary.items():
        areas = series["areas"]
        assert all(b < a for a, b in zip(areas, areas[1:])), name
        grid = read_vtk(out / name / series["files"][-1])
        assert np.isfinite(grid.points).all()


def test_run_accepts_the_demo_preset_alias(tmp_path):
    out, summary = demo_summary(
        tmp_path, "run", "--law", "mcf-demo", "--level", "1",
        "--tau", "0.05", "--end-time", "0.2"
    )
    assert len(summary) == 4
    assert (out / "alpha-0.1" / "surface_000000.vtk").exists()


# ------------------------------------------------------------- entry point


def test_console_script_is_installed():
    proc = subprocess.run([sys.executable, "-m", "evolvefem.cli",
                           "coefficients", "--p", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "delta: 1, -1" in proc.stdout
