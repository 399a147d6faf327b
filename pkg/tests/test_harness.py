import filecmp
import math

import numpy as np
import pytest

from fluctfem import spectra
from fluctfem.harness import commands
from fluctfem.harness.cli import main
from fluctfem.harness.config import (
    OUTPUT_ENV,
    ConfigError,
    RunConfig,
    load_run_config,
    load_sweep_config,
)

SMALL = {"N_e": 16, "dt": 1e-3, "N_t": 400, "N_burn": 50, "u0": 100.0}


def _write(path, text):
    path.write_text(text)
    return path


# config ------------------------------------------------------------------------


def test_parse_with_comments_and_overrides(tmp_path):
    cfg = _write(tmp_path / "a.cfg", "# header\nN_e = 20   # elements\n\nalpha = 0.25\nnoise = off\n")
    c = load_run_config(cfg, {"alpha": "1e-1", "seed": "7"})
    assert (c.N_e, c.alpha, c.seed, c.noise) == (20, 0.1, 7, "off")


def test_defaults_by_model():
    assert RunConfig().noise == "nonlinear_quadrature"
    assert RunConfig(model="fourth_order", ell0=0.1).noise == "linearized_decomposition"


@pytest.mark.parametrize(
    "text, key, line",
    [
        ("N_e = 10\nalpha = 1.5\n", "alpha", 2),
        ("bogus = 1\n", "bogus", 1),
        ("N_e = ten\n", "N_e", 1),
        ("N_e = 8\nmodel = fourth_order\n", "ell0", None),
        ("ell0 = 0.1\n", "ell0", 1),
        ("model = fourth_order\nell0 = 0.1\nnoise = nonlinear_quadrature\n", "noise", 3),
    ],
)
def test_config_errors_name_key_and_line(tmp_path, text, key, line):
    with pytest.raises(ConfigError) as err:
        load_run_config(_write(tmp_path / "bad.cfg", text))
    assert err.value.key == key
    assert err.value.line == line


def test_missing_equals_sign(tmp_path):
    with pytest.raises(ConfigError, match="line 2"):
        load_run_config(_write(tmp_path / "b.cfg", "N_e = 4\nalpha 0.5\n"))


def test_echo_roundtrip(tmp_path):
    c = RunConfig(model="fourth_order", ell0=0.125, N_e=12, dt=3e-5, export_states=True)
    back = load_run_config(_write(tmp_path / "echo", c.echo()))
    assert back == c


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert RunConfig(N_e=8, seed=3).run_dir().parent == tmp_path
    assert RunConfig(output="x").run_dir().name == "x"


def test_sweep_config_axes_and_cap(tmp_path):
    s = load_sweep_config(_write(tmp_path / "s.cfg", "N_e = 8, 16\nalpha = 0.5,0.0\nreplications = 2\n"))
    assert s.size == 8 and s.axes["N_e"] == [8, 16]
    with pytest.raises(ConfigError, match="cap"):
        load_sweep_config(None, {"N_e": "4,8,16", "max_cells": "2"})
    with pytest.raises(ConfigError):
        load_sweep_config(None, {"dx_over_ell0": "0.25"})


# run / analyze -------------------------------------------------------------------


def test_run_is_byte_deterministic(tmp_path):
    cfg = RunConfig(**SMALL, seed=5)
    commands.cmd_run(cfg, tmp_path / "a")
    commands.cmd_run(cfg, tmp_path / "b")
    for name in ("config.echo", "mass.csv", "spectrum_raw.csv", "spectrum_mapped.csv"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    diag = (tmp_path / "a" / "diagnostics.txt").read_text()
    for key in ("mass_std", "clamp_count", "wall_time", "e_FE_raw", "nnz_Q"):
        assert f"{key} = " in diag


def test_run_outputs_parse_back(tmp_path):
    res = commands.cmd_run(RunConfig(**SMALL, dyn_mode=2, dyn_max_lag=10), tmp_path)
    raw = spectra.read_csv_columns(tmp_path / "spectrum_raw.csv", spectra.STATIC_HEADER)
    np.testing.assert_array_equal(raw["S"], res.raw.values)
    mapped = spectra.read_csv_columns(tmp_path / "spectrum_mapped.csv", spectra.STATIC_HEADER)
    np.testing.assert_array_equal(mapped["S_ref"], 100.0)
    dyn = spectra.read_csv_columns(tmp_path / "spectrum_dyn.csv", spectra.DYNAMIC_HEADER)
    assert len(dyn["tau"]) == 11
    assert (tmp_path / "mass.csv").read_text().splitlines()[0] == "step,time,mass"


def test_noise_off_gives_flat_state(tmp_path):
    res = commands.cmd_run(RunConfig(**SMALL, noise="off"), tmp_path)
    assert res.diagnostics["mass_std"] == 0.0
    assert np.all(res.raw.values[1:] < 1e-20)


def test_fourth_order_run(tmp_path):
    cfg = RunConfig(model="fourth_order", ell0=0.25, N_e=16, dt=1e-4, N_t=300, N_burn=100, u0=100.0)
    res = commands.cmd_run(cfg, tmp_path)
    assert res.diagnostics["max_constraint_residual"] < 1e-10
    assert res.diagnostics["mass_std_relative"] < 1e-12


def test_analyze_reproduces_run(tmp_path):
    cfg = RunConfig(**SMALL, export_states=True)
    res = commands.cmd_run(cfg, tmp_path / "run")
    out = commands.cmd_analyze(tmp_path / "run", tmp_path / "again")
    np.testing.assert_allclose(out["raw"].values, res.raw.values, rtol=1e-12)
    np.testing.assert_allclose(out["mapped"].values, res.mapped.values, rtol=1e-12)


def test_analyze_needs_trajectory(tmp_path):
    commands.cmd_run(RunConfig(**SMALL), tmp_path)
    with pytest.raises(ConfigError):
        commands.cmd_analyze(tmp_path)


# verify ---------------------------------------------------------------------------


@pytest.mark.parametrize("order", [1, 2])
def test_verify_passes_by_default(order):
    rep = commands.cmd_verify(RunConfig(N_e=32 // order, p=order))
    assert rep.passed, rep.text()
    names = {c.name for c in rep.checks}
    assert {"fdt_exact", "dt_independence", "alpha_ordering", "mapped_diagonality", "sparsification_leakage"} <= names


def test_verify_limits_size():
    with pytest.raises(ConfigError):
        commands.cmd_verify(RunConfig(N_e=65))


# CLI ------------------------------------------------------------------------------


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["verify", "--N_e", "16"]) == 0
    assert main(["verify", "--N_e", "16", "--alpha", "1", "--dt", "1e-3"]) == 1
    assert "beta_max" in capsys.readouterr().err
    assert main(["run", "--alpha", "7"]) == 1
    assert main(["run", str(tmp_path / "missing.cfg")]) == 1
    # epsilon large enough to break the leakage check
    assert main(["verify", "--N_e", "16", "--epsilon", "0.05"]) == 3
    assert "sparsification" in capsys.readouterr().err


def test_cli_run_and_analyze(tmp_path):
    out = tmp_path / "r"
    args = ["run", "--N_e", "8", "--N_t", "100", "--N_burn", "10", "--export_states", "true", "--output", str(out)]
    assert main(args) == 0
    assert main(["analyze", str(out), "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "spectrum_mapped.csv").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numerical_failure_code(tmp_path):
    # squared amplitudes overflow
    cfg = _write(tmp_path / "c.cfg", "N_e = 8\nN_t = 10\nN_burn = 0\nu0 = 1e300\nnoise = linearized_decomposition\n")
    assert main(["run", str(cfg), "--output", str(tmp_path / "o")]) == 2


# sweep ----------------------------------------------------------------------------


def test_single_cell_sweep_matches_run(tmp_path):
    base = dict(SMALL, seed=4)
    commands.cmd_run(RunConfig(**base), tmp_path / "run")
    sweep = load_sweep_config(None, {k: str(v) for k, v in base.items()} | {"sweep_mode": "simulate"})
    path = commands.cmd_sweep(sweep, tmp_path / "sw")
    for name in ("mass.csv", "spectrum_raw.csv", "spectrum_mapped.csv"):
        assert filecmp.cmp(tmp_path / "run" / name, tmp_path / "sw" / "cell_000" / name, shallow=False)
    rows = commands.read_sweep_csv(path)
    assert [r["cell"] for r in rows] == ["0", "aggregate"]


def test_oracle_sweep_columns_and_parallel(tmp_path):
    over = {"N_e": "32,64,128", "N_t": "10000", "workers": "1"}
    serial = commands.cmd_sweep(load_sweep_config(None, over), tmp_path / "s")
    parallel = commands.cmd_sweep(load_sweep_config(None, over | {"workers": "3"}), tmp_path / "p")
    assert filecmp.cmp(serial, parallel, shallow=False)
    rows = commands.read_sweep_csv(serial)
    assert rows[-1]["cell"] == "aggregate" and rows[-1]["status"] == "3/3 ok"
    assert float(rows[0]["slope_nnzQ_vs_Ndof"]) == pytest.approx(1.0, abs=0.02)
    assert float(rows[0]["e_FE"]) < 1e-9


def test_failed_cells_are_marked(tmp_path):
    # alpha = 1 is unstable on the finest mesh only
    sweep = load_sweep_config(None, {"N_e": "8,64", "alpha": "1", "dt": "2e-4"})
    rows = commands.read_sweep_csv(commands.cmd_sweep(sweep, tmp_path))
    assert rows[0]["status"] == "ok"
    assert rows[1]["status"].startswith("failed: StabilityError")
    assert rows[2]["status"] == "1/2 ok" and math.isnan(float(rows[2]["slope_eFE_vs_Ne"]))


def test_fourth_order_sweep_sets_ell0(tmp_path):
    sweep = load_sweep_config(None, {"model": "fourth_order", "N_e": "16", "dx_over_ell0": "0.25,0.5", "N_t": "1000"})
    cells = commands.sweep_cells(sweep)
    assert [c.ell0 for _, c, _ in cells] == [pytest.approx(0.25), pytest.approx(0.125)]
    rows = commands.read_sweep_csv(commands.cmd_sweep(sweep, tmp_path))
    assert all(r["status"].endswith("ok") for r in rows)
