import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fluxspec import cli, io

PARAMS = {"e_j_ghz": 23.4, "c_sigma_ff": 1.26, "l_q_nh": 285.0}
RESONATOR = dict(PARAMS, phi_ext=0.5, f_r_ghz=7.4, kappa_mhz=1.0, g_ghz=0.34)


@pytest.fixture
def param_file(tmp_path):
    p = tmp_path / "params.json"
    p.write_text(json.dumps(PARAMS))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def artifacts(directory):
    return sorted(p.name for p in directory.iterdir() if not p.name.endswith(".manifest.json"))


def test_simulate_spectrum_writes_manifested_csv(tmp_path, param_file):
    out = tmp_path / "o"
    assert run("simulate-spectrum", "--params", param_file, "--out", out, "--set", "n_phi=5", "--seed", 3) == 0
    meta, cols = io.read_columns_csv(out / "spectrum.csv", ["phi_ext", "f_ge_ghz"])
    assert cols["phi_ext"].size == 5
    man = json.loads((out / "spectrum.csv.manifest.json").read_text())
    assert man["sha256"] == io.sha256_file(out / "spectrum.csv")
    assert man["inputs"]["param_file"]["sha256"] == io.sha256_file(param_file)
    assert man["seed"] == 3 and man["command"] == "simulate-spectrum"
    assert set(man["versions"]) >= {"numpy", "scipy", "fluxspec"}


def test_reruns_are_byte_identical(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kind": "iq_trace", "n_samples": 2000, "seed": 9}))
    for name in ("a", "b"):
        assert run("generate", "--config", cfg, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    assert run("generate", "--config", cfg, "--out", tmp_path / "c", "--seed", 10) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() != (tmp_path / "c" / "trace.csv").read_bytes()


def test_empty_flux_grid_is_config_error_and_writes_nothing(tmp_path, param_file):
    out = tmp_path / "o"
    assert run("simulate-spectrum", "--params", param_file, "--out", out, "--set", "n_phi=0") == cli.EXIT_CONFIG
    assert not out.exists()


@pytest.mark.parametrize(
    "extra",
    [
        ["--config", "missing.json"],
        ["--set", "novalue"],
        ["--seed", "-1"],
        ["--data", "nowhere.csv"],
        ["--set", "cphir=\"wobbly\""],
    ],
)
def test_config_errors(tmp_path, param_file, extra):
    out = tmp_path / "o"
    assert run("simulate-spectrum", "--params", param_file, "--out", out, *extra) == cli.EXIT_CONFIG
    assert not out.exists()


def test_malformed_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("generate", "--config", bad, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_invalid_parameters_are_config_errors(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"e_j_ghz": -1, "c_sigma_ff": 1.26, "l_q_nh": 285.0}))
    assert run("simulate-spectrum", "--params", p, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    gen = tmp_path / "g"
    assert run("generate", "--out", gen, "--set", "kind=\"iq_trace\"", "--set", "n_samples=500") == 0
    out = tmp_path / "o"
    assert run("analyze-jumps", "--data", gen / "trace.csv", "--out", out) == cli.EXIT_DATA
    assert not out.exists()


def test_convergence_failure_keeps_best_so_far(tmp_path, param_file):
    gen = tmp_path / "g"
    assert run("generate", "--params", param_file, "--out", gen, "--set", "kind=\"spectrum\"", "--set", "n_phi=11") == 0
    p2 = tmp_path / "p2.json"
    p2.write_text(json.dumps(dict(PARAMS, e_j_ghz=25.0)))
    out2 = tmp_path / "o2"
    code = run("fit-spectrum", "--params", p2, "--data", gen / "dataset.csv", "--out", out2,
               "--set", "max_nfev=1", "--set", "n_starts=1", "--set", "n_refine=1")
    assert code == cli.EXIT_CONVERGENCE
    report = json.loads((out2 / "fit_report.json").read_text())
    assert report["converged"] is False
    assert (out2 / "fit_report.json.manifest.json").exists()


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(cfg, out):
        raise RuntimeError("unexpected")

    monkeypatch.setitem(cli.HANDLERS, "dispersive", boom)
    assert run("dispersive", "--out", tmp_path / "o") == cli.EXIT_INTERNAL


def test_spectrum_generate_and_fit(tmp_path, param_file):
    gen = tmp_path / "g"
    assert run("generate", "--params", param_file, "--out", gen, "--set", "kind=\"spectrum\"", "--set", "n_phi=11") == 0
    out = tmp_path / "o"
    assert run("fit-spectrum", "--params", param_file, "--data", gen / "dataset.csv", "--out", out,
               "--set", "n_starts=1", "--set", "n_refine=1") == 0
    report = json.loads((out / "fit_report.json").read_text())
    assert report["params_hat"]["c_sigma_ff"] == pytest.approx(1.26, rel=1e-6)
    assert artifacts(out) == ["fit_report.json", "residuals.csv"]


def test_compare_and_two_ej_commands(tmp_path, param_file):
    gen = tmp_path / "g"
    assert run("generate", "--params", param_file, "--out", gen, "--set", "kind=\"spectrum\"",
               "--set", "phi_values=[0.0,0.1,0.2,0.3,0.4,0.5]", "--set", "delta_ej_ghz=0.19") == 0
    out = tmp_path / "t"
    assert run("fit-two-ej", "--params", param_file, "--data", gen / "dataset.csv", "--out", out,
               "--set", "exclusion=\"none\"") == 0
    two = json.loads((out / "two_ej.json").read_text())
    assert two["delta_ej_ghz"] == pytest.approx(0.19, rel=0.05)
    gen2 = tmp_path / "g2"
    assert run("generate", "--params", param_file, "--out", gen2, "--set", "kind=\"spectrum\"", "--set", "n_phi=11") == 0
    out2 = tmp_path / "c"
    assert run("compare-cphir", "--params", param_file, "--data", gen2 / "dataset.csv", "--out", out2,
               "--set", "models=[\"sinusoidal\"]", "--set", "n_starts=1", "--set", "n_refine=1") == 0
    summary = json.loads((out2 / "compare_cphir.json").read_text())
    assert summary["sinusoidal"]["max_abs_residual_ghz"] < 1e-6


def test_jump_pipeline(tmp_path):
    gen = tmp_path / "g"
    assert run("generate", "--out", gen, "--seed", 1, "--set", "kind=\"iq_trace\"",
               "--set", "duration_us=1000000", "--set", "format=\"npz\"") == 0
    out = tmp_path / "o"
    assert run("analyze-jumps", "--data", gen / "trace.npz", "--out", out, "--set", "f01_ghz=4.04") == 0
    res = json.loads((out / "jumps.json").read_text())
    assert res["dwell"]["t1_us"] == pytest.approx(9.8, rel=0.1)
    assert res["dwell"]["t_eff_mk"] > 0


def test_ramsey_command(tmp_path):
    gen = tmp_path / "g"
    assert run("generate", "--out", gen, "--set", "kind=\"ramsey\"", "--set", "n_points=601",
               "--set", "t_max_us=15") == 0
    out = tmp_path / "o"
    assert run("ramsey", "--data", gen / "ramsey.csv", "--out", out) == 0
    rec = json.loads((out / "ramsey.json").read_text())["records"][0]
    assert rec["two_tone"] and rec["f_beating_mhz"] == pytest.approx(0.2, rel=0.02)


def test_psd_command(tmp_path):
    gen = tmp_path / "g"
    assert run("generate", "--out", gen, "--seed", 2, "--set", "kind=\"rtn\"") == 0
    out = tmp_path / "o"
    assert run("psd", "--data", gen / "series.csv", "--out", out) == 0
    fit = json.loads((out / "rtn_fit.json").read_text())
    assert fit["gamma_rtn_hz"] == pytest.approx(9.4e-3, rel=0.25)
    assert artifacts(out) == ["psd.csv", "rtn_fit.json"]


def test_s11_generate_and_fit(tmp_path):
    gen = tmp_path / "g"
    assert run("generate", "--out", gen, "--set", "kind=\"s11\"", "--set", "phase_noise_deg=2.0") == 0
    out = tmp_path / "o"
    assert run("s11", "--data", gen / "s11.csv", "--out", out) == 0
    fit = json.loads((out / "reflection_fit.json").read_text())
    assert fit["chi_mhz"] == pytest.approx(-1.72, rel=0.02)
    assert fit["readout_resolved"] is True
    out2 = tmp_path / "model"
    assert run("s11", "--out", out2, "--set", "f0_ghz=7.4", "--set", "kappa_mhz=1.0", "--set", "chi_mhz=-1.72") == 0
    assert (out2 / "s11.csv").exists()


def test_dispersive_command(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps(RESONATOR))
    out = tmp_path / "o"
    assert run("dispersive", "--params", p, "--out", out) == 0
    res = json.loads((out / "dispersive.json").read_text())
    assert res["chi_mhz"] < 0 and res["readout_resolved"]


def test_budget_command(tmp_path):
    phi = np.linspace(0.46, 0.54, 9)
    slope = np.abs(phi - 0.5) * 40.0
    t2 = 1.0 / (0.5 / 14.0 + 2 * np.pi * 30e-6 * slope * 1e3 * np.sqrt(np.log(2)) + 0.02)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"phi_ext": phi.tolist(), "t2_echo_us": t2.tolist(), "t1_us": 14.0,
                               "slope_ghz_per_phi0": slope.tolist(), "kappa_mhz": 1.0, "chi_mhz": -1.72}))
    out = tmp_path / "o"
    assert run("budget", "--config", cfg, "--out", out) == 0
    assert json.loads((out / "flux_noise.json").read_text())["a_phi"] == pytest.approx(30.0, rel=1e-6)
    budget = json.loads((out / "budget.json").read_text())
    assert "shot_noise_n_photon" in budget["hypotheses"]


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREAD_ENV, "many")
    assert run("generate", "--out", tmp_path / "o", "--set", "kind=\"decay\"") == cli.EXIT_CONFIG


def test_console_entry_point_with_thread_cap(tmp_path):
    env = dict(os.environ, FLUXSPEC_NUM_THREADS="1")
    proc = subprocess.run(
        [sys.executable, "-m", "fluxspec.cli", "generate", "--out", str(tmp_path / "o"), "--set", "kind=\"decay\""],
        capture_output=True, text=True, env=env, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "decay.csv").exists()
    bad = subprocess.run([sys.executable, "-m", "fluxspec.cli", "nonsense"], capture_output=True, check=False)
    assert bad.returncode == cli.EXIT_CONFIG
