"""Command-line entry point.

Every command reads an optional JSON config (``--config``), applies
``--set key=value`` overrides (values parsed as JSON when possible), checks
that all referenced files exist and parse, and only then computes.  Each
artifact is written atomically next to a ``.manifest.json`` sidecar.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error, 4 convergence or truncation failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .exceptions import ConvergenceError, DataError, ParameterError, TruncationError, WindowError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4

COMMANDS = (
    "simulate-spectrum",
    "fit-spectrum",
    "compare-cphir",
    "fit-two-ej",
    "dispersive",
    "s11",
    "budget",
    "analyze-jumps",
    "ramsey",
    "psd",
    "generate",
)

THREAD_ENV = "FLUXSPEC_NUM_THREADS"


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    """Resolved command configuration."""

    command: str
    out: Path
    options: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    seed: int | None = None

    def get(self, key, default=None):
        return self.options.get(key, default)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_nested(d, key, value):
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot set {key}: {p} is not an object")
    d[parts[-1]] = value


def build_config(args):
    options = {}
    inputs = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            options = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(options, dict):
            raise ConfigError(f"{path}: top level must be an object")
        inputs["config"] = path
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_nested(options, key.strip(), _parse_value(value))
    if args.params:
        options["param_file"] = args.params
    if args.data:
        options["data"] = args.data
    for key in ("param_file", "data"):
        if key in options:
            p = Path(options[key])
            if not p.is_file():
                raise ConfigError(f"{key} {p} not found")
            inputs[key] = p
    seed = args.seed if args.seed is not None else options.get("seed")
    if seed is not None and (not isinstance(seed, int) or seed < 0 or seed >= 2**64):
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return RunConfig(args.command, Path(args.out), options, inputs, seed)


# -- helpers ------------------------------------------------------------------


def _cphir(spec):
    from .hamiltonian import CphiRModel

    if spec is None or spec == "sinusoidal":
        return CphiRModel.sinusoidal()
    if spec == "slanted":
        return CphiRModel.slanted()
    if spec == "sawtooth":
        return CphiRModel.sawtooth()
    if isinstance(spec, list):
        return CphiRModel(tuple(float(c) for c in spec))
    raise ConfigError(f"unknown cphir model {spec!r}")


def _load_params(cfg, need_resonator=False):
    from .params import load_param_file, params_from_dict

    if "param_file" in cfg.options:
        circuit, resonator, harmonics = load_param_file(cfg.options["param_file"])
    elif "params" in cfg.options:
        if not isinstance(cfg.options["params"], dict):
            raise ConfigError("params must be an object")
        circuit, resonator, harmonics = params_from_dict(cfg.options["params"])
    else:
        raise ConfigError("no circuit parameters: give --params or a 'params' block")
    if need_resonator and resonator is None:
        raise ConfigError("resonator parameters (f_r_ghz, kappa_mhz, g_ghz) are required")
    cphir = _cphir(cfg.get("cphir", harmonics))
    return circuit, resonator, cphir


def _flux_grid(cfg, default=(0.0, 1.0, 101)):
    if "phi_values" in cfg.options:
        phi = np.asarray(cfg.options["phi_values"], dtype=float)
    else:
        lo = float(cfg.get("phi_min", default[0]))
        hi = float(cfg.get("phi_max", default[1]))
        n = int(cfg.get("n_phi", default[2]))
        phi = np.linspace(lo, hi, n) if n > 0 else np.zeros(0)
    if phi.size == 0:
        raise ConfigError("empty flux grid")
    if not np.all(np.isfinite(phi)):
        raise ConfigError("flux grid must be finite")
    return phi


class _Writer:
    """Collects artifacts so nothing is written before computation succeeds."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.pending = []
        self.failure = None  # raised after the artifacts are written

    def add(self, name, writer, *args, **kwargs):
        self.pending.append((name, writer, args, kwargs))

    def commit(self):
        self.cfg.out.mkdir(parents=True, exist_ok=True)
        params = {k: v for k, v in self.cfg.options.items()}
        written = []
        for name, writer, args, kwargs in self.pending:
            path = self.cfg.out / name
            writer(path, *args, **kwargs)
            io.write_manifest(path, self.cfg.command, self.cfg.inputs, params, self.cfg.seed)
            written.append(path)
        return written


def _seed(cfg):
    return 0 if cfg.seed is None else int(cfg.seed)


# -- commands -----------------------------------------------------------------


def cmd_simulate_spectrum(cfg, out):
    from .hamiltonian import BasisSpec, potential_energy, solve, transition_table, wavefunction

    circuit, _, cphir = _load_params(cfg)
    phi = _flux_grid(cfg)
    n_levels = int(cfg.get("n_levels", 4))
    table = transition_table(circuit, phi, cphir, n_levels=n_levels)
    out.add("spectrum.csv", io.write_spectrum_csv, phi, table)
    phi_wf = cfg.get("wavefunction_phi_ext")
    if phi_wf is not None:
        p = circuit.replace(phi_ext=float(phi_wf))
        sol = solve(p, cphir, BasisSpec.oscillator(), n_levels=5)
        half = float(cfg.get("wavefunction_half_window", 8 * math.pi))
        centre = 2 * math.pi * p.phi_ext
        grid = np.linspace(centre - half, centre + half, int(cfg.get("wavefunction_points", 601)))
        psis = [wavefunction(sol, k, grid) for k in range(4)]
        out.add("wavefunctions.csv", io.write_wavefunction_csv, grid, potential_energy(p, cphir, grid), psis)


def _dataset(cfg):
    from .fitting import default_exclusion_windows

    if "data" not in cfg.options:
        raise ConfigError("--data spectroscopy CSV is required")
    data = io.read_dataset_csv(cfg.options["data"])
    excl = cfg.get("exclusion", "auto")
    if excl == "auto":
        if not data.exclusion_windows:
            data = data.with_windows(default_exclusion_windows(data))
    elif excl == "none":
        data = data.with_windows(())
    elif isinstance(excl, list):
        data = data.with_windows([tuple(w) for w in excl])
    else:
        raise ConfigError(f"exclusion must be 'auto', 'none' or a list of windows, got {excl!r}")
    return data


def _fit_options(cfg):
    keys = ("coordinates", "n_starts", "n_refine", "spread", "model_tol", "max_nfev")
    opts = {k: cfg.options[k] for k in keys if k in cfg.options}
    opts["random_state"] = _seed(cfg)
    return opts


def _residual_table(report):
    m = report.mask
    return [report.phi_ext, report.residuals, m.astype(int)]


def cmd_fit_spectrum(cfg, out):
    from .fitting import fit_spectrum

    circuit, _, cphir = _load_params(cfg)
    data = _dataset(cfg)
    free = tuple(cfg.get("free", ["e_j", "e_c_sigma", "e_l"]))
    report = fit_spectrum(data, cphir, circuit, free, **_fit_options(cfg))
    out.add("fit_report.json", io.write_json, report.to_dict())
    out.add("residuals.csv", io.write_csv, ["phi_ext", "residual_ghz", "included"], _residual_table(report))
    if not report.converged:
        out.failure = ConvergenceError("spectrum fit did not converge; best-so-far report written", result=report)


def cmd_compare_cphir(cfg, out):
    from .fitting import compare_cphir

    circuit, _, _ = _load_params(cfg)
    data = _dataset(cfg)
    names = cfg.get("models", ["sinusoidal", "slanted", "sawtooth"])
    models = [_cphir(n) for n in names]
    opts = _fit_options(cfg)
    opts["model_tols"] = cfg.get("model_tols", {"sawtooth": 1e-4, "slanted": 1e-6})
    results = compare_cphir(data, models, circuit, **opts)
    summary = {
        r.model.name: {"max_abs_residual_ghz": r.max_abs_residual, "report": r.report.to_dict()} for r in results
    }
    out.add("compare_cphir.json", io.write_json, summary)
    model_col, phi_col, res_col = [], [], []
    for r in results:
        phi, res = r.residual_curve()
        model_col += [r.model.name] * phi.size
        phi_col += list(phi)
        res_col += list(res)
    out.add("residual_curves.csv", io.write_csv, ["model", "phi_ext", "residual_ghz"], [model_col, phi_col, res_col])


def cmd_fit_two_ej(cfg, out):
    from .fitting import branch_crossings, fit_two_ej

    circuit, _, cphir = _load_params(cfg)
    data = _dataset(cfg)
    result = fit_two_ej(data, circuit, cphir, max_iter=int(cfg.get("max_iter", 10)), random_state=_seed(cfg))
    payload = result.to_dict()
    payload["crossings_phi_ext"] = branch_crossings(result.report_low.params_hat, result.delta_ej, cphir)
    out.add("two_ej.json", io.write_json, payload)


def cmd_dispersive(cfg, out):
    from .coupled import CoupledSpec, ReflectionModel, check_truncation, dispersive_shift, perturbative_chi

    circuit, resonator, cphir = _load_params(cfg, need_resonator=True)
    spec = CoupledSpec(
        circuit,
        resonator,
        cphir,
        n_fock=int(cfg.get("n_fock", 12)),
        n_qubit_levels=int(cfg.get("n_qubit_levels", 20)),
        coupling=cfg.get("coupling", "charge"),
    )
    delta = check_truncation(spec, tol=float(cfg.get("truncation_tol", 1e-6)))
    ds = dispersive_shift(spec)
    model = ReflectionModel(resonator.f_r, resonator.kappa, ds.chi, float(cfg.get("coupling_ratio", 1.0)))
    out.add(
        "dispersive.json",
        io.write_json,
        {
            "chi_mhz": ds.chi,
            "chi_perturbative_mhz": perturbative_chi(spec),
            "detuning_ghz": ds.detuning,
            "g_eff_ghz": ds.g_eff,
            "near_resonant": ds.near_resonant,
            "readout_resolved": model.readout_resolved,
            "truncation_change_ghz": delta,
            "dressed_ghz": ds.dressed,
        },
    )


def cmd_s11(cfg, out):
    from .coupled import ReflectionModel, reflection_coefficient
    from .fitting import fit_reflection

    if "data" in cfg.options:
        f, ph_g, ph_e = io.read_phase_csv(cfg.options["data"])
        model, est = fit_reflection(
            f, ph_g, f, ph_e, bool(cfg.get("fit_coupling_ratio", False)), float(cfg.get("coupling_ratio", 1.0))
        )
        out.add(
            "reflection_fit.json",
            io.write_json,
            {
                "f0_ghz": model.f0,
                "kappa_mhz": model.kappa,
                "chi_mhz": model.chi,
                "coupling_ratio": model.coupling_ratio,
                "readout_resolved": model.readout_resolved,
                "stderr": est.stderr_,
                "rms_residual_rad": est.rms_residual_,
            },
        )
        return
    try:
        model = ReflectionModel(
            float(cfg.options["f0_ghz"]),
            float(cfg.options["kappa_mhz"]),
            float(cfg.options["chi_mhz"]),
            float(cfg.get("coupling_ratio", 1.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"s11 needs f0_ghz, kappa_mhz and chi_mhz (missing {exc})") from None
    span = float(cfg.get("span_mhz", 10.0)) * 1e-3
    n = int(cfg.get("n_points", 401))
    if n < 2:
        raise ConfigError("n_points must be >= 2")
    f = np.linspace(model.f0 - span / 2, model.f0 + span / 2, n)
    out.add("s11.csv", io.write_s11_csv, f, reflection_coefficient(model, f, "g"), reflection_coefficient(model, f, "e"))


def cmd_budget(cfg, out):
    from .noise import budget_report, flux_noise_amplitude, spectrum_slope
    from .params import ResonatorParams

    try:
        phi = np.asarray(cfg.options["phi_ext"], dtype=float)
        t2 = np.asarray(cfg.options["t2_echo_us"], dtype=float)
        t1 = float(cfg.options["t1_us"])
    except KeyError as exc:
        raise ConfigError(f"budget needs phi_ext, t2_echo_us and t1_us (missing {exc})") from None
    if "slope_ghz_per_phi0" in cfg.options:
        slope = np.asarray(cfg.options["slope_ghz_per_phi0"], dtype=float)
    else:
        circuit, _, cphir = _load_params(cfg)
        slope = spectrum_slope(circuit, phi, cphir)
    prefactor = float(cfg.get("prefactor", math.sqrt(math.log(2))))
    fit = flux_noise_amplitude(phi, t2, t1, slope, prefactor)
    resonator = None
    if "kappa_mhz" in cfg.options:
        resonator = ResonatorParams(
            float(cfg.get("f_r_ghz", 7.4)), float(cfg.options["kappa_mhz"]), 0.0, float(cfg.get("n_photon", 0.0))
        )
    budget = budget_report(
        phi, 1.0 / t2, t1, slope, fit.a_phi, resonator, float(cfg.get("chi_mhz", 0.0)), prefactor,
        float(cfg.get("tolerance", 1e-3)), sources=cfg.get("sources"),
    )
    out.add("flux_noise.json", io.write_json, fit.to_dict())
    out.add("budget.json", io.write_json, budget.to_dict())


def cmd_analyze_jumps(cfg, out):
    from .timeseries import dwell_mle, histogram_iq, latch_filter

    if "data" not in cfg.options:
        raise ConfigError("--data trace file is required")
    trace = io.read_trace(cfg.options["data"])
    hist = histogram_iq(trace, int(cfg.get("min_samples", 10_000)))
    record = latch_filter(trace, hist, float(cfg.get("band", 2.0)))
    f01 = cfg.get("f01_ghz")
    est = dwell_mle(record, None if f01 is None else float(f01), int(cfg.get("min_dwells", 20)))
    out.add(
        "jumps.json",
        io.write_json,
        {"histogram": hist.to_dict(), "dwell": est.to_dict(), "n_jumps": record.n_jumps, "record": record.to_dict()},
    )


def cmd_ramsey(cfg, out):
    from .timeseries import fit_ramsey_two_tone, frequency_jumps

    if "data" not in cfg.options:
        raise ConfigError("--data Ramsey CSV is required")
    t, signals, _ = io.read_series_csv(cfg.options["data"], time_col="t_us")
    alpha = float(cfg.get("alpha", 0.01))
    fits = [fit_ramsey_two_tone(t, s, alpha) for s in signals]
    out.add(
        "ramsey.json",
        io.write_json,
        {"records": [f.to_dict() for f in fits], "frequency_jumps_mhz": frequency_jumps(fits).tolist()},
    )


def cmd_psd(cfg, out):
    from .timeseries import estimate_psd, fit_rtn_psd

    if "data" not in cfg.options:
        raise ConfigError("--data series CSV is required")
    t, series, _ = io.read_series_csv(cfg.options["data"], time_col="t_s")
    psd = estimate_psd(series, times=t)
    out.add("psd.csv", io.write_psd_csv, psd)
    if cfg.get("fit", True):
        out.add("rtn_fit.json", io.write_json, fit_rtn_psd(psd).to_dict())


def cmd_generate(cfg, out):
    from . import synth
    from .coupled import ReflectionModel

    kind = cfg.get("kind")
    seed = _seed(cfg)
    spec = synth.GeneratorSpec(kind, seed, {k: v for k, v in cfg.options.items() if k not in ("kind", "seed")})
    header = {"spec": spec.to_dict()}
    if kind in ("telegraph", "iq_trace"):
        dt = float(cfg.get("dt_us", 0.784))
        n = int(cfg.get("n_samples", round(float(cfg.get("duration_us", 5e5)) / dt)))
        seeds = synth.derive_seeds(seed, 2)
        tel = synth.gen_telegraph(float(cfg.get("t_down_us", 9.9)), float(cfg.get("t_up_us", 1100.0)), dt, n, seeds[0])
        if kind == "telegraph":
            out.add("telegraph.csv", io.write_csv, ["t_us", "state"], [np.arange(n) * dt, tel.states], header)
        else:
            trace = synth.gen_iq_trace(
                tel, float(cfg.get("mu_g", -3.0)), float(cfg.get("mu_e", 3.0)), float(cfg.get("sigma", 1.0)), seeds[1]
            )
            name = "trace.npz" if cfg.get("format", "csv") == "npz" else "trace.csv"
            out.add(name, io.write_trace, trace, header)
    elif kind == "spectrum":
        circuit, _, cphir = _load_params(cfg)
        phi = _flux_grid(cfg, (0.0, 0.5, 41))
        delta = cfg.get("delta_ej_ghz")
        data = synth.gen_spectrum(
            circuit, cphir, phi, float(cfg.get("sigma_f_ghz", 0.0)), seed,
            transitions=tuple(cfg.get("transitions", ["ge", "gf"])),
            delta_ej=None if delta is None else float(delta),
        )
        out.add("dataset.csv", io.write_dataset_csv, data, header)
    elif kind in ("ramsey", "decay"):
        t = np.linspace(0.0, float(cfg.get("t_max_us", 20.0)), int(cfg.get("n_points", 201)))
        if kind == "ramsey":
            y = synth.gen_ramsey(
                t, float(cfg.get("f1_mhz", 2.0)), cfg.get("f2_mhz", 2.2), float(cfg.get("t2_star_us", 5.0)),
                noise=float(cfg.get("noise", 0.0)), seed=seed,
            )
            out.add("ramsey.csv", io.write_series_csv, t, y, "t_us", "signal", header)
        else:
            y = synth.gen_decay(
                t, float(cfg.get("t_decay_us", 11.4)), float(cfg.get("amplitude", 1.0)),
                float(cfg.get("offset", 0.0)), float(cfg.get("noise", 0.0)), seed,
            )
            out.add("decay.csv", io.write_csv, ["t_us", "population"], [t, y], header)
    elif kind == "s11":
        model = ReflectionModel(
            float(cfg.get("f0_ghz", 7.4)), float(cfg.get("kappa_mhz", 1.0)), float(cfg.get("chi_mhz", -1.72)),
            float(cfg.get("coupling_ratio", 1.0)),
        )
        span = float(cfg.get("span_mhz", 10.0)) * 1e-3
        f = np.linspace(model.f0 - span / 2, model.f0 + span / 2, int(cfg.get("n_points", 401)))
        s_g, s_e = synth.gen_s11(model, f, float(cfg.get("phase_noise_deg", 0.0)), seed)
        out.add("s11.csv", io.write_s11_csv, f, s_g, s_e, header)
    elif kind == "rtn":
        n = int(cfg.get("n_samples", 400))
        dt = float(cfg.get("duration_s", 832.0)) / n
        x = synth.gen_rtn_series(
            float(cfg.get("gamma_rtn_hz", 9.4e-3)), float(cfg.get("b_hz2_per_hz", 1.89e13)),
            float(cfg.get("s0_hz2_per_hz", 3.73e11)), dt, n, int(cfg.get("n_traces", 85)), seed,
        )
        out.add("series.csv", io.write_series_csv, np.arange(n) * dt, x, "t_s", "trace", header)
    else:
        raise ConfigError(f"generate needs kind in {synth.KINDS}, got {kind!r}")


HANDLERS = {
    "simulate-spectrum": cmd_simulate_spectrum,
    "fit-spectrum": cmd_fit_spectrum,
    "compare-cphir": cmd_compare_cphir,
    "fit-two-ej": cmd_fit_two_ej,
    "dispersive": cmd_dispersive,
    "s11": cmd_s11,
    "budget": cmd_budget,
    "analyze-jumps": cmd_analyze_jumps,
    "ramsey": cmd_ramsey,
    "psd": cmd_psd,
    "generate": cmd_generate,
}


def run(cfg):
    """Execute a resolved :class:`RunConfig`; returns the written paths."""
    writer = _Writer(cfg)
    HANDLERS[cfg.command](cfg, writer)
    written = writer.commit()
    if writer.failure is not None:
        raise writer.failure
    return written


def make_parser():
    parser = argparse.ArgumentParser(prog="fluxspec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--params", help="JSON circuit parameter file")
        p.add_argument("--data", help="input data file")
    return parser


def _limit_threads():
    value = os.environ.get(THREAD_ENV)
    if not value:
        return None
    try:
        n = max(1, int(value))
    except ValueError:
        raise ConfigError(f"{THREAD_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        limiter = _limit_threads()
        cfg = build_config(args)
        written = run(cfg)
        del limiter
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WindowError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, TruncationError) as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
