"""File formats, atomic writes and run manifests.

CSV files may start with ``#`` comment lines; a line of the form
``# key=value`` carries metadata (for traces, ``dt_us``) and ``# spec=``
holds the JSON description of a generated dataset.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io as _io
import json
import os
import platform
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import DataError

__all__ = [
    "atomic_write",
    "write_json",
    "write_manifest",
    "sha256_file",
    "dumps_json",
    "write_csv",
    "read_csv",
    "write_spectrum_csv",
    "write_wavefunction_csv",
    "write_s11_csv",
    "read_phase_csv",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_trace",
    "read_trace",
    "write_psd_csv",
    "write_series_csv",
    "read_series_csv",
    "read_columns_csv",
]


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def dumps_json(obj):
    """Deterministic JSON: sorted keys, non-finite floats spelled out."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to a temporary file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj):
    return atomic_write(path, dumps_json(obj))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    import sklearn

    from . import __version__

    return {
        "fluxspec": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "python": platform.python_version(),
    }


def write_manifest(artifact, command, inputs, parameters, seed=None):
    """Sidecar ``<artifact>.manifest.json`` with hashes, parameters and versions."""
    artifact = Path(artifact)
    manifest = {
        "artifact": artifact.name,
        "sha256": sha256_file(artifact),
        "command": command,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in sorted(inputs.items())},
        "parameters": parameters,
        "seed": seed,
        "versions": _versions(),
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    return write_json(artifact.with_name(artifact.name + ".manifest.json"), manifest)


# -- generic CSV --------------------------------------------------------------


def write_csv(path, header, columns, meta=None):
    """Columns of equal length under ``header``; ``meta`` becomes comment lines."""
    buf = _io.StringIO()
    for key, value in (meta or {}).items():
        text = value if isinstance(value, str) else json.dumps(_jsonable(value), sort_keys=True)
        buf.write(f"# {key}={text}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*columns):
        w.writerow([_fmt(x) for x in row])
    return atomic_write(path, buf.getvalue())


def read_csv(path):
    """Return ``(meta, header, rows)`` with rows as lists of strings."""
    meta = {}
    lines = []
    try:
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    body = line[1:].strip()
                    if "=" in body:
                        k, v = body.split("=", 1)
                        meta[k.strip()] = v.strip()
                elif line.strip():
                    lines.append(line)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}: no header row") from None
    rows = [r for r in reader]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i + 1} has {len(r)} fields, expected {len(header)}")
    return meta, header, rows


def read_columns_csv(path, required=()):
    """Numeric columns by name; missing required columns raise DataError."""
    meta, header, rows = read_csv(path)
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    try:
        data = np.array([[float(x) for x in r] for r in rows], dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value ({exc})") from exc
    return meta, {name: data[:, i] for i, name in enumerate(header)}


# -- module formats -----------------------------------------------------------


_TRANSITION_NAMES = ["f_ge_ghz", "f_gf_ghz", "f_gh_ghz", "f_gi_ghz", "f_gj_ghz"]


def write_spectrum_csv(path, phi, table, meta=None):
    """Columns phi_ext, f_ge_ghz, f_gf_ghz, ... (transitions from the ground state)."""
    table = np.atleast_2d(table)
    names = [_TRANSITION_NAMES[k] if k < len(_TRANSITION_NAMES) else f"f_g{k + 1}_ghz" for k in range(table.shape[1])]
    return write_csv(path, ["phi_ext"] + names, [phi] + [table[:, k] for k in range(table.shape[1])], meta)


def write_wavefunction_csv(path, phi, potential, psis, meta=None):
    psis = np.atleast_2d(psis)
    header = ["phi", "potential_ghz"] + [f"psi_{k}" for k in range(psis.shape[0])]
    return write_csv(path, header, [phi, potential] + list(psis), meta)


def write_s11_csv(path, f, s_g, s_e, meta=None):
    return write_csv(path, ["f_ghz", "re_g", "im_g", "re_e", "im_e"], [f, s_g.real, s_g.imag, s_e.real, s_e.imag], meta)


def read_phase_csv(path):
    """Reflection data as (f, phase_g, phase_e) in GHz and radians.

    Accepts either the complex S11 layout or explicit ``phase_g_rad`` /
    ``phase_e_rad`` columns.
    """
    _, cols = read_columns_csv(path, ["f_ghz"])
    if {"phase_g_rad", "phase_e_rad"} <= set(cols):
        return cols["f_ghz"], cols["phase_g_rad"], cols["phase_e_rad"]
    if {"re_g", "im_g", "re_e", "im_e"} <= set(cols):
        return (
            cols["f_ghz"],
            np.angle(cols["re_g"] + 1j * cols["im_g"]),
            np.angle(cols["re_e"] + 1j * cols["im_e"]),
        )
    raise DataError(f"{path}: need phase_g_rad/phase_e_rad or re_g/im_g/re_e/im_e columns")


def write_dataset_csv(path, data, meta=None):
    if data.exclusion_windows:
        meta = dict(meta or {})
        meta["exclusion_windows"] = [list(w) for w in data.exclusion_windows]
    return write_csv(path, ["phi_ext", "f_ghz", "label", "weight"], [data.phi_ext, data.frequency, data.label, data.weight], meta)


def read_dataset_csv(path):
    """Spectroscopy points (phi_ext, f_ghz, label, weight or sigma_ghz)."""
    from .fitting import SpectroscopyDataset

    meta, header, rows = read_csv(path)
    for col in ("phi_ext", "f_ghz"):
        if col not in header:
            raise DataError(f"{path}: missing column {col}")
    idx = {h: i for i, h in enumerate(header)}
    try:
        phi = np.array([float(r[idx["phi_ext"]]) for r in rows])
        f = np.array([float(r[idx["f_ghz"]]) for r in rows])
        label = np.array([r[idx["label"]].strip() for r in rows]) if "label" in idx else None
        weight = np.array([float(r[idx["weight"]]) for r in rows]) if "weight" in idx else None
        if "sigma_ghz" in idx:
            sigma = np.array([float(r[idx["sigma_ghz"]]) for r in rows])
            if np.any(sigma <= 0):
                raise DataError(f"{path}: sigma_ghz must be positive")
            weight = (weight if weight is not None else 1.0) / sigma**2
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    windows = json.loads(meta["exclusion_windows"]) if "exclusion_windows" in meta else ()
    if phi.size == 0:
        raise DataError(f"{path}: no data rows")
    return SpectroscopyDataset(phi, f, label, weight, windows)


def write_trace(path, trace, meta=None):
    """IQ trace as CSV (t_us, I, Q with dt in the header) or ``.npz``."""
    path = Path(path)
    if path.suffix == ".npz":
        buf = _io.BytesIO()
        np.savez(buf, samples=trace.samples, dt=np.float64(trace.dt), meta=json.dumps(_jsonable(meta or {}), sort_keys=True))
        return atomic_write(path, buf.getvalue())
    head = {"dt_us": repr(float(trace.dt))}
    head.update(meta or {})
    t = np.arange(len(trace)) * trace.dt
    return write_csv(path, ["t_us", "I", "Q"], [t, trace.samples.real, trace.samples.imag], head)


def read_trace(path):
    from .timeseries import IQTrace

    path = Path(path)
    if path.suffix == ".npz":
        try:
            with np.load(path) as z:
                return IQTrace(z["samples"], float(z["dt"]), json.loads(str(z["meta"])) if "meta" in z else {})
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from exc
    meta, cols = read_columns_csv(path, ["I", "Q"])
    if "dt_us" in meta:
        dt = float(meta["dt_us"])
    elif "t_us" in cols and cols["t_us"].size > 1:
        step = np.diff(cols["t_us"])
        if np.ptp(step) > 1e-6 * abs(np.mean(step)):
            raise DataError(f"{path}: non-uniform timestamps")
        dt = float(np.mean(step))
    else:
        raise DataError(f"{path}: no dt_us header and no t_us column")
    return IQTrace(cols["I"] + 1j * cols["Q"], dt, {k: v for k, v in meta.items() if k != "dt_us"})


def write_psd_csv(path, psd, meta=None):
    return write_csv(path, ["f_hz", "s_hz2_per_hz"], [psd.frequencies, psd.power], meta)


def write_series_csv(path, t, series, time_col="t_s", prefix="trace", meta=None):
    """Time column plus one column per trace (traces along the first axis)."""
    series = np.atleast_2d(series)
    header = [time_col] + [f"{prefix}_{k}" for k in range(series.shape[0])]
    return write_csv(path, header, [t] + list(series), meta)


def read_series_csv(path, time_col="t_s"):
    """Returns ``(t, series)`` with traces along the first axis."""
    meta, cols = read_columns_csv(path, [time_col])
    names = [k for k in cols if k != time_col]
    if not names:
        raise DataError(f"{path}: no data columns besides {time_col}")
    return cols[time_col], np.array([cols[k] for k in names]), meta
