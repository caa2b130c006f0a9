"""Circuit and resonator parameter containers with unit conversions.

Energies are stored as frequencies in GHz (E/h), times in microseconds and
external flux in units of the flux quantum.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

from . import constants as const
from .exceptions import ParameterError

__all__ = [
    "CircuitParams",
    "CapacitanceDecomposition",
    "ResonatorParams",
    "charging_energy_from_capacitance",
    "capacitance_from_charging_energy",
    "inductive_energy_from_inductance",
    "inductance_from_inductive_energy",
    "validate",
    "load_param_file",
    "params_from_dict",
    "params_to_dict",
]


def charging_energy_from_capacitance(c):
    """Charging energy e^2/(2C) in GHz for a capacitance in fF."""
    if not c > 0 or not math.isfinite(c):
        raise ParameterError(f"capacitance must be positive and finite, got {c!r} fF", "c")
    joules = const.ELEMENTARY_CHARGE**2 / (2 * c * const.FEMTO)
    return joules / const.PLANCK / const.GHZ


def capacitance_from_charging_energy(e_c):
    """Inverse of :func:`charging_energy_from_capacitance` (GHz -> fF)."""
    if not e_c > 0 or not math.isfinite(e_c):
        raise ParameterError(f"charging energy must be positive, got {e_c!r} GHz", "e_c_sigma")
    return const.ELEMENTARY_CHARGE**2 / (2 * e_c * const.GHZ * const.PLANCK) / const.FEMTO


def inductive_energy_from_inductance(l):
    """Inductive energy (Phi0/2pi)^2 / L in GHz for an inductance in nH."""
    if not l > 0 or not math.isfinite(l):
        raise ParameterError(f"inductance must be positive and finite, got {l!r} nH", "l")
    joules = const.REDUCED_FLUX_QUANTUM**2 / (l * const.NANO)
    return joules / const.PLANCK / const.GHZ


def inductance_from_inductive_energy(e_l):
    """Inverse of :func:`inductive_energy_from_inductance` (GHz -> nH)."""
    if not e_l > 0 or not math.isfinite(e_l):
        raise ParameterError(f"inductive energy must be positive, got {e_l!r} GHz", "e_l")
    return const.REDUCED_FLUX_QUANTUM**2 / (e_l * const.GHZ * const.PLANCK) / const.NANO


@dataclass(frozen=True)
class CircuitParams:
    """Fluxonium circuit parameters.

    Parameters
    ----------
    e_j : float
        Josephson energy E_J/h in GHz.
    e_c_sigma : float
        Total charging energy E_C/h in GHz, convention e^2/(2 C_sigma).
    e_l : float
        Inductive energy E_L/h in GHz.
    phi_ext : float
        External flux in units of the flux quantum.
    """

    e_j: float
    e_c_sigma: float
    e_l: float
    phi_ext: float = 0.0

    @classmethod
    def from_circuit(cls, e_j, c_sigma_ff, l_q_nh, phi_ext=0.0):
        """Build from E_J (GHz), total capacitance (fF) and inductance (nH)."""
        return cls(
            e_j=e_j,
            e_c_sigma=charging_energy_from_capacitance(c_sigma_ff),
            e_l=inductive_energy_from_inductance(l_q_nh),
            phi_ext=phi_ext,
        )

    @property
    def c_sigma_ff(self):
        return capacitance_from_charging_energy(self.e_c_sigma)

    @property
    def l_q_nh(self):
        return inductance_from_inductive_energy(self.e_l)

    @property
    def plasma_frequency(self):
        """sqrt(8 E_C E_L), the level spacing of the bare L-C oscillator (GHz)."""
        return math.sqrt(8 * self.e_c_sigma * self.e_l)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def validate(params):
    """Check a :class:`CircuitParams` and return it unchanged.

    Every violated invariant is collected; the raised :class:`ParameterError`
    names the first offending field in ``field`` and all of them in the
    message.
    """
    problems = []
    for name in ("e_j", "e_c_sigma", "e_l"):
        value = getattr(params, name)
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            problems.append((name, f"{name} must be a finite number, got {value!r}"))
        elif value <= 0:
            problems.append((name, f"{name} must be > 0, got {value!r}"))
    if not isinstance(params.phi_ext, (int, float)) or not math.isfinite(params.phi_ext):
        problems.append(("phi_ext", f"phi_ext must be finite, got {params.phi_ext!r}"))
    if problems:
        raise ParameterError("; ".join(msg for _, msg in problems), problems[0][0])
    return params


@dataclass(frozen=True)
class CapacitanceDecomposition:
    """Total capacitance split into coplanar shunt and junction parts (fF)."""

    c_q: float
    c_j: float

    def __post_init__(self):
        for name in ("c_q", "c_j"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ParameterError(f"{name} must be >= 0, got {value!r}", name)

    @property
    def c_sigma(self):
        return self.c_q + self.c_j

    @classmethod
    def from_total(cls, c_sigma, c_q):
        """Split ``c_sigma`` given the shunt part, so that c_q + c_j == c_sigma exactly."""
        if c_q > c_sigma:
            raise ParameterError(f"c_q={c_q} exceeds c_sigma={c_sigma}", "c_q")
        c_j = c_sigma - c_q
        # rounding in the subtraction can leave the sum one ulp off
        for _ in range(8):
            total = c_q + c_j
            if total == c_sigma:
                return cls(c_q=c_q, c_j=c_j)
            c_j = math.nextafter(c_j, math.inf if total < c_sigma else -math.inf)
        raise ParameterError(f"cannot split {c_sigma!r} fF exactly around c_q={c_q!r}", "c_j")

    @property
    def e_c_sigma(self):
        return charging_energy_from_capacitance(self.c_sigma)


@dataclass(frozen=True)
class ResonatorParams:
    """Readout resonator parameters.

    f_r in GHz, kappa (kappa/2pi) in MHz, g in GHz, n_photon dimensionless.
    """

    f_r: float
    kappa: float
    g: float = 0.0
    n_photon: float = 0.0

    def __post_init__(self):
        checks = (
            ("f_r", self.f_r > 0),
            ("kappa", self.kappa > 0),
            ("g", self.g >= 0),
            ("n_photon", self.n_photon >= 0),
        )
        for name, ok in checks:
            if not ok or not math.isfinite(getattr(self, name)):
                raise ParameterError(f"invalid {name}={getattr(self, name)!r}", name)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# -- JSON parameter files -------------------------------------------------

_CIRCUIT_KEYS = {"e_j_ghz", "e_c_ghz", "c_sigma_ff", "e_l_ghz", "l_q_nh", "phi_ext"}
_RESONATOR_KEYS = {"f_r_ghz", "kappa_mhz", "g_ghz", "n_photon"}
_OTHER_KEYS = {"cphir_harmonics"}


def params_from_dict(data):
    """Parse a unit-suffixed parameter mapping.

    Returns ``(circuit, resonator, harmonics)`` where ``resonator`` and
    ``harmonics`` may be None.  Unknown keys are rejected.
    """
    unknown = set(data) - _CIRCUIT_KEYS - _RESONATOR_KEYS - _OTHER_KEYS
    if unknown:
        raise ParameterError(f"unknown parameter keys: {sorted(unknown)}", sorted(unknown)[0])
    if ("e_c_ghz" in data) == ("c_sigma_ff" in data):
        raise ParameterError("give exactly one of e_c_ghz / c_sigma_ff", "e_c_ghz")
    if ("e_l_ghz" in data) == ("l_q_nh" in data):
        raise ParameterError("give exactly one of e_l_ghz / l_q_nh", "e_l_ghz")
    if "e_j_ghz" not in data:
        raise ParameterError("missing e_j_ghz", "e_j_ghz")

    e_c = data["e_c_ghz"] if "e_c_ghz" in data else charging_energy_from_capacitance(data["c_sigma_ff"])
    e_l = data["e_l_ghz"] if "e_l_ghz" in data else inductive_energy_from_inductance(data["l_q_nh"])
    circuit = validate(
        CircuitParams(
            e_j=float(data["e_j_ghz"]),
            e_c_sigma=float(e_c),
            e_l=float(e_l),
            phi_ext=float(data.get("phi_ext", 0.0)),
        )
    )

    resonator = None
    present = _RESONATOR_KEYS & set(data)
    if present:
        missing = {"f_r_ghz", "kappa_mhz"} - present
        if missing:
            raise ParameterError(f"resonator block missing {sorted(missing)}", sorted(missing)[0])
        resonator = ResonatorParams(
            f_r=float(data["f_r_ghz"]),
            kappa=float(data["kappa_mhz"]),
            g=float(data.get("g_ghz", 0.0)),
            n_photon=float(data.get("n_photon", 0.0)),
        )
    harmonics = data.get("cphir_harmonics")
    return circuit, resonator, harmonics


def params_to_dict(circuit, resonator=None, harmonics=None):
    out = {
        "e_j_ghz": circuit.e_j,
        "e_c_ghz": circuit.e_c_sigma,
        "e_l_ghz": circuit.e_l,
        "phi_ext": circuit.phi_ext,
    }
    if resonator is not None:
        out.update(
            f_r_ghz=resonator.f_r,
            kappa_mhz=resonator.kappa,
            g_ghz=resonator.g,
            n_photon=resonator.n_photon,
        )
    if harmonics is not None:
        out["cphir_harmonics"] = list(harmonics)
    return out


def load_param_file(path):
    """Read a JSON parameter file; see :func:`params_from_dict`."""
    with open(Path(path)) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ParameterError(f"{path}: top level must be an object")
    return params_from_dict(data)
