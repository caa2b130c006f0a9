"""Qubit-resonator coupled spectra, dispersive shift and reflection response."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .exceptions import ParameterError, TruncationError
from .hamiltonian import SINUSOIDAL, BasisSpec, CphiRModel, build_hamiltonian, converged_dim, diagonalize
from .params import CircuitParams, ResonatorParams, validate

__all__ = [
    "CoupledSpec",
    "DressedSpectrum",
    "DispersiveShift",
    "ReflectionModel",
    "qubit_eigensystem",
    "coupled_hamiltonian",
    "coupled_spectrum",
    "check_truncation",
    "dispersive_shift",
    "perturbative_chi",
    "vacuum_rabi_gap",
    "reflection_coefficient",
    "reflection_phase",
]


@dataclass(frozen=True)
class CoupledSpec:
    """Fluxonium coupled to a single resonator mode.

    The coupling is ``g * op (x) (a + a^dag)`` with ``op`` the qubit charge
    ``n`` (default) or phase deviation ``phi - 2 pi phi_ext``
    (``coupling="phase"``); g is in GHz.
    """

    qubit: CircuitParams
    resonator: ResonatorParams
    cphir: CphiRModel = SINUSOIDAL
    n_fock: int = 12
    n_qubit_levels: int = 20
    coupling: str = "charge"

    def __post_init__(self):
        if self.n_fock < 5:
            raise ParameterError("n_fock must be >= 5", "n_fock")
        if self.n_qubit_levels < 4:
            raise ParameterError("n_qubit_levels must be >= 4", "n_qubit_levels")
        if self.coupling not in ("charge", "phase"):
            raise ParameterError(f"unknown coupling {self.coupling!r}", "coupling")

    def with_flux(self, phi_ext):
        return CoupledSpec(
            self.qubit.replace(phi_ext=float(phi_ext)),
            self.resonator,
            self.cphir,
            self.n_fock,
            self.n_qubit_levels,
            self.coupling,
        )

    def enlarged(self, factor=1.5):
        return CoupledSpec(
            self.qubit,
            self.resonator,
            self.cphir,
            int(math.ceil(self.n_fock * factor)),
            int(math.ceil(self.n_qubit_levels * factor)),
            self.coupling,
        )


def qubit_eigensystem(params, cphir=SINUSOIDAL, n_levels=8, coupling="charge", dim=None):
    """Bare qubit energies and the coupling operator in the qubit eigenbasis."""
    validate(params)
    if dim is None:
        dim = max(converged_dim(params, cphir, n_levels, tol=1e-8), 4 * n_levels)
    sol = diagonalize(build_hamiltonian(params, cphir, BasisSpec.oscillator(dim)), n_levels)
    if coupling == "charge":
        op = sol.hamiltonian.operator("n")
    else:
        op = sol.hamiltonian.operator("phi") - 2 * math.pi * params.phi_ext * np.eye(dim)
    mat = sol.vectors.conj().T @ op @ sol.vectors
    return sol.energies, 0.5 * (mat + mat.conj().T)


def coupled_hamiltonian(spec, qubit_dim=None):
    """Dense coupled Hamiltonian on (qubit level) x (Fock state), qubit-major."""
    energies, op = qubit_eigensystem(spec.qubit, spec.cphir, spec.n_qubit_levels, spec.coupling, qubit_dim)
    nf = spec.n_fock
    a = np.diag(np.sqrt(np.arange(1, nf, dtype=float)), k=1)
    h = np.kron(np.diag(energies - energies[0]), np.eye(nf))
    h = h + np.kron(np.eye(len(energies)), spec.resonator.f_r * np.diag(np.arange(nf, dtype=float)))
    h = h + spec.resonator.g * np.kron(op, a + a.T)
    return h, energies - energies[0]


@dataclass
class DressedSpectrum:
    """Dressed energies (GHz) relative to the dressed ground state, per flux."""

    phi_ext: np.ndarray
    energies: np.ndarray

    @property
    def transitions(self):
        return self.energies[:, 1:]


def _dressed(spec, n_report, qubit_dim=None):
    h, _ = coupled_hamiltonian(spec, qubit_dim)
    vals = sla.eigh(h, eigvals_only=True, subset_by_index=[0, n_report - 1])
    return vals - vals[0]


def check_truncation(spec, n_report=6, tol=1e-6):
    """Raise :class:`TruncationError` unless a 50 % larger truncation moves
    the lowest ``n_report`` dressed energies by less than ``tol`` GHz."""
    base = _dressed(spec, n_report)
    big = _dressed(spec.enlarged(), n_report)
    delta = float(np.max(np.abs(big - base)))
    if delta >= tol:
        raise TruncationError(
            f"dressed levels move by {delta:.2e} GHz when n_fock/n_qubit_levels grow by 50%"
        )
    return delta


def coupled_spectrum(spec, phi_sweep, n_report=6, check=True):
    """Dressed levels across a flux sweep.

    With ``check=True`` the truncation is verified at the first and last
    flux point.
    """
    phi_sweep = np.atleast_1d(np.asarray(phi_sweep, dtype=float))
    if phi_sweep.size == 0:
        raise ValueError("empty flux grid")
    if check:
        for phi in {float(phi_sweep[0]), float(phi_sweep[-1])}:
            check_truncation(spec.with_flux(phi), n_report)
    rows = [_dressed(spec.with_flux(phi), n_report) for phi in phi_sweep]
    return DressedSpectrum(phi_sweep, np.array(rows))


def _dressed_index(vectors, bare_index):
    return int(np.argmax(np.abs(vectors[bare_index, :]) ** 2))


@dataclass
class DispersiveShift:
    """chi (MHz) from dressed energies, with the near-resonance flag."""

    chi: float
    detuning: float  # f_ge - f_r, GHz
    g_eff: float  # g |<g|op|e>|, GHz
    near_resonant: bool
    dressed: dict = field(default_factory=dict)


def dispersive_shift(spec):
    """chi = [E(e,1) - E(e,0)] - [E(g,1) - E(g,0)], returned in MHz.

    Dressed states are identified by maximum overlap with the bare product
    states.  ``near_resonant`` is set when |f_ge - f_r| < 3 g_eff with
    g_eff = g |<g|op|e>|.
    """
    h, bare = coupled_hamiltonian(spec)
    vals, vecs = sla.eigh(h)
    nf = spec.n_fock
    labels = {"g0": 0, "g1": 1, "e0": nf, "e1": nf + 1}
    energy = {k: float(vals[_dressed_index(vecs, idx)]) for k, idx in labels.items()}
    chi_ghz = (energy["e1"] - energy["e0"]) - (energy["g1"] - energy["g0"])
    _, op = qubit_eigensystem(spec.qubit, spec.cphir, spec.n_qubit_levels, spec.coupling)
    g_eff = spec.resonator.g * abs(op[0, 1])
    detuning = float(bare[1] - spec.resonator.f_r)
    return DispersiveShift(
        chi=chi_ghz * 1e3,
        detuning=detuning,
        g_eff=g_eff,
        near_resonant=abs(detuning) < 3 * g_eff,
        dressed=energy,
    )


def perturbative_chi(spec):
    """Second-order perturbative chi (MHz), summed over all qubit levels.

    Level k with N photons shifts by
    sum_l g^2 |op_kl|^2 [N/(E_k - E_l + f_r) + (N+1)/(E_k - E_l - f_r)].
    """
    energies, op = qubit_eigensystem(spec.qubit, spec.cphir, spec.n_qubit_levels, spec.coupling)
    g2 = spec.resonator.g**2
    f_r = spec.resonator.f_r

    def photon_pull(k):
        # shift(k, 1) - shift(k, 0)
        total = 0.0
        for l in range(len(energies)):
            if l == k:
                continue
            d = energies[k] - energies[l]
            w = g2 * abs(op[k, l]) ** 2
            total += w * (1.0 / (d + f_r) + 1.0 / (d - f_r))
        return total

    return (photon_pull(1) - photon_pull(0)) * 1e3


def vacuum_rabi_gap(spec, phi_window, n_points=41):
    """Minimum splitting (GHz) between the first two excited dressed levels
    over a flux window, and the flux where it occurs."""
    lo, hi = phi_window
    best = (math.inf, None)
    for _ in range(3):
        phis = np.linspace(lo, hi, n_points)
        gaps = []
        for p in phis:
            levels = _dressed(spec.with_flux(p), 3)
            gaps.append((levels[2] - levels[1], p))
        gap, at = min(gaps)
        if gap < best[0]:
            best = (gap, at)
        step = (hi - lo) / (n_points - 1)
        lo, hi = at - step, at + step
    return best


# -- single-port reflection ---------------------------------------------


@dataclass(frozen=True)
class ReflectionModel:
    """Dispersively shifted single-port resonator.

    f0 in GHz (midpoint of the two dressed resonances), kappa and chi in MHz
    (kappa/2pi, chi/2pi), ``coupling_ratio`` = kappa_ext / kappa.
    """

    f0: float
    kappa: float
    chi: float
    coupling_ratio: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ParameterError("kappa must be > 0", "kappa")
        if not 0 < self.coupling_ratio <= 1:
            raise ParameterError("coupling_ratio must lie in (0, 1]", "coupling_ratio")

    @property
    def readout_resolved(self):
        """True in the |chi| > kappa regime."""
        return abs(self.chi) > self.kappa

    def resonance(self, qubit_state):
        """Dressed resonance in GHz: g at f0 - chi/2, e at f0 + chi/2."""
        if qubit_state not in ("g", "e"):
            raise ValueError(f"qubit_state must be 'g' or 'e', got {qubit_state!r}")
        sign = -1.0 if qubit_state == "g" else 1.0
        return self.f0 + sign * self.chi * 1e-3 / 2


def reflection_coefficient(model, f_probe, qubit_state):
    """S11(f) = 1 - kappa_ext / (i (f - f_res) + kappa/2), detuning in MHz."""
    f = np.asarray(f_probe, dtype=float)
    delta = (f - model.resonance(qubit_state)) * 1e3
    return 1.0 - model.coupling_ratio * model.kappa / (1j * delta + model.kappa / 2)


def reflection_phase(model, f_probe, qubit_state):
    return np.angle(reflection_coefficient(model, f_probe, qubit_state))
