"""Echo-dephasing budget: flux noise, photon shot noise and a residual term.

Rates are in 1/µs, flux-noise amplitudes in µΦ0, spectrum slopes in GHz per
flux quantum, and kappa / chi in MHz (divided by 2 pi).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .exceptions import DataError, ParameterError
from .hamiltonian import SINUSOIDAL, SpectrumModel

__all__ = [
    "ECHO_PREFACTOR",
    "FluxNoiseFit",
    "DecoherenceBudget",
    "spectrum_slope",
    "flux_noise_rate",
    "flux_noise_amplitude",
    "shot_noise_dephasing",
    "implied_photon_number",
    "budget_report",
]

ECHO_PREFACTOR = math.sqrt(math.log(2))

_TIME_UNITS = {"us": 1.0, "ns": 1e-3, "ms": 1e3, "s": 1e6}


def spectrum_slope(params, phi_values, cphir=SINUSOIDAL):
    """|d f_ge / d phi_ext| in GHz per flux quantum (Hellmann-Feynman)."""
    model = SpectrumModel.for_params(params, cphir, n_levels=2)
    return np.abs(model.flux_slope(params, phi_values, upper=1))


def flux_noise_rate(a_phi, slope, prefactor=ECHO_PREFACTOR):
    """Echo dephasing 2 pi A |df/dPhi| * prefactor in 1/µs (A in µΦ0)."""
    # A [Phi0] * slope [GHz/Phi0] * 1e3 -> MHz
    return 2 * math.pi * a_phi * 1e-6 * np.abs(slope) * 1e3 * prefactor


@dataclass
class FluxNoiseFit:
    """Linear fit Γ2 - Γ1/2 = 2π A |df/dΦ| c + Γ_0 (c the echo prefactor)."""

    a_phi: float
    a_phi_err: float
    intercept: float
    intercept_err: float
    prefactor: float
    negative_slope: bool
    n_points: int

    def to_dict(self):
        return asdict(self)


def _near_half(phi):
    frac = np.mod(np.asarray(phi, dtype=float), 1.0)
    return frac


def flux_noise_amplitude(phi_ext, t2_echo, t1_mean, slope, prefactor=ECHO_PREFACTOR, time_unit="us"):
    """Flux-noise amplitude from echo times measured around half flux.

    Parameters
    ----------
    phi_ext : array_like
        Bias points; together they must bracket half flux.
    t2_echo : array_like
        Echo decay times, in ``time_unit``.
    t1_mean : float
        Mean energy-relaxation time, in ``time_unit``.
    slope : array_like
        |d f_ge / d phi_ext| at each bias point, GHz per flux quantum.
    prefactor : float
        Echo factor of the 1/f noise model; sqrt(ln 2) by default.
    """
    phi = np.asarray(phi_ext, dtype=float)
    t2 = np.asarray(t2_echo, dtype=float) * _TIME_UNITS[time_unit]
    slope = np.abs(np.asarray(slope, dtype=float))
    t1 = float(t1_mean) * _TIME_UNITS[time_unit]
    if not (phi.size == t2.size == slope.size):
        raise DataError("phi_ext, t2_echo and slope must have equal length")
    if phi.size < 4:
        raise DataError(f"{phi.size} flux points; need at least 4")
    if np.any(t2 <= 0) or t1 <= 0:
        raise DataError("coherence times must be positive")
    frac = _near_half(phi)
    if not (np.any(frac <= 0.5) and np.any(frac >= 0.5)):
        raise DataError("bias points must bracket half flux")
    if prefactor <= 0:
        raise ParameterError("prefactor must be positive", "prefactor")
    y = 1.0 / t2 - 0.5 / t1
    x = 2 * math.pi * slope * 1e3 * prefactor
    if np.ptp(x) == 0:
        raise DataError("slopes do not vary; amplitude unidentifiable")
    fit = stats.linregress(x, y)
    return FluxNoiseFit(
        a_phi=float(fit.slope * 1e6),
        a_phi_err=float(fit.stderr * 1e6),
        intercept=float(fit.intercept),
        intercept_err=float(fit.intercept_stderr),
        prefactor=float(prefactor),
        negative_slope=bool(fit.slope < 0),
        n_points=int(phi.size),
    )


def shot_noise_dephasing(res, chi):
    """Photon shot-noise dephasing n κ χ² / (κ² + χ²) in 1/µs.

    ``res.kappa`` and ``chi`` are in MHz (ordinary frequency); both are
    converted to angular units before evaluation.
    """
    kappa = 2 * math.pi * res.kappa
    chi_w = 2 * math.pi * float(chi)
    if not (math.isfinite(kappa) and math.isfinite(chi_w)):
        raise ParameterError("kappa and chi must be finite", "chi")
    return res.n_photon * kappa * chi_w**2 / (kappa**2 + chi_w**2)


def implied_photon_number(rate, kappa, chi):
    """Mean photon number for which shot noise alone gives ``rate`` (1/µs)."""
    k = 2 * math.pi * kappa
    c = 2 * math.pi * chi
    per_photon = k * c**2 / (k**2 + c**2)
    if per_photon == 0:
        return math.inf
    return rate / per_photon


@dataclass
class DecoherenceBudget:
    """Itemized echo dephasing per bias point.

    ``gamma2_model`` = gamma1_over_2 + gamma_flux + gamma_shot +
    gamma_ic_residual.  The residual soaks up whatever the named terms do
    not explain; where they overshoot the measurement by more than the
    tolerance ``inconsistent`` is set and the residual is clipped at zero.
    """

    phi_ext: list
    gamma2_measured: list
    gamma1_over_2: float
    gamma_flux: list
    gamma_shot: float
    gamma_ic_residual: list
    a_phi: float
    inconsistent: bool
    hypotheses: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    @property
    def gamma2_model(self):
        return [
            self.gamma1_over_2 + gf + self.gamma_shot + gr for gf, gr in zip(self.gamma_flux, self.gamma_ic_residual)
        ]

    def to_dict(self):
        out = asdict(self)
        out["gamma2_model"] = self.gamma2_model
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data.pop("gamma2_model", None)
        return cls(**data)


def budget_report(
    phi_ext,
    gamma2_echo,
    t1,
    slope=None,
    a_phi=0.0,
    resonator=None,
    chi=0.0,
    prefactor=ECHO_PREFACTOR,
    tol=1e-3,
    sources=None,
):
    """Assemble the dephasing budget.

    Parameters
    ----------
    phi_ext, gamma2_echo : array_like
        Bias points and measured echo rates (1/µs).
    t1 : float
        Energy relaxation time (µs).
    slope : array_like, optional
        |d f_ge / d phi_ext| per point (GHz/Φ0); zero when omitted.
    a_phi : float
        Flux-noise amplitude in µΦ0.
    resonator : ResonatorParams, optional
        Supplies kappa and n_photon for the shot-noise term.
    chi : float
        Dispersive shift in MHz.
    tol : float
        Allowed overshoot (1/µs) of the named terms above the measurement.
    sources : dict, optional
        Free-form provenance of each input, copied into the report.
    """
    phi = np.atleast_1d(np.asarray(phi_ext, dtype=float))
    g2 = np.atleast_1d(np.asarray(gamma2_echo, dtype=float))
    if phi.size != g2.size or phi.size == 0:
        raise DataError("phi_ext and gamma2_echo must be non-empty and of equal length")
    if t1 <= 0 or np.any(g2 < 0):
        raise DataError("t1 must be positive and rates non-negative")
    s = np.zeros_like(phi) if slope is None else np.abs(np.asarray(slope, dtype=float))
    g1h = 0.5 / float(t1)
    gf = flux_noise_rate(a_phi, s, prefactor) if a_phi else np.zeros_like(phi)
    gs = shot_noise_dephasing(resonator, chi) if resonator is not None else 0.0
    raw = g2 - g1h - gf - gs
    inconsistent = bool(np.any(raw < -tol))
    resid = np.clip(raw, 0.0, None)

    # the sweet-spot residual read as pure shot noise or as higher-order flux noise
    k = int(np.argmin(s)) if s.size else 0
    hypotheses = {"sweet_spot_phi": float(phi[k]), "sweet_spot_residual": float(raw[k] + gs)}
    if resonator is not None and chi != 0:
        hypotheses["shot_noise_n_photon"] = float(implied_photon_number(raw[k] + gs, resonator.kappa, chi))
    hypotheses["higher_order_flux_rate"] = float(raw[k] + gs)

    return DecoherenceBudget(
        phi_ext=phi.tolist(),
        gamma2_measured=g2.tolist(),
        gamma1_over_2=g1h,
        gamma_flux=np.asarray(gf, dtype=float).tolist(),
        gamma_shot=float(gs),
        gamma_ic_residual=resid.tolist(),
        a_phi=float(a_phi),
        inconsistent=inconsistent,
        hypotheses=hypotheses,
        inputs={
            "t1_us": float(t1),
            "chi_mhz": float(chi),
            "kappa_mhz": None if resonator is None else resonator.kappa,
            "n_photon": None if resonator is None else resonator.n_photon,
            "prefactor": float(prefactor),
            "tolerance": float(tol),
            "sources": dict(sources or {}),
        },
    )
