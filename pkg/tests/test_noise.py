import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxspec.exceptions import DataError
from fluxspec.noise import (
    ECHO_PREFACTOR,
    DecoherenceBudget,
    budget_report,
    flux_noise_amplitude,
    flux_noise_rate,
    implied_photon_number,
    shot_noise_dephasing,
    spectrum_slope,
)
from fluxspec.params import ResonatorParams

from conftest import DEVICE

T1 = 14.0
PHI = np.linspace(0.46, 0.54, 9)


@pytest.fixture(scope="module")
def slope():
    return spectrum_slope(DEVICE.replace(phi_ext=0.5), PHI)


def synthetic_t2(slope, a_phi=30.0, residual=0.02):
    gamma = 0.5 / T1 + flux_noise_rate(a_phi, slope) + residual
    return 1.0 / gamma


def test_slope_vanishes_at_half_flux(slope):
    assert slope[4] < 1e-6
    np.testing.assert_allclose(slope, slope[::-1], rtol=1e-6, atol=1e-9)


def test_flux_noise_round_trip(slope):
    fit = flux_noise_amplitude(PHI, synthetic_t2(slope), T1, slope)
    assert fit.a_phi == pytest.approx(30.0, rel=1e-9)
    assert fit.intercept == pytest.approx(0.02, abs=1e-12)
    assert not fit.negative_slope


def test_flux_noise_with_noise_within_15_percent(slope):
    rng = np.random.default_rng(5)
    t2 = synthetic_t2(slope) * (1 + 0.03 * rng.standard_normal(PHI.size))
    assert flux_noise_amplitude(PHI, t2, T1, slope).a_phi == pytest.approx(30.0, rel=0.15)


def test_zero_flux_noise_consistent_with_zero(slope):
    rng = np.random.default_rng(6)
    t2 = synthetic_t2(slope, a_phi=0.0) * (1 + 0.01 * rng.standard_normal(PHI.size))
    fit = flux_noise_amplitude(PHI, t2, T1, slope)
    assert abs(fit.a_phi) < 3 * fit.a_phi_err


def test_doubling_slope_halves_amplitude(slope):
    t2 = synthetic_t2(slope)
    a = flux_noise_amplitude(PHI, t2, T1, slope).a_phi
    b = flux_noise_amplitude(PHI, t2, T1, 2 * slope).a_phi
    assert b == pytest.approx(a / 2, rel=1e-12)


def test_order_and_time_unit_invariance(slope):
    t2 = synthetic_t2(slope)
    a = flux_noise_amplitude(PHI, t2, T1, slope)
    perm = np.random.default_rng(0).permutation(PHI.size)
    b = flux_noise_amplitude(PHI[perm], t2[perm], T1, slope[perm])
    c = flux_noise_amplitude(PHI, t2 * 1e3, T1 * 1e3, slope, time_unit="ns")
    assert b.a_phi == pytest.approx(a.a_phi, rel=1e-12)
    assert c.a_phi == pytest.approx(a.a_phi, rel=1e-12)
    assert c.intercept == pytest.approx(a.intercept, rel=1e-9)


def test_negative_slope_flagged(slope):
    # dephasing that falls as the slope grows
    t2 = 1.0 / (0.5 / T1 + 0.01 + 0.2 * (1 - slope / slope.max()))
    assert flux_noise_amplitude(PHI, t2, T1, slope).negative_slope


def test_flux_noise_input_errors(slope):
    with pytest.raises(DataError):
        flux_noise_amplitude(PHI[:3], np.ones(3), T1, slope[:3])
    with pytest.raises(DataError):
        flux_noise_amplitude(PHI[:4], np.ones(4), T1, slope[:4])
    with pytest.raises(DataError):
        flux_noise_amplitude(PHI[5:] + 0.1, np.ones(4), T1, slope[5:])


# -- shot noise ----------------------------------------------------------------


def test_shot_noise_zero_photons():
    assert shot_noise_dephasing(ResonatorParams(7.4, 1.0, n_photon=0.0), -1.72) == 0.0


def test_shot_noise_formula():
    res = ResonatorParams(7.4, 1.0, n_photon=0.01)
    k, c = 2 * math.pi, 2 * math.pi * 1.72
    assert shot_noise_dephasing(res, -1.72) == pytest.approx(0.01 * k * c**2 / (k**2 + c**2), rel=1e-14)


def test_shot_noise_saturates_at_large_chi():
    res = ResonatorParams(7.4, 1.0, n_photon=0.5)
    assert shot_noise_dephasing(res, 1e7) == pytest.approx(0.5 * 2 * math.pi, rel=1e-9)


@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.floats(0.01, 20.0), st.floats(0.01, 20.0))
def test_shot_noise_monotone(n1, n2, c1, c2):
    lo_n, hi_n = sorted((n1, n2))
    lo_c, hi_c = sorted((c1, c2))
    r = lambda n: ResonatorParams(7.4, 1.0, n_photon=n)  # noqa: E731
    assert shot_noise_dephasing(r(lo_n), 1.0) <= shot_noise_dephasing(r(hi_n), 1.0)
    assert shot_noise_dephasing(r(1.0), -lo_c) <= shot_noise_dephasing(r(1.0), -hi_c) + 1e-15


def test_implied_photon_number_inverts_rate():
    res = ResonatorParams(7.4, 1.0, n_photon=0.0123)
    rate = shot_noise_dephasing(res, -1.72)
    assert implied_photon_number(rate, 1.0, -1.72) == pytest.approx(0.0123, rel=1e-12)
    assert implied_photon_number(rate, 1.0, 0.0) == math.inf


# -- budget ---------------------------------------------------------------------


def test_budget_all_noise_off():
    b = budget_report([0.5], [0.5 / T1], T1)
    assert b.gamma2_model == pytest.approx([0.5 / T1])
    assert b.gamma_ic_residual == [0.0]
    assert not b.inconsistent


def test_budget_sweet_spot_residual_equals_half_gamma1():
    b = budget_report([0.5], [2 * 0.5 / T1], T1)
    assert b.gamma_ic_residual[0] == pytest.approx(0.5 / T1, rel=1e-12)


def test_budget_known_components_round_trip(slope):
    res = ResonatorParams(7.4, 1.0, n_photon=0.002)
    shot = shot_noise_dephasing(res, -1.72)
    flux = flux_noise_rate(30.0, slope)
    ic = np.linspace(0.001, 0.009, PHI.size)
    g2 = 0.5 / T1 + flux + shot + ic
    b = budget_report(PHI, g2, T1, slope=slope, a_phi=30.0, resonator=res, chi=-1.72)
    np.testing.assert_allclose(b.gamma_ic_residual, ic, atol=1e-14)
    np.testing.assert_allclose(b.gamma2_model, g2, rtol=1e-14)
    assert all(x >= 0 for x in b.gamma_flux + b.gamma_ic_residual)
    again = DecoherenceBudget.from_dict(b.to_dict())
    assert again == b
    assert "shot_noise_n_photon" in b.hypotheses and "higher_order_flux_rate" in b.hypotheses


def test_budget_inconsistency_flag(slope):
    b = budget_report(PHI, np.full(PHI.size, 0.01), T1, slope=slope, a_phi=30.0)
    assert b.inconsistent
    assert min(b.gamma_ic_residual) == 0.0


def test_budget_input_errors():
    with pytest.raises(DataError):
        budget_report([], [], T1)
    with pytest.raises(DataError):
        budget_report([0.5], [0.1], -1.0)


def test_default_prefactor():
    assert ECHO_PREFACTOR == pytest.approx(math.sqrt(math.log(2)))
    assert flux_noise_rate(1.0, 1.0, prefactor=1.0) == pytest.approx(2 * math.pi * 1e-3)
