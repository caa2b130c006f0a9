import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from fluxspec.coupled import (
    CoupledSpec,
    ReflectionModel,
    check_truncation,
    coupled_spectrum,
    dispersive_shift,
    perturbative_chi,
    qubit_eigensystem,
    reflection_coefficient,
    reflection_phase,
    vacuum_rabi_gap,
)
from fluxspec.exceptions import ParameterError
from fluxspec.hamiltonian import solve, transition_table
from fluxspec.params import ResonatorParams

from conftest import DEVICE

F_R = 7.4


def spec(g, phi_ext=0.5, **kw):
    return CoupledSpec(DEVICE.replace(phi_ext=phi_ext), ResonatorParams(F_R, 1.0, g), **kw)


def test_spec_invariants():
    with pytest.raises(ParameterError):
        spec(0.1, n_fock=4)
    with pytest.raises(ParameterError):
        spec(0.1, n_qubit_levels=3)
    with pytest.raises(ParameterError):
        spec(0.1, coupling="flux")


def test_uncoupled_levels_are_sums_of_bare_levels():
    s = spec(0.0, phi_ext=0.3)
    bare = solve(s.qubit, n_levels=4).transitions
    dressed = coupled_spectrum(s, [0.3], n_report=8).energies[0]
    sums = np.sort(np.add.outer(bare, F_R * np.arange(4)).ravel())[:8]
    np.testing.assert_allclose(dressed, sums, atol=1e-9)


def test_truncation_converged_at_defaults():
    assert check_truncation(spec(0.34)) < 1e-6


def test_dressed_spectrum_flux_symmetry():
    s = spec(0.2, phi_ext=0.0)
    a = coupled_spectrum(s, [0.13, 0.31], check=False).energies
    b = coupled_spectrum(s, [-0.13, -0.31], check=False).energies
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_far_detuned_transitions_follow_perturbation_theory():
    g = 0.05
    s = spec(g, phi_ext=0.5)
    levels = coupled_spectrum(s, [0.5], n_report=3, check=False).energies[0]
    f_ge = solve(s.qubit, n_levels=2).transitions[1]
    _, op = qubit_eigensystem(s.qubit)
    bound = 2 * (g * abs(op[0, 1])) ** 2 / abs(f_ge - F_R) + 1e-9
    assert abs(levels[1] - f_ge) < bound
    assert abs(levels[2] - F_R) < bound


def test_avoided_crossing_sits_where_qubit_meets_resonator():
    phis = np.linspace(0.15, 0.26, 221)
    f_ge = transition_table(DEVICE, phis, n_levels=2)[:, 0]
    crossing = phis[np.argmin(np.abs(f_ge - F_R))]
    assert crossing == pytest.approx(0.2, abs=0.02)
    g = 0.02
    gap, where = vacuum_rabi_gap(spec(g, phi_ext=0.0), (0.18, 0.24))
    assert where == pytest.approx(crossing, abs=2e-3)
    # two-level oracle: 2 g |<g|n|e>| at resonance
    _, op = qubit_eigensystem(DEVICE.replace(phi_ext=where))
    assert gap == pytest.approx(2 * g * abs(op[0, 1]), rel=0.05)


def test_chi_vanishes_without_coupling():
    assert abs(dispersive_shift(spec(0.0)).chi) < 1e-9


def test_chi_negative_and_resolved_at_half_flux():
    ds = dispersive_shift(spec(0.34))
    assert ds.chi < 0
    assert abs(ds.chi) > 1.0  # kappa = 1 MHz
    assert not ds.near_resonant
    assert ReflectionModel(F_R, 1.0, ds.chi).readout_resolved


def test_chi_matches_perturbation_theory_at_tenfold_detuning():
    detuning = abs(solve(DEVICE.replace(phi_ext=0.5), n_levels=2).transitions[1] - F_R)
    s = spec(detuning / 10)
    assert dispersive_shift(s).chi == pytest.approx(perturbative_chi(s), rel=0.10)


def test_near_resonance_flagged():
    assert dispersive_shift(spec(0.2, phi_ext=0.209)).near_resonant


def test_phase_coupling_variant():
    ds = dispersive_shift(spec(0.05, coupling="phase"))
    assert math.isfinite(ds.chi) and ds.chi != 0


# -- reflection -----------------------------------------------------------------


def test_reflection_model_invariants():
    with pytest.raises(ParameterError):
        ReflectionModel(7.4, 0.0, -1.7)
    with pytest.raises(ParameterError):
        ReflectionModel(7.4, 1.0, -1.7, coupling_ratio=1.5)


def test_reflection_limits():
    m = ReflectionModel(7.4, 1.0, -1.72)
    assert reflection_coefficient(m, 7.4 + 5.0, "g") == pytest.approx(1.0, abs=1e-3)
    for state in ("g", "e"):
        assert reflection_coefficient(m, m.resonance(state), state) == pytest.approx(-1.0, abs=1e-14)
    assert m.resonance("g") == pytest.approx(7.4 + 0.00086)
    assert m.resonance("e") == pytest.approx(7.4 - 0.00086)


@given(
    st.floats(0.01, 10), st.floats(-10, 10), st.floats(0.01, 1.0),
    st.lists(st.floats(-0.05, 0.05), min_size=1, max_size=20),
)
def test_reflection_bounded(kappa, chi, ratio, offsets):
    m = ReflectionModel(7.4, kappa, chi, ratio)
    f = 7.4 + np.asarray(offsets)
    for state in ("g", "e"):
        assert np.all(np.abs(reflection_coefficient(m, f, state)) <= 1 + 1e-12)


def test_states_separated_by_nearly_half_turn():
    m = ReflectionModel(7.4, 1.0, -1.72)
    f = np.linspace(7.4 - 0.003, 7.4 + 0.003, 2001)
    diff = np.angle(np.exp(1j * (reflection_phase(m, f, "e") - reflection_phase(m, f, "g"))))
    assert np.degrees(np.max(np.abs(diff))) > 179.0
    # at the midpoint each state sits |chi|/2 from its resonance
    assert abs(diff[1000]) == pytest.approx(2 * (math.pi - 2 * math.atan(1.72 / 1.0)), abs=1e-9)


def test_chi_aligns_phase_curves():
    ds = dispersive_shift(spec(0.34))
    m = ReflectionModel(F_R, 1.0, ds.chi)
    f = np.linspace(F_R - 0.006, F_R + 0.006, 1201)
    g = reflection_coefficient(m, f, "g")

    def mismatch(shift_mhz):
        e = reflection_coefficient(m, f + shift_mhz * 1e-3, "e")
        return float(np.sum(np.abs(e - g) ** 2))

    best = optimize.minimize_scalar(mismatch, bounds=(-5, 5), method="bounded", options={"xatol": 1e-9})
    # shifting the e curve by chi lands it on the g curve
    assert best.x == pytest.approx(ds.chi, rel=0.02)
