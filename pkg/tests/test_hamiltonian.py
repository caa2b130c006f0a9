import math

import mpmath as mp
import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given
from hypothesis import strategies as st

from fluxspec.exceptions import ConvergenceError, ParameterError, TruncationError, WindowError
from fluxspec.hamiltonian import (
    BasisSpec,
    CphiRModel,
    SpectrumModel,
    build_hamiltonian,
    converged_dim,
    diagonalize,
    flux_sweep,
    matrix_element,
    parity,
    phase_slip_frequency,
    potential_energy,
    solve,
    transition_frequency,
    transition_table,
    wavefunction,
)
from fluxspec.params import CircuitParams

from conftest import DEVICE


def mp_phase_slip(e_j, e_c):
    mp.mp.dps = 40
    e_j, e_c = mp.mpf(e_j), mp.mpf(e_c)
    return 4 / mp.sqrt(mp.pi) * mp.root(8 * e_j**3 * e_c, 4) * mp.exp(-mp.sqrt(8 * e_j / e_c))


# -- current-phase relations ----------------------------------------------------


def test_cphir_normalisation():
    with pytest.raises(ParameterError):
        CphiRModel((0.5, 0.1))
    with pytest.raises(ParameterError):
        CphiRModel((1.0, math.nan))
    assert CphiRModel.sawtooth().harmonics[:3] == (1.0, -0.5, 1 / 3)
    assert CphiRModel.slanted().name == "slanted"


@given(st.floats(-10, 10))
def test_cphir_current_is_potential_derivative(phi):
    for model in (CphiRModel.sinusoidal(), CphiRModel.slanted(), CphiRModel.sawtooth()):
        h = 1e-5
        deriv = (model.potential(phi + h) - model.potential(phi - h)) / (2 * h)
        assert deriv == pytest.approx(model.current(phi), abs=1e-7)


def test_basis_spec_limits():
    with pytest.raises(ParameterError):
        BasisSpec.oscillator(8)
    with pytest.raises(ParameterError):
        BasisSpec.phase_grid(2001, 4 * math.pi)


# -- construction ---------------------------------------------------------------


def test_matrices_are_hermitian():
    for basis in (BasisSpec.oscillator(120), BasisSpec.phase_grid(801)):
        m = build_hamiltonian(DEVICE.replace(phi_ext=0.3), CphiRModel.slanted(), basis).matrix
        m = m.toarray() if hasattr(m, "toarray") else m
        assert np.max(np.abs(m - m.conj().T)) < 1e-12 * np.max(np.abs(m))


def test_zero_extra_harmonics_restore_sinusoid():
    basis = BasisSpec.oscillator(80)
    p = DEVICE.replace(phi_ext=0.21)
    plain = build_hamiltonian(p, CphiRModel.sinusoidal(), basis).matrix
    padded = build_hamiltonian(p, CphiRModel((1.0, 0.0, 0.0)), basis).matrix
    assert np.array_equal(plain, padded)


def test_harmonics_enter_additively():
    basis = BasisSpec.oscillator(80)
    p = DEVICE.replace(phi_ext=0.13)

    def m(c):
        return build_hamiltonian(p, CphiRModel(c), basis).matrix

    lhs = m((1.0, -0.25, 0.05)) - m((1.0,))
    rhs = (m((1.0, -0.25)) - m((1.0,))) + (m((1.0, 0.0, 0.05)) - m((1.0,)))
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * np.max(np.abs(lhs))


@pytest.mark.parametrize("kind", ["oscillator", "phase_grid"])
def test_harmonic_limit(kind):
    # E_J must stay positive, so take it vanishingly small
    p = CircuitParams(1e-12, 2.0, 0.8, 0.37)
    basis = BasisSpec.oscillator(64) if kind == "oscillator" else BasisSpec.phase_grid(4001, 24 * math.pi)
    sol = diagonalize(build_hamiltonian(p, basis=basis), 5)
    omega = math.sqrt(8 * p.e_c_sigma * p.e_l)
    np.testing.assert_allclose(sol.transitions[1:], omega * np.arange(1, 5), rtol=1e-8)


# -- diagonalisation ------------------------------------------------------------


@pytest.mark.parametrize("basis", [BasisSpec.oscillator(200), BasisSpec.phase_grid(2001)])
def test_eigenpairs_residual_and_orthonormality(basis):
    h = build_hamiltonian(DEVICE.replace(phi_ext=0.3), basis=basis)
    sol = diagonalize(h, 5)
    mat = h.matrix
    norm = np.max(np.abs(mat.toarray() if hasattr(mat, "toarray") else mat)) * math.sqrt(basis.dim)
    for k in range(5):
        v = sol.vectors[:, k]
        assert np.linalg.norm(mat @ v - sol.energies[k] * v) < 1e-8 * norm
    np.testing.assert_allclose(sol.vectors.conj().T @ sol.vectors, np.eye(5), atol=1e-10)
    assert np.all(np.diff(sol.energies) > 0)


def test_truncation_error_when_too_many_levels():
    with pytest.raises(TruncationError):
        diagonalize(build_hamiltonian(DEVICE, basis=BasisSpec.oscillator(40)), 11)


def test_convergence_error_carries_estimates():
    with pytest.raises(ConvergenceError) as info:
        solve(DEVICE, CphiRModel.sawtooth(), BasisSpec.oscillator(40), n_levels=5, tol=1e-9, max_dim=170)
    first, second = info.value.estimates
    assert len(first) == 5 and len(second) == 5


def test_solve_reports_converged_levels():
    sol = solve(DEVICE.replace(phi_ext=0.2), n_levels=4)
    finer = diagonalize(build_hamiltonian(sol.params, basis=BasisSpec.oscillator(2 * sol.basis.dim)), 4)
    assert np.max(np.abs(finer.energies - sol.energies)) < 1e-6
    assert sol.n_converged == 4


@pytest.mark.parametrize("seed", range(10))
def test_solvers_agree_on_random_parameters(seed):
    rng = np.random.default_rng(seed)
    e_c = rng.uniform(2.0, 8.0)
    p = CircuitParams(rng.uniform(0.5, 10) * e_c, e_c, rng.uniform(0.1, 2.0), rng.uniform(0, 1))
    osc = solve(p, n_levels=5, tol=1e-8)
    grid = solve(p, basis=BasisSpec.phase_grid(), n_levels=5, tol=1e-8)
    np.testing.assert_allclose(osc.energies, grid.energies, atol=1e-6, rtol=0)


# -- transitions and symmetry ---------------------------------------------------


def test_transition_telescoping():
    sol = solve(DEVICE.replace(phi_ext=0.27), n_levels=4)
    gf = transition_frequency(sol, 0, 2)
    assert gf == pytest.approx(transition_frequency(sol, 0, 1) + transition_frequency(sol, 1, 2), abs=1e-12)
    with pytest.raises(ValueError):
        transition_frequency(sol, 2, 1)
    with pytest.raises(TruncationError):
        transition_frequency(sol, 0, 4)


@given(st.floats(0.0, 1.0))
def test_flux_reflection_and_periodicity(phi):
    model = SpectrumModel(dim=160, n_levels=3)
    ref = model.transitions(DEVICE, [phi])
    np.testing.assert_allclose(model.transitions(DEVICE, [1 - phi]), ref, atol=1e-9, rtol=0)
    np.testing.assert_allclose(model.transitions(DEVICE, [phi + 1]), ref, atol=1e-9, rtol=0)
    np.testing.assert_allclose(model.transitions(DEVICE, [phi - 3]), ref, atol=1e-9, rtol=0)


def test_half_flux_is_stationary():
    h = 1e-4
    up, dn = transition_table(DEVICE, [0.5 + h, 0.5 - h], n_levels=2)[:, 0]
    assert abs(up - dn) / (2 * h) < 1e-4


def test_analytic_flux_slope_matches_finite_difference():
    model = SpectrumModel.for_params(DEVICE)
    h = 1e-5
    for phi in (0.1, 0.3, 0.45):
        fd = (model.transitions(DEVICE, [phi + h]) - model.transitions(DEVICE, [phi - h]))[0, 0] / (2 * h)
        assert model.flux_slope(DEVICE, [phi])[0] == pytest.approx(fd, rel=1e-6)


def test_analytic_parameter_gradient_matches_finite_difference():
    model = SpectrumModel.for_params(DEVICE)
    phi = np.array([0.05, 0.33])
    args = np.array([DEVICE.e_j, DEVICE.e_c_sigma, DEVICE.e_l])
    _, grad, _ = model.evaluate(*args, phi, grad=True)
    for i in range(3):
        step = np.zeros(3)
        step[i] = 1e-6 * args[i]
        e_up = model.evaluate(*(args + step), phi)[0]
        e_dn = model.evaluate(*(args - step), phi)[0]
        np.testing.assert_allclose(grad[:, :, i], (e_up - e_dn) / (2 * step[i]), rtol=1e-5, atol=1e-7)


def test_flux_sweep_matches_single_solves():
    phis = [0.0, 0.17, 0.5]
    sweep = flux_sweep(DEVICE, phis, n_levels=3)
    for row, phi in zip(sweep, phis):
        np.testing.assert_allclose(row, solve(DEVICE.replace(phi_ext=phi), n_levels=3).energies, atol=1e-7)


def test_converged_dim_is_enough():
    dim = converged_dim(DEVICE, n_levels=3, tol=1e-7)
    a = SpectrumModel(dim=dim).transitions(DEVICE, [0.3])
    b = SpectrumModel(dim=2 * dim).transitions(DEVICE, [0.3])
    assert np.max(np.abs(a - b)) < 1e-7


# -- matrix elements ------------------------------------------------------------


def test_matrix_element_hermitian_symmetry():
    sol = solve(DEVICE.replace(phi_ext=0.31), n_levels=4)
    for op in ("n", "phi"):
        for i in range(4):
            assert matrix_element(sol, op, i, i).imag == pytest.approx(0, abs=1e-12)
            for j in range(4):
                assert matrix_element(sol, op, i, j) == pytest.approx(matrix_element(sol, op, j, i).conjugate(), abs=1e-12)
    with pytest.raises(ValueError):
        matrix_element(sol, "q", 0, 1)


def test_gf_charge_element_vanishes_at_zero_flux():
    near_half = solve(DEVICE.replace(phi_ext=0.45), n_levels=3)
    zero = solve(DEVICE, n_levels=3)
    ref = abs(matrix_element(near_half, "n", 0, 2))
    assert ref > 0.01
    assert abs(matrix_element(zero, "n", 0, 2)) <= ref / 10


@pytest.mark.parametrize("phi_ext", [0.0, 0.5])
def test_parity_selection_rules_at_sweet_spots(phi_ext):
    sol = solve(DEVICE.replace(phi_ext=phi_ext), basis=BasisSpec.phase_grid(), n_levels=4)
    par = [parity(sol, k) for k in range(4)]
    np.testing.assert_allclose(np.abs(par), 1.0, atol=1e-8)
    assert par[0] > 0 and par[1] < 0
    # charge couples only states of opposite parity
    for i in range(4):
        for j in range(4):
            if par[i] * par[j] > 0:
                assert abs(matrix_element(sol, "n", i, j)) < 1e-8


def test_half_flux_tie_break_is_deterministic():
    p = CircuitParams(40.0, 1.0, 0.2, 0.5)
    a = solve(p, n_levels=4)
    b = solve(p, n_levels=4)
    assert np.array_equal(a.energies, b.energies)
    assert parity(a, 0) > 0 and parity(a, 1) < 0


# -- wavefunctions --------------------------------------------------------------


@pytest.mark.parametrize("basis", [None, BasisSpec.phase_grid()])
def test_wavefunctions_normalised(basis):
    sol = solve(DEVICE, basis=basis, n_levels=4)
    phi = np.linspace(-9 * math.pi, 9 * math.pi, 12001)
    for k in range(4):
        psi = wavefunction(sol, k, phi)
        assert trapezoid(psi**2, phi) == pytest.approx(1.0, abs=1e-8)


def test_zero_flux_states_spread_over_three_wells():
    sol = solve(DEVICE, n_levels=4)
    phi = np.linspace(-9 * math.pi, 9 * math.pi, 12001)
    side = 0.0
    for k in range(4):
        w = wavefunction(sol, k, phi) ** 2
        left = trapezoid(np.where((phi < -math.pi) & (phi > -3 * math.pi), w, 0), phi)
        right = trapezoid(np.where((phi > math.pi) & (phi < 3 * math.pi), w, 0), phi)
        assert left == pytest.approx(right, abs=1e-6)
        side = max(side, left)
    assert side > 0.3


def test_harmonic_ground_state_is_gaussian():
    p = CircuitParams(1e-12, 2.0, 0.8)
    sol = solve(p, n_levels=2)
    width = (8 * p.e_c_sigma / p.e_l) ** 0.25
    phi = np.linspace(-8 * width, 8 * width, 801)
    expected = np.exp(-(phi**2) / (2 * width**2)) / (math.pi**0.25 * math.sqrt(width))
    np.testing.assert_allclose(np.abs(wavefunction(sol, 0, phi)), expected, atol=1e-8)


def test_half_flux_double_well_parity():
    sol = solve(DEVICE.replace(phi_ext=0.5), n_levels=2)
    phi = math.pi + np.linspace(-8 * math.pi, 8 * math.pi, 4001)
    g, e = wavefunction(sol, 0, phi), wavefunction(sol, 1, phi)
    np.testing.assert_allclose(g, g[::-1], atol=1e-8)
    np.testing.assert_allclose(e, -e[::-1], atol=1e-8)


def test_wavefunction_window_error():
    sol = solve(DEVICE, n_levels=2)
    with pytest.raises(WindowError):
        wavefunction(sol, 0, np.linspace(-2, 2, 101))


def test_potential_offset():
    phi = np.linspace(-3 * math.pi, 3 * math.pi, 601)
    u = potential_energy(DEVICE, CphiRModel.slanted(), phi)
    assert u.min() == 0.0


# -- phase slips ----------------------------------------------------------------


def test_phase_slip_hand_value():
    nu = phase_slip_frequency(CircuitParams(23.4, 15.4, 0.5))
    assert nu == pytest.approx(2.448340575262349, rel=1e-12)
    assert nu == pytest.approx(float(mp_phase_slip(23.4, 15.4)), rel=1e-12)


@given(st.floats(0.3, 20.0), st.floats(0.5, 30.0))
def test_phase_slip_decreasing_above_threshold(ratio, e_c):
    e_j = ratio * e_c
    lo = phase_slip_frequency(CircuitParams(e_j, e_c, 1.0))
    hi = phase_slip_frequency(CircuitParams(e_j * 1.001, e_c, 1.0))
    assert hi < lo


def test_phase_slip_increases_below_threshold():
    # d nu / d E_J changes sign at E_J / E_C = 9/32
    e_c = 10.0
    assert phase_slip_frequency(CircuitParams(0.2 * e_c * 1.01, e_c, 1)) > phase_slip_frequency(CircuitParams(0.2 * e_c, e_c, 1))


@given(st.floats(0.5, 50.0), st.floats(0.5, 30.0), st.floats(0.1, 10.0))
def test_phase_slip_homogeneous(e_j, e_c, lam):
    base = phase_slip_frequency(CircuitParams(e_j, e_c, 1.0))
    assert phase_slip_frequency(CircuitParams(lam * e_j, lam * e_c, 1.0)) == pytest.approx(lam * base, rel=1e-12)
