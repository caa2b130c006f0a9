"""Single-mode fluxonium Hamiltonian with a general current-phase relation.

    H = 4 E_C n^2 + 1/2 E_L (phi - 2 pi phi_ext)^2 - E_J sum_k (c_k / k) cos(k phi)

Two independent solvers are provided.  The primary one works in the
eigenbasis of the L-C oscillator (theta = phi - 2 pi phi_ext), where the
Josephson harmonics are built from exact displacement-operator matrix
elements.  The second discretises phi on a uniform grid with a 16th-order
central-difference kinetic term and is kept as an oracle.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import eigsh
from scipy.special import gammaln

from .exceptions import ConvergenceError, ParameterError, TruncationError, WindowError
from .params import CircuitParams, validate

__all__ = [
    "CphiRModel",
    "BasisSpec",
    "Hamiltonian",
    "EigenSolution",
    "build_hamiltonian",
    "diagonalize",
    "solve",
    "transition_frequency",
    "matrix_element",
    "parity",
    "wavefunction",
    "potential_energy",
    "phase_slip_frequency",
    "flux_sweep",
    "transition_table",
    "converged_dim",
    "SpectrumModel",
]

TWO_PI = 2 * math.pi
STENCIL_HALF_WIDTH = 8  # 16th-order central differences on the phase grid


# -- current-phase relations ----------------------------------------------


@dataclass(frozen=True)
class CphiRModel:
    """Current-phase relation I = I_c sum_k c_k sin(k phi).

    The matching Josephson potential is -E_J sum_k (c_k/k) cos(k phi).  The
    first coefficient is fixed to one so that E_J keeps its usual meaning.
    """

    harmonics: tuple = (1.0,)

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.harmonics)
        object.__setattr__(self, "harmonics", coeffs)
        if len(coeffs) < 1:
            raise ParameterError("CphiR needs at least one harmonic", "harmonics")
        if not all(math.isfinite(c) for c in coeffs):
            raise ParameterError("CphiR coefficients must be finite", "harmonics")
        if coeffs[0] != 1.0:
            raise ParameterError(f"first harmonic must be 1, got {coeffs[0]}", "harmonics")

    @classmethod
    def sinusoidal(cls):
        return cls((1.0,))

    @classmethod
    def slanted(cls):
        return cls((1.0, -0.25, 0.05))

    @classmethod
    def sawtooth(cls, n_max=10):
        return cls(tuple((-1) ** (n + 1) / n for n in range(1, n_max + 1)))

    @property
    def name(self):
        known = {
            (1.0,): "sinusoidal",
            (1.0, -0.25, 0.05): "slanted",
            CphiRModel.sawtooth().harmonics: "sawtooth",
        }
        return known.get(self.harmonics, "custom")

    def current(self, phi):
        """Supercurrent in units of I_c."""
        phi = np.asarray(phi, dtype=float)
        return sum(c * np.sin(k * phi) for k, c in enumerate(self.harmonics, start=1))

    def potential(self, phi):
        """Josephson energy per unit E_J, -sum (c_k/k) cos(k phi)."""
        phi = np.asarray(phi, dtype=float)
        return -sum(c / k * np.cos(k * phi) for k, c in enumerate(self.harmonics, start=1))


SINUSOIDAL = CphiRModel.sinusoidal()


# -- basis description ----------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    """Truncation of the Hilbert space.

    ``kind`` is ``"oscillator"`` (``dim`` L-C oscillator levels) or
    ``"phase_grid"`` (``dim`` points spanning a window of length
    ``phase_window`` radians centred on the inductive minimum).
    """

    kind: Literal["oscillator", "phase_grid"] = "oscillator"
    dim: int = 200
    phase_window: float = 12 * math.pi

    def __post_init__(self):
        if self.kind not in ("oscillator", "phase_grid"):
            raise ParameterError(f"unknown basis kind {self.kind!r}", "kind")
        if int(self.dim) != self.dim or self.dim < 16:
            raise ParameterError(f"basis dim must be an integer >= 16, got {self.dim}", "dim")
        if self.kind == "phase_grid" and not self.phase_window >= 6 * math.pi:
            raise ParameterError("phase window must cover >= 6 pi", "phase_window")

    @classmethod
    def oscillator(cls, dim=200):
        return cls("oscillator", dim)

    @classmethod
    def phase_grid(cls, dim=2001, phase_window=12 * math.pi):
        return cls("phase_grid", dim, phase_window)

    def refined(self):
        """Basis with twice the resolution (doubled levels or halved grid step)."""
        if self.kind == "oscillator":
            return BasisSpec("oscillator", 2 * self.dim)
        return BasisSpec("phase_grid", 2 * self.dim - 1, self.phase_window)

    def widened(self):
        """Phase grid with twice the window at the same step."""
        return BasisSpec("phase_grid", 2 * self.dim - 1, 2 * self.phase_window)


# -- oscillator-basis building blocks -------------------------------------


def _diagonal_laguerre(x, dim):
    """Magnitudes of displacement matrix elements along each diagonal.

    Returns ``ell`` with ``ell[k, n] = sqrt(n!/(n+k)!) exp(-x/2) x^(k/2)
    L_n^(k)(x)``, i.e. |<n+k|D(alpha)|n>| up to sign with x = |alpha|^2.
    The normalised three-term recurrence in n is stable; a running log-scale
    per diagonal avoids underflow of exp(-x/2).
    """
    k = np.arange(dim, dtype=float)
    out = np.zeros((dim, dim))
    log_scale = -x / 2 + 0.5 * k * math.log(x) - 0.5 * gammaln(k + 1) if x > 0 else np.where(k == 0, 0.0, -np.inf)
    prev = np.zeros(dim)
    cur = np.ones(dim)
    out[:, 0] = np.exp(log_scale)
    for n in range(dim - 1):
        nxt = ((2 * n + 1 + k - x) * cur - np.sqrt(n * (n + k)) * prev) / np.sqrt((n + 1) * (n + k + 1))
        prev, cur = cur, nxt
        big = np.maximum(np.abs(cur), np.abs(prev))
        rescale = np.where(big > 1e100, big, 1.0)
        cur /= rescale
        prev /= rescale
        log_scale = log_scale + np.log(rescale)
        out[:, n + 1] = cur * np.exp(log_scale)
    return out


def _cos_sin_theta(shift, dim):
    if dim > 600:
        return _cos_sin_theta_uncached(shift, dim)
    return _cos_sin_theta_cached(shift, dim)


@lru_cache(maxsize=32)
def _cos_sin_theta_cached(shift, dim):
    return _cos_sin_theta_uncached(shift, dim)


def _cos_sin_theta_uncached(shift, dim):
    """Matrices of cos(s X sqrt2) and sin(s X sqrt2) in the oscillator basis.

    With theta = phi_osc (a + a^dag)/sqrt2, exp(i k theta) is the displacement
    D(i s) with s = k phi_osc / sqrt2; its elements are i^|m-n| ell, so the
    even offsets form the cosine and the odd ones the sine, both real.
    """
    ell = _diagonal_laguerre(shift * shift, dim)
    m, n = np.indices((dim, dim))
    offset = np.abs(m - n)
    vals = ell[offset, np.minimum(m, n)]
    even = offset % 2 == 0
    sign = np.where(even, (-1.0) ** (offset // 2), (-1.0) ** ((offset - 1) // 2))
    cos_m = np.where(even, sign * vals, 0.0)
    sin_m = np.where(even, 0.0, sign * vals)
    cos_m.setflags(write=False)
    sin_m.setflags(write=False)
    return cos_m, sin_m


def _phi_osc(e_c, e_l):
    return (8.0 * e_c / e_l) ** 0.25


def _ladder(dim):
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1)


def _osc_josephson(params, cphir, dim):
    """-sum (c_k/k) cos(k (theta + 2 pi phi_ext)) in the oscillator basis."""
    phi_osc = _phi_osc(params.e_c_sigma, params.e_l)
    out = np.zeros((dim, dim))
    for k, c in enumerate(cphir.harmonics, start=1):
        if c == 0.0:
            continue
        cos_m, sin_m = _cos_sin_theta(k * phi_osc / math.sqrt(2), dim)
        arg = TWO_PI * k * params.phi_ext
        out -= (c / k) * (math.cos(arg) * cos_m - math.sin(arg) * sin_m)
    return out


# -- phase-grid building blocks -------------------------------------------


@lru_cache(maxsize=None)
def _stencils(p):
    """Exact central-difference weights (offsets 1..p) for d/dx and d2/dx2."""
    first, second = [], []
    fp = math.factorial(p) ** 2
    for j in range(1, p + 1):
        base = Fraction(fp, math.factorial(p - j) * math.factorial(p + j))
        first.append((-1) ** (j + 1) * base / j)
        second.append(2 * (-1) ** (j + 1) * base / (j * j))
    centre = -2 * sum(second)
    return np.array([float(w) for w in first]), float(centre), np.array([float(w) for w in second])


def _grid(basis):
    half = basis.phase_window / 2
    return np.linspace(-half, half, basis.dim)


def _grid_bands(params, cphir, basis):
    """Lower bands (eig_banded layout) of the phase-grid Hamiltonian."""
    theta = _grid(basis)
    h = theta[1] - theta[0]
    _, centre, second = _stencils(STENCIL_HALF_WIDTH)
    pot = 0.5 * params.e_l * theta**2 + params.e_j * cphir.potential(theta + TWO_PI * params.phi_ext)
    bands = np.zeros((STENCIL_HALF_WIDTH + 1, basis.dim))
    kinetic = -4.0 * params.e_c_sigma / h**2
    bands[0] = pot + kinetic * centre
    for j in range(1, STENCIL_HALF_WIDTH + 1):
        bands[j, : basis.dim - j] = kinetic * second[j - 1]
    return bands, pot


def _bands_to_sparse(bands):
    dim = bands.shape[1]
    diags, offsets = [bands[0]], [0]
    for j in range(1, bands.shape[0]):
        diags += [bands[j, : dim - j], bands[j, : dim - j]]
        offsets += [-j, j]
    return sparse.diags(diags, offsets, shape=(dim, dim), format="csr")


# -- Hamiltonian & eigen-solution containers ------------------------------


@dataclass
class Hamiltonian:
    """Matrix of H in a given basis plus the metadata needed downstream."""

    matrix: object  # dense ndarray (oscillator) or scipy.sparse matrix (grid)
    params: CircuitParams
    cphir: CphiRModel
    basis: BasisSpec
    bands: np.ndarray | None = None
    potential: np.ndarray | None = None

    def operator(self, name):
        """Matrix of ``n`` or ``phi`` in this basis."""
        dim = self.basis.dim
        if name not in ("n", "phi"):
            raise ValueError(f"unknown operator {name!r}; expected 'n' or 'phi'")
        if self.basis.kind == "oscillator":
            a = _ladder(dim)
            phi_osc = _phi_osc(self.params.e_c_sigma, self.params.e_l)
            if name == "n":
                return 1j * (a.T - a) / (math.sqrt(2) * phi_osc)
            return phi_osc * (a + a.T) / math.sqrt(2) + TWO_PI * self.params.phi_ext * np.eye(dim)
        theta = _grid(self.basis)
        if name == "phi":
            return sparse.diags(theta + TWO_PI * self.params.phi_ext, format="csr")
        h = theta[1] - theta[0]
        first, _, _ = _stencils(STENCIL_HALF_WIDTH)
        diags, offsets = [], []
        for j, w in enumerate(first, start=1):
            diags += [np.full(dim - j, w / h), np.full(dim - j, -w / h)]
            offsets += [j, -j]
        deriv = sparse.diags(diags, offsets, shape=(dim, dim), format="csr")
        return -1j * deriv


@dataclass
class EigenSolution:
    """Lowest eigenpairs of a fluxonium Hamiltonian.

    ``energies`` (GHz) are ascending; columns of ``vectors`` are the
    eigenvectors in ``basis``.  ``n_converged`` levels passed the
    resolution-doubling check (equal to ``len(energies)`` when the solution
    came straight from :func:`diagonalize`).
    """

    energies: np.ndarray
    vectors: np.ndarray
    basis: BasisSpec
    params: CircuitParams
    cphir: CphiRModel
    hamiltonian: Hamiltonian = field(repr=False)
    n_converged: int | None = None

    def __post_init__(self):
        if self.n_converged is None:
            self.n_converged = len(self.energies)

    @property
    def transitions(self):
        """Transition frequencies from the ground state, E_k - E_0 (GHz)."""
        return self.energies - self.energies[0]


def build_hamiltonian(params, cphir=SINUSOIDAL, basis=None):
    """Assemble the Hamiltonian matrix.

    Returns a :class:`Hamiltonian` whose ``matrix`` is real symmetric: dense
    for the oscillator basis, sparse banded for the phase grid.
    """
    validate(params)
    basis = basis or BasisSpec()
    if basis.kind == "oscillator":
        dim = basis.dim
        diag = params.plasma_frequency * (np.arange(dim) + 0.5)
        matrix = np.diag(diag) + params.e_j * _osc_josephson(params, cphir, dim)
        matrix = 0.5 * (matrix + matrix.T)
        return Hamiltonian(matrix, params, cphir, basis)
    bands, pot = _grid_bands(params, cphir, basis)
    return Hamiltonian(_bands_to_sparse(bands), params, cphir, basis, bands=bands, potential=pot)


def _parity_of(vectors, basis):
    if basis.kind == "oscillator":
        signs = (-1.0) ** np.arange(basis.dim)
        return np.einsum("ik,i,ik->k", vectors.conj(), signs, vectors).real
    return np.einsum("ik,ik->k", vectors[::-1].conj(), vectors).real


def _has_parity(params):
    frac = params.phi_ext % 0.5
    return min(frac, 0.5 - frac) < 1e-12


def diagonalize(h, n_levels=5):
    """Lowest ``n_levels`` eigenpairs of ``h`` as an :class:`EigenSolution`.

    At parity-symmetric flux (integer or half-integer) exact ties are
    ordered even-before-odd.  Raises :class:`TruncationError` when
    ``n_levels`` exceeds a quarter of the basis dimension.
    """
    dim = h.basis.dim
    if n_levels < 1 or n_levels > dim // 4:
        raise TruncationError(f"{n_levels} levels requested from a basis of dim {dim} (max {dim // 4})")
    if h.bands is not None:
        # the difference kinetic term is positive semidefinite, so min(V) bounds the spectrum
        sigma = float(h.potential.min()) - 1.0
        energies, vectors = eigsh(
            h.matrix.tocsc(), k=n_levels, sigma=sigma, which="LM", v0=np.ones(dim), tol=0
        )
        order = np.argsort(energies)
        energies, vectors = energies[order], vectors[:, order]
    else:
        energies, vectors = sla.eigh(h.matrix, subset_by_index=[0, n_levels - 1])
    # deterministic sign: largest-magnitude component positive
    idx = np.argmax(np.abs(vectors), axis=0)
    vectors = vectors * np.sign(vectors[idx, np.arange(n_levels)])
    if _has_parity(h.params) and n_levels > 1:
        par = _parity_of(vectors, h.basis)
        order = sorted(range(n_levels), key=lambda k: (round(energies[k], 12), -par[k]))
        energies, vectors = energies[order], vectors[:, order]
    return EigenSolution(energies, vectors, h.basis, h.params, h.cphir, h)


def solve(params, cphir=SINUSOIDAL, basis=None, n_levels=5, tol=1e-6, max_dim=None):
    """Diagonalise with automatic resolution doubling.

    The basis is refined until every one of the lowest ``n_levels`` energies
    moves by less than ``tol`` GHz.  For the phase grid the window is also
    widened whenever an eigenvector has weight at the window edge.

    Raises :class:`ConvergenceError` (carrying the last two estimates) if the
    dimension ceiling is reached first.
    """
    basis = basis or BasisSpec()
    if max_dim is None:
        max_dim = 3200 if basis.kind == "oscillator" else 64001
    dim_needed = 4 * n_levels
    if basis.dim < dim_needed:
        basis = BasisSpec(basis.kind, dim_needed, basis.phase_window)
    current = diagonalize(build_hamiltonian(params, cphir, basis), n_levels)
    while True:
        if basis.kind == "phase_grid" and _edge_weight(current) > 1e-9:
            if basis.dim * 2 > max_dim:
                raise ConvergenceError("phase window too small within dimension ceiling")
            basis = basis.widened()
            current = diagonalize(build_hamiltonian(params, cphir, basis), n_levels)
            continue
        finer = basis.refined()
        if finer.dim > max_dim:
            raise ConvergenceError(
                f"no convergence to {tol} GHz below dim {max_dim}",
                estimates=(current.energies, None),
            )
        refined = diagonalize(build_hamiltonian(params, cphir, finer), n_levels)
        delta = np.max(np.abs(refined.energies - current.energies))
        if delta < tol:
            current.n_converged = n_levels
            return current
        if finer.refined().dim > max_dim:
            raise ConvergenceError(
                f"levels still moving by {delta:.3g} GHz at dim {finer.dim}",
                estimates=(current.energies, refined.energies),
            )
        basis, current = finer, refined


def _edge_weight(sol):
    edge = max(STENCIL_HALF_WIDTH, sol.basis.dim // 100)
    v = sol.vectors
    return float(max(np.max(np.abs(v[:edge])), np.max(np.abs(v[-edge:]))))


def _check_levels(sol, *levels):
    for lev in levels:
        if not 0 <= lev < sol.n_converged:
            raise TruncationError(f"level {lev} not among the {sol.n_converged} converged levels")


def transition_frequency(sol, i, j):
    """E_j - E_i in GHz for converged levels with j > i."""
    if j <= i:
        raise ValueError(f"need j > i, got i={i}, j={j}")
    _check_levels(sol, i, j)
    return float(sol.energies[j] - sol.energies[i])


def matrix_element(sol, op, i, j):
    """<i|op|j> in the eigenbasis, ``op`` one of ``"n"`` or ``"phi"``."""
    if op not in ("n", "phi"):
        raise ValueError(f"unknown operator {op!r}; expected 'n' or 'phi'")
    _check_levels(sol, i, j)
    mat = sol.hamiltonian.operator(op)
    return complex(sol.vectors[:, i].conj() @ (mat @ sol.vectors[:, j]))


def parity(sol, level):
    """Expectation of the reflection theta -> -theta (+1 even, -1 odd)."""
    _check_levels(sol, level)
    return float(_parity_of(sol.vectors[:, [level]], sol.basis)[0])


def _hermite_functions(x, n_max):
    """Normalised Hermite functions psi_0..psi_{n_max-1} at ``x``."""
    out = np.zeros((n_max, x.size))
    out[0] = math.pi**-0.25 * np.exp(-(x**2) / 2)
    if n_max > 1:
        out[1] = math.sqrt(2) * x * out[0]
    for k in range(1, n_max - 1):
        out[k + 1] = math.sqrt(2 / (k + 1)) * x * out[k] - math.sqrt(k / (k + 1)) * out[k - 1]
    return out


def wavefunction(sol, level, phi_samples):
    """Real wavefunction psi(phi) of ``level``, normalised over phi.

    Raises :class:`WindowError` if |psi| exceeds 1e-6 at either end of
    ``phi_samples`` (the grid does not cover the support).
    """
    _check_levels(sol, level)
    phi = np.asarray(phi_samples, dtype=float)
    theta = phi - TWO_PI * sol.params.phi_ext
    vec = sol.vectors[:, level].real
    if sol.basis.kind == "oscillator":
        phi_osc = _phi_osc(sol.params.e_c_sigma, sol.params.e_l)
        herm = _hermite_functions(theta / phi_osc, sol.basis.dim)
        psi = vec @ herm / math.sqrt(phi_osc)
    else:
        grid = _grid(sol.basis)
        h = grid[1] - grid[0]
        inside = (theta >= grid[0]) & (theta <= grid[-1])
        psi = np.zeros_like(theta)
        psi[inside] = CubicSpline(grid, vec / math.sqrt(h))(theta[inside])
    if max(abs(psi[0]), abs(psi[-1])) > 1e-6:
        raise WindowError(
            f"|psi_{level}| = {max(abs(psi[0]), abs(psi[-1])):.2e} at the edge of "
            f"[{phi[0]:.3f}, {phi[-1]:.3f}]; widen the phase window"
        )
    return psi


def potential_energy(params, cphir=SINUSOIDAL, phi=None):
    """Potential U(phi) in GHz, offset so that its minimum over ``phi`` is zero."""
    phi = np.asarray(phi, dtype=float)
    u = 0.5 * params.e_l * (phi - TWO_PI * params.phi_ext) ** 2 + params.e_j * cphir.potential(phi)
    return u - u.min()


def phase_slip_frequency(params):
    """Phase-slip estimate of the half-flux splitting (GHz).

    nu = 4/sqrt(pi) (8 E_J^3 E_C)^(1/4) exp(-sqrt(8 E_J / E_C))
    """
    validate(params)
    e_j, e_c = params.e_j, params.e_c_sigma
    return 4 / math.sqrt(math.pi) * (8 * e_j**3 * e_c) ** 0.25 * math.exp(-math.sqrt(8 * e_j / e_c))


# -- flux sweeps ----------------------------------------------------------


def converged_dim(params, cphir=SINUSOIDAL, n_levels=5, tol=1e-7, start=32, max_dim=1600):
    """Smallest oscillator dimension (on a x1.25 ladder) converged to ``tol``."""
    ref = _osc_energies(params, cphir, max(2 * start, 4 * n_levels), n_levels)
    dim = max(start, 4 * n_levels)
    while dim <= max_dim:
        ref = _osc_energies(params, cphir, 2 * dim, n_levels)
        if np.max(np.abs(_osc_energies(params, cphir, dim, n_levels) - ref)) < tol:
            return dim
        dim = int(dim * 1.25)
    raise ConvergenceError(f"oscillator basis not converged to {tol} below dim {max_dim}", estimates=(ref, None))


def _osc_energies(params, cphir, dim, n_levels):
    h = np.diag(params.plasma_frequency * (np.arange(dim) + 0.5)) + params.e_j * _osc_josephson(params, cphir, dim)
    return sla.eigh(h, eigvals_only=True, subset_by_index=[0, n_levels - 1])


def _thread_count():
    try:
        return max(1, int(os.environ.get("FLUXSPEC_NUM_THREADS", "1")))
    except ValueError:
        return 1


def flux_sweep(params, phi_values, cphir=SINUSOIDAL, n_levels=5, dim=None):
    """Lowest ``n_levels`` energies at each flux in ``phi_values``.

    Uses the oscillator basis at a dimension checked for convergence at the
    first flux point (unless ``dim`` is given).  Flux points are independent;
    the environment variable ``FLUXSPEC_NUM_THREADS`` caps the worker count.
    """
    validate(params)
    phi_values = np.atleast_1d(np.asarray(phi_values, dtype=float))
    if phi_values.size == 0:
        raise ValueError("empty flux grid")
    if dim is None:
        dim = max(converged_dim(params.replace(phi_ext=float(phi_values[0])), cphir, n_levels), 4 * n_levels)

    def one(phi):
        return _osc_energies(params.replace(phi_ext=float(phi)), cphir, dim, n_levels)

    workers = _thread_count()
    if workers > 1 and phi_values.size > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, phi_values))
    else:
        rows = [one(phi) for phi in phi_values]
    return np.array(rows)


def transition_table(params, phi_values, cphir=SINUSOIDAL, n_levels=4, dim=None):
    """Transition frequencies from the ground state, shape (n_flux, n_levels-1)."""
    energies = flux_sweep(params, phi_values, cphir, n_levels, dim)
    return energies[:, 1:] - energies[:, :1]


class SpectrumModel:
    """Repeated oscillator-basis evaluation of the low spectrum.

    Harmonic matrices are reused across flux points; gradients with respect
    to (E_J, E_C, E_L) and to phi_ext come from Hellmann-Feynman expectation
    values <dH/dp> in the converged eigenvectors.
    """

    PARAMS = ("e_j", "e_c_sigma", "e_l")

    def __init__(self, cphir=SINUSOIDAL, dim=120, n_levels=3):
        if n_levels > dim // 4:
            raise TruncationError(f"{n_levels} levels from dim {dim}")
        self.cphir = cphir
        self.dim = dim
        self.n_levels = n_levels
        a = _ladder(dim)
        self._x = (a + a.T) / math.sqrt(2)
        self._p = (a.T - a) / math.sqrt(2)  # n = i * p / phi_osc

    def _harmonics(self, e_c, e_l):
        phi_osc = _phi_osc(e_c, e_l)
        return phi_osc, [
            (k, c, *_cos_sin_theta(k * phi_osc / math.sqrt(2), self.dim))
            for k, c in enumerate(self.cphir.harmonics, start=1)
            if c != 0.0
        ]

    def evaluate(self, e_j, e_c, e_l, phi_values, grad=False, flux_grad=False):
        """Energies (n_flux, n_levels); optional gradients.

        Returns ``(energies, d_params, d_flux)`` where ``d_params`` has shape
        (n_flux, n_levels, 3) in the order of :attr:`PARAMS` and ``d_flux``
        (n_flux, n_levels) is dE/dphi_ext; unrequested parts are None.
        """
        phi_values = np.atleast_1d(np.asarray(phi_values, dtype=float))
        phi_osc, harm = self._harmonics(e_c, e_l)
        diag = math.sqrt(8 * e_c * e_l) * (np.arange(self.dim) + 0.5)
        nl = self.n_levels
        energies = np.empty((phi_values.size, nl))
        d_params = np.empty((phi_values.size, nl, 3)) if grad else None
        d_flux = np.empty((phi_values.size, nl)) if flux_grad else None
        for idx, phi in enumerate(phi_values):
            josephson = np.zeros((self.dim, self.dim))
            dj_dphi = np.zeros((self.dim, self.dim)) if flux_grad else None
            for k, c, cos_m, sin_m in harm:
                arg = TWO_PI * k * phi
                ca, sa = math.cos(arg), math.sin(arg)
                josephson -= (c / k) * (ca * cos_m - sa * sin_m)
                if flux_grad:
                    # d/dphi of -(c/k) cos(k(theta + 2 pi phi)) = 2 pi c sin(k(theta + 2 pi phi))
                    dj_dphi += TWO_PI * c * (sa * cos_m + ca * sin_m)
            h = e_j * josephson
            h[np.diag_indices(self.dim)] += diag
            vals, vecs = sla.eigh(h, subset_by_index=[0, nl - 1])
            energies[idx] = vals
            if grad:
                d_params[idx, :, 0] = np.einsum("ik,ij,jk->k", vecs, josephson, vecs)
                d_params[idx, :, 1] = 4 * np.sum((self._p @ vecs) ** 2, axis=0) / phi_osc**2
                d_params[idx, :, 2] = 0.5 * phi_osc**2 * np.sum((self._x @ vecs) ** 2, axis=0)
            if flux_grad:
                d_flux[idx] = e_j * np.einsum("ik,ij,jk->k", vecs, dj_dphi, vecs)
        return energies, d_params, d_flux

    def transitions(self, params, phi_values):
        """E_k - E_0 for k = 1..n_levels-1 at each flux."""
        e, _, _ = self.evaluate(params.e_j, params.e_c_sigma, params.e_l, phi_values)
        return e[:, 1:] - e[:, :1]

    def flux_slope(self, params, phi_values, upper=1):
        """d f_{0->upper} / d phi_ext in GHz per flux quantum."""
        _, _, d_flux = self.evaluate(params.e_j, params.e_c_sigma, params.e_l, phi_values, flux_grad=True)
        return d_flux[:, upper] - d_flux[:, 0]

    @classmethod
    def for_params(cls, params, cphir=SINUSOIDAL, n_levels=3, tol=1e-7, margin=1.25):
        """Model whose dimension is converged at ``params`` (with a safety margin)."""
        dim = converged_dim(params, cphir, max(n_levels, 5), tol=tol)
        return cls(cphir, int(math.ceil(dim * margin)), n_levels)
