"""Least-squares recovery of circuit parameters from spectroscopy and
reflection data.

Spectrum fits run a trust-region least-squares solver over the logarithm of
the positive parameters, seeded from a Latin-hypercube of starts around the
initial guess.  Jacobians are analytic (Hellmann-Feynman).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.stats import qmc
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .coupled import ReflectionModel, reflection_phase
from .exceptions import ConvergenceError, DataError, ParameterError
from .hamiltonian import SINUSOIDAL, CphiRModel, SpectrumModel
from .params import (
    CircuitParams,
    charging_energy_from_capacitance,
    inductive_energy_from_inductance,
    validate,
)

__all__ = [
    "SpectroscopyDataset",
    "FitReport",
    "SpectrumFitter",
    "TwoJunctionResult",
    "ReflectionFitter",
    "CphiRComparison",
    "fit_spectrum",
    "compare_cphir",
    "fit_two_ej",
    "fit_reflection",
    "branch_crossings",
    "default_exclusion_windows",
]

LABEL_LEVEL = {"ge": 1, "gf": 2, "unassigned": 1}

ENERGY_COORDS = ("e_j", "e_c_sigma", "e_l")
CIRCUIT_COORDS = ("e_j", "c_sigma_ff", "l_q_nh")

# e_c = K_C / c_sigma and e_l = K_L / l_q, so log-coordinates differ by sign and offset
_K_C = charging_energy_from_capacitance(1.0)
_K_L = inductive_energy_from_inductance(1.0)


# -- data ---------------------------------------------------------------------


def _check_windows(windows):
    out = []
    for w in windows:
        lo, hi = float(w[0]), float(w[1])
        if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
            raise DataError(f"bad exclusion window {w!r}")
        out.append((lo, hi))
    out.sort()
    for (a0, a1), (b0, b1) in zip(out, out[1:]):
        if b0 <= a1:
            raise DataError(f"exclusion windows ({a0}, {a1}) and ({b0}, {b1}) overlap")
    return tuple(out)


@dataclass(frozen=True)
class SpectroscopyDataset:
    """Measured transition frequencies versus external flux.

    Parameters
    ----------
    phi_ext : array_like
        Flux in units of the flux quantum.
    frequency : array_like
        Transition frequency in GHz.
    label : array_like of str, optional
        ``"ge"``, ``"gf"`` or ``"unassigned"`` (treated as g->e with unknown
        junction branch).  Defaults to all ``"ge"``.
    weight : array_like, optional
        Multiplies the squared residual of each point.  Unit by default.
    exclusion_windows : sequence of (lo, hi)
        Disjoint flux intervals left out of the fit.
    """

    phi_ext: np.ndarray
    frequency: np.ndarray
    label: np.ndarray = None
    weight: np.ndarray = None
    exclusion_windows: tuple = ()

    def __post_init__(self):
        phi = np.atleast_1d(np.asarray(self.phi_ext, dtype=float))
        freq = np.atleast_1d(np.asarray(self.frequency, dtype=float))
        n = phi.size
        label = np.full(n, "ge", dtype=object) if self.label is None else np.asarray(self.label, dtype=object)
        weight = np.ones(n) if self.weight is None else np.asarray(self.weight, dtype=float)
        if not (freq.size == n and label.size == n and weight.size == n):
            raise DataError("phi_ext, frequency, label and weight must have equal length")
        if not np.all(np.isfinite(phi)):
            raise DataError("flux values must be finite")
        if not np.all(np.isfinite(freq) & (freq > 0)):
            raise DataError("frequencies must be positive and finite")
        if not np.all(np.isfinite(weight) & (weight >= 0)):
            raise DataError("weights must be non-negative")
        bad = sorted({str(x) for x in label} - set(LABEL_LEVEL))
        if bad:
            raise DataError(f"unknown transition labels {bad}")
        object.__setattr__(self, "phi_ext", phi)
        object.__setattr__(self, "frequency", freq)
        object.__setattr__(self, "label", label.astype(str))
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "exclusion_windows", _check_windows(self.exclusion_windows))

    @classmethod
    def from_sigma(cls, phi_ext, frequency, sigma, label=None, exclusion_windows=()):
        """Build with per-point uncertainties (GHz); weight = 1/sigma^2."""
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise DataError("sigma must be positive")
        return cls(phi_ext, frequency, label, 1.0 / sigma**2, exclusion_windows)

    def __len__(self):
        return self.phi_ext.size

    @property
    def upper_level(self):
        return np.array([LABEL_LEVEL[x] for x in self.label], dtype=int)

    @property
    def included(self):
        """Boolean mask of points outside every exclusion window."""
        keep = self.weight > 0
        for lo, hi in self.exclusion_windows:
            keep &= ~((self.phi_ext >= lo) & (self.phi_ext <= hi))
        return keep

    def with_windows(self, windows):
        return SpectroscopyDataset(self.phi_ext, self.frequency, self.label, self.weight, windows)

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return SpectroscopyDataset(
            self.phi_ext[mask], self.frequency[mask], self.label[mask], self.weight[mask], self.exclusion_windows
        )

    def as_xy(self):
        """sklearn-style ``(X, y, sample_weight)`` for the included points."""
        m = self.included
        X = np.column_stack([self.phi_ext[m], self.upper_level[m]])
        return X, self.frequency[m], self.weight[m]


def default_exclusion_windows(data, centers=(7.4, 13.1), half_width=1.0):
    """Flux windows around points lying within ``half_width`` GHz of an
    external mode (readout resonator and first array mode by default).

    Each window spans a contiguous run (in sorted flux) of such points and
    is padded halfway to the neighbouring samples.  Overlapping windows are
    merged.
    """
    order = np.argsort(data.phi_ext, kind="stable")
    phi = data.phi_ext[order]
    near = np.zeros(phi.size, dtype=bool)
    for c in centers:
        near |= np.abs(data.frequency[order] - c) < half_width
    if not near.any():
        return ()
    uniq = np.unique(phi)
    near_flux = np.unique(phi[near])
    windows = []
    for p in near_flux:
        k = np.searchsorted(uniq, p)
        lo = 0.5 * (uniq[k - 1] + p) if k > 0 else p
        hi = 0.5 * (uniq[k + 1] + p) if k + 1 < uniq.size else p
        # stop just short of the neighbouring samples so they stay included
        lo = p if k == 0 else math.nextafter(lo, p)
        hi = p if k + 1 == uniq.size else math.nextafter(hi, p)
        if windows and lo <= windows[-1][1] or windows and np.isclose(lo, windows[-1][1]):
            windows[-1] = (windows[-1][0], hi)
        else:
            windows.append((lo, hi))
    merged = []
    for w in windows:
        if merged and w[0] <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(w[1], merged[-1][1]))
        else:
            merged.append(w)
    return tuple(merged)


# -- reports ------------------------------------------------------------------


def _rms(values):
    return float(np.sqrt(np.mean(np.square(values)))) if values.size else math.nan


@dataclass
class FitReport:
    """Outcome of a spectrum fit.

    ``residuals`` are model minus data in GHz for every point of the dataset
    (excluded ones too, for plotting); ``mask`` marks the points that
    entered the fit and ``rms_residual`` is computed over those.  The
    covariance is over ``param_names`` in physical units.
    """

    params_hat: CircuitParams
    residuals: np.ndarray
    mask: np.ndarray
    rms_residual: float
    covariance: np.ndarray
    param_names: tuple
    n_evals: int
    converged: bool
    cphir: CphiRModel
    coordinates: str = "energy"
    optimality: float = math.nan
    cost: float = math.nan
    degenerate: bool = False
    correlated_pairs: list = field(default_factory=list)
    message: str = ""
    phi_ext: np.ndarray = None
    resonator: object = None

    @property
    def stderr(self):
        return dict(zip(self.param_names, np.sqrt(np.clip(np.diag(self.covariance), 0, None))))

    def value(self, name):
        if name == "c_sigma_ff":
            return self.params_hat.c_sigma_ff
        if name == "l_q_nh":
            return self.params_hat.l_q_nh
        return getattr(self.params_hat, name)

    def to_dict(self):
        return {
            "params_hat": {
                "e_j_ghz": self.params_hat.e_j,
                "e_c_ghz": self.params_hat.e_c_sigma,
                "e_l_ghz": self.params_hat.e_l,
                "c_sigma_ff": self.params_hat.c_sigma_ff,
                "l_q_nh": self.params_hat.l_q_nh,
            },
            "param_names": list(self.param_names),
            "coordinates": self.coordinates,
            "stderr": self.stderr,
            "covariance": self.covariance.tolist(),
            "rms_residual_ghz": self.rms_residual,
            "residuals_ghz": self.residuals.tolist(),
            "phi_ext": None if self.phi_ext is None else self.phi_ext.tolist(),
            "mask": self.mask.astype(bool).tolist(),
            "n_evals": self.n_evals,
            "converged": self.converged,
            "optimality": self.optimality,
            "degenerate": self.degenerate,
            "correlated_pairs": [list(p) for p in self.correlated_pairs],
            "cphir": list(self.cphir.harmonics),
            "message": self.message,
        }


def _covariance(jac, resid, n_free):
    """Scaled covariance (JᵀJ)⁻¹ s² in the solver coordinates.

    Returns ``(cov, degenerate)``; near-singular directions are dropped via
    a truncated pseudo-inverse and flagged.
    """
    m = resid.size
    dof = max(m - n_free, 1)
    s2 = float(resid @ resid) / dof
    _, sv, vt = np.linalg.svd(jac, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        return np.full((n_free, n_free), np.inf), True
    keep = sv > sv[0] * 1e-8
    inv = (vt[keep].T / sv[keep] ** 2) @ vt[keep]
    degenerate = not keep.all() or sv[-1] / sv[0] < 1e-6
    return s2 * inv, degenerate


def _correlated(cov, names, threshold=0.999):
    d = np.sqrt(np.clip(np.diag(cov), 0, None))
    pairs = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            if d[i] > 0 and d[j] > 0 and abs(cov[i, j] / (d[i] * d[j])) > threshold:
                pairs.append((names[i], names[j]))
    return pairs


# -- spectrum objective -------------------------------------------------------


class _SpectrumObjective:
    """Weighted residual vector and Jacobian over log-parameters.

    ``x`` holds log-values of the free coordinates; fixed ones come from
    ``base``.  Log energy coordinates u relate to circuit ones v by
    u = log K - v for the capacitance and inductance entries.
    """

    def __init__(self, model, phi, level, freq, sqrt_w, coordinates, free, base_log):
        self.model = model
        self.uphi, self.inv = np.unique(phi, return_inverse=True)
        self.level = level
        self.freq = freq
        self.sqrt_w = sqrt_w
        self.coordinates = coordinates
        self.names = ENERGY_COORDS if coordinates == "energy" else CIRCUIT_COORDS
        self.free_idx = [self.names.index(f) for f in free]
        self.base = np.array(base_log, dtype=float)
        self.n_evals = 0
        self._cache = (None, None, None)

    def full(self, x):
        v = self.base.copy()
        v[self.free_idx] = x
        return v

    def energies_of(self, v):
        if self.coordinates == "energy":
            return np.exp(v)
        return np.array([math.exp(v[0]), _K_C / math.exp(v[1]), _K_L / math.exp(v[2])])

    def _eval(self, x, grad):
        key = np.asarray(x, dtype=float).tobytes()
        if self._cache[0] == key and (self._cache[2] is not None or not grad):
            return self._cache[1], self._cache[2]
        p = self.energies_of(self.full(x))
        self.n_evals += 1
        e, dp, _ = self.model.evaluate(p[0], p[1], p[2], self.uphi, grad=grad)
        e0 = e[self.inv, 0]
        f_model = e[self.inv, self.level] - e0
        r = self.sqrt_w * (f_model - self.freq)
        jac = None
        if grad:
            dfd = dp[self.inv, self.level, :] - dp[self.inv, 0, :]
            dlog = dfd * p[None, :]
            if self.coordinates == "circuit":
                dlog[:, 1:] *= -1.0
            jac = self.sqrt_w[:, None] * dlog[:, self.free_idx]
        self._cache = (key, r, jac)
        return r, jac

    def residual(self, x):
        return self._eval(x, False)[0]

    def jacobian(self, x):
        return self._eval(x, True)[1]


def _log_coords(params, coordinates):
    if coordinates == "energy":
        return np.log([params.e_j, params.e_c_sigma, params.e_l])
    return np.log([params.e_j, params.c_sigma_ff, params.l_q_nh])


def _params_from_log(v, coordinates, phi_ext=0.0):
    if coordinates == "energy":
        e_j, e_c, e_l = np.exp(v)
    else:
        e_j, e_c, e_l = math.exp(v[0]), _K_C / math.exp(v[1]), _K_L / math.exp(v[2])
    return CircuitParams(float(e_j), float(e_c), float(e_l), phi_ext)


def _multistart(objective, x0, n_starts, n_refine, spread, rng, max_nfev, bounds=(-np.inf, np.inf)):
    """Screen a Latin hypercube of starts by cost, refine the best few."""
    k = x0.size
    starts = [x0]
    if n_starts > 1:
        sampler = qmc.LatinHypercube(d=k, seed=rng)
        box = sampler.random(n_starts - 1)
        starts += list(x0 + spread * (2 * box - 1))
    costs = [0.5 * float(np.sum(objective.residual(s) ** 2)) for s in starts]
    order = np.argsort(costs, kind="stable")[: max(1, n_refine)]
    best = None
    for i in order:
        res = optimize.least_squares(
            objective.residual,
            starts[i],
            jac=objective.jacobian,
            method="trf",
            bounds=bounds,
            x_scale=1.0,
            ftol=1e-14,
            xtol=1e-14,
            gtol=1e-12,
            max_nfev=max_nfev,
        )
        if best is None or res.cost < best.cost:
            best = res
    return best


class SpectrumFitter(BaseEstimator, RegressorMixin):
    """Estimator fitting circuit parameters to transition frequencies.

    ``X`` has two columns: external flux and the upper level of the
    transition out of the ground state (1 for g->e, 2 for g->f); ``y`` is
    the frequency in GHz.

    Parameters
    ----------
    init : CircuitParams
        Starting point; also supplies the values of fixed parameters.
    cphir : CphiRModel
    free : tuple of str
        Names of the fitted coordinates.
    coordinates : {"energy", "circuit"}
        Fit in (e_j, e_c_sigma, e_l) or (e_j, c_sigma_ff, l_q_nh).
    n_starts, n_refine : int
        Latin-hypercube starts screened by cost, and how many of the best
        are refined by the local solver.
    spread : float
        Half-width of the start box in log units.
    model_tol : float
        Truncation tolerance (GHz) of the oscillator basis used during the fit.
    """

    def __init__(
        self,
        init=None,
        cphir=SINUSOIDAL,
        free=ENERGY_COORDS,
        coordinates="energy",
        n_starts=16,
        n_refine=2,
        spread=0.1,
        model_tol=1e-7,
        max_nfev=200,
        random_state=0,
    ):
        self.init = init
        self.cphir = cphir
        self.free = free
        self.coordinates = coordinates
        self.n_starts = n_starts
        self.n_refine = n_refine
        self.spread = spread
        self.model_tol = model_tol
        self.max_nfev = max_nfev
        self.random_state = random_state

    def _check_config(self, n_points):
        if self.init is None:
            raise ParameterError("init parameters are required", "init")
        validate(self.init)
        if self.coordinates not in ("energy", "circuit"):
            raise ParameterError(f"unknown coordinates {self.coordinates!r}", "coordinates")
        names = ENERGY_COORDS if self.coordinates == "energy" else CIRCUIT_COORDS
        free = tuple(self.free)
        if self.coordinates == "circuit":
            free = tuple({"e_c_sigma": "c_sigma_ff", "e_l": "l_q_nh"}.get(f, f) for f in free)
        unknown = set(free) - set(names)
        if unknown or not free:
            raise ParameterError(f"free parameters must be a non-empty subset of {names}", "free")
        free = tuple(n for n in names if n in free)
        if n_points < 2 * len(free):
            raise DataError(f"{n_points} points for {len(free)} free parameters; need at least twice as many")
        return names, free

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if X.shape[1] != 2:
            raise DataError("X must have columns (phi_ext, upper_level)")
        names, free = self._check_config(y.size)
        level = X[:, 1].astype(int)
        if np.any(level < 1) or np.any(level != X[:, 1]):
            raise DataError("upper_level column must hold positive integers")
        w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        n_levels = int(level.max()) + 1
        model = SpectrumModel.for_params(self.init, self.cphir, n_levels=n_levels, tol=self.model_tol)
        base = _log_coords(self.init, self.coordinates)
        obj = _SpectrumObjective(model, X[:, 0], level, y, np.sqrt(w), self.coordinates, free, base)
        x0 = base[obj.free_idx]
        rng = np.random.default_rng(self.random_state)
        res = _multistart(obj, x0, self.n_starts, self.n_refine, self.spread, rng, self.max_nfev)

        v = obj.full(res.x)
        self.params_ = _params_from_log(v, self.coordinates)
        self.model_ = model
        jac = obj.jacobian(res.x)
        wres = obj.residual(res.x)
        cov_log, degenerate = _covariance(jac, wres, len(free))
        scale = np.exp(res.x)
        cov = cov_log * np.outer(scale, scale)
        self.free_names_ = free
        self.covariance_ = 0.5 * (cov + cov.T)
        self.degenerate_ = degenerate
        self.correlated_pairs_ = _correlated(self.covariance_, free)
        self.n_evals_ = obj.n_evals
        self.converged_ = bool(res.status > 0)
        self.optimality_ = float(res.optimality)
        self.cost_ = float(res.cost)
        self.message_ = str(res.message)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        level = X[:, 1].astype(int)
        e, _, _ = self.model_.evaluate(self.params_.e_j, self.params_.e_c_sigma, self.params_.e_l, X[:, 0])
        return e[np.arange(level.size), level] - e[:, 0]

    def fit_dataset(self, data):
        X, y, w = data.as_xy()
        return self.fit(X, y, sample_weight=w)

    def report(self, data):
        """:class:`FitReport` of the fitted estimator against ``data``."""
        check_is_fitted(self, "params_")
        X_all = np.column_stack([data.phi_ext, data.upper_level])
        residuals = self.predict(X_all) - data.frequency
        mask = data.included
        return FitReport(
            params_hat=self.params_,
            residuals=residuals,
            mask=mask,
            rms_residual=_rms(residuals[mask]),
            covariance=self.covariance_,
            param_names=self.free_names_,
            n_evals=self.n_evals_,
            converged=self.converged_,
            cphir=self.cphir,
            coordinates=self.coordinates,
            optimality=self.optimality_,
            cost=self.cost_,
            degenerate=self.degenerate_,
            correlated_pairs=self.correlated_pairs_,
            message=self.message_,
            phi_ext=data.phi_ext,
        )


def fit_spectrum(data, cphir=SINUSOIDAL, init=None, free=ENERGY_COORDS, **options):
    """Fit a spectroscopy dataset; returns a :class:`FitReport`.

    Extra keyword arguments go to :class:`SpectrumFitter`.
    """
    fitter = SpectrumFitter(init=init, cphir=cphir, free=free, **options)
    return fitter.fit_dataset(data).report(data)


@dataclass
class CphiRComparison:
    """One model's refit and its residual-versus-flux curve."""

    model: CphiRModel
    report: FitReport

    @property
    def max_abs_residual(self):
        r = self.report.residuals[self.report.mask]
        return float(np.max(np.abs(r)))

    def residual_curve(self):
        m = self.report.mask
        order = np.argsort(self.report.phi_ext[m], kind="stable")
        return self.report.phi_ext[m][order], self.report.residuals[m][order]


def compare_cphir(data, models, init, free=ENERGY_COORDS, **options):
    """Refit each current-phase model independently.

    ``options`` may hold a per-model ``model_tol`` mapping keyed by model
    name under ``model_tols``.
    """
    tols = options.pop("model_tols", {})
    out = []
    for model in models:
        opts = dict(options)
        if model.name in tols:
            opts["model_tol"] = tols[model.name]
        out.append(CphiRComparison(model, fit_spectrum(data, model, init, free, **opts)))
    return out


# -- two-junction fit ---------------------------------------------------------


@dataclass
class TwoJunctionResult:
    """Joint fit with shared (E_C, E_L) and two Josephson energies.

    ``report_low`` / ``report_high`` carry the branch with the smaller /
    larger E_J; ``assignment`` is 0 (low) or 1 (high) per dataset point.
    ``split_significant`` is False when the branch separation is no larger
    than what nearest-branch assignment of single-branch noise produces; the
    result then collapses onto the shared-E_J fit (``delta_ej`` = 0) and the
    split the assignment loop settled on is kept in ``raw_delta_ej``.
    """

    report_low: FitReport
    report_high: FitReport
    delta_ej: float
    delta_ej_err: float
    assignment: np.ndarray
    n_iterations: int
    covariance: np.ndarray
    split_significant: bool
    separation_ratio: float
    raw_delta_ej: float = math.nan

    def to_dict(self):
        return {
            "delta_ej_ghz": self.delta_ej,
            "delta_ej_err_ghz": self.delta_ej_err,
            "raw_delta_ej_ghz": self.raw_delta_ej,
            "e_j_low_ghz": self.report_low.params_hat.e_j,
            "e_j_high_ghz": self.report_high.params_hat.e_j,
            "e_c_ghz": self.report_low.params_hat.e_c_sigma,
            "e_l_ghz": self.report_low.params_hat.e_l,
            "n_iterations": self.n_iterations,
            "split_significant": self.split_significant,
            "separation_ratio": self.separation_ratio,
            "assignment": self.assignment.tolist(),
            "covariance": self.covariance.tolist(),
            "low": self.report_low.to_dict(),
            "high": self.report_high.to_dict(),
        }


def _assign(f_low, f_high, freq):
    d_low = np.abs(freq - f_low)
    d_high = np.abs(freq - f_high)
    # ties go to the lower-E_J branch
    return (d_high < d_low).astype(int)


# Nearest-branch assignment of unimodal Gaussian noise splits it into two
# half-normal clusters whose centre separation is 2*sqrt(2/pi) times the
# within-cluster spread sqrt(1 - 2/pi); real splits sit well above that.
_NOISE_SEPARATION = 2 * math.sqrt(2 / math.pi) / math.sqrt(1 - 2 / math.pi)


def fit_two_ej(data, init, cphir=SINUSOIDAL, max_iter=10, model_tol=1e-7, n_starts=8, random_state=0, collapse=True):
    """Fit two interleaved spectral branches differing only in E_J.

    Every point is assigned to the branch whose model line is nearer, the
    joint fit is redone, and the two steps alternate until the assignment
    stops changing.  With ``collapse`` an insignificant split (see
    :class:`TwoJunctionResult`) is replaced by the shared-E_J fit.

    Raises
    ------
    ConvergenceError
        If the assignment still changes after ``max_iter`` rounds; the last
        assignment is attached as ``result``.
    """
    mask = data.included
    phi = data.phi_ext[mask]
    freq = data.frequency[mask]
    level = data.upper_level[mask]
    sqrt_w = np.sqrt(data.weight[mask])
    if freq.size < 8:
        raise DataError("two-branch fit needs at least 8 points")

    single = SpectrumFitter(init=init, cphir=cphir, model_tol=model_tol, n_starts=n_starts, random_state=random_state)
    single.fit(np.column_stack([phi, level]), freq, sqrt_w**2)
    p1 = single.params_
    model = single.model_
    uphi, inv = np.unique(phi, return_inverse=True)

    def branch(e_j, e_c, e_l, grad=False):
        e, dp, _ = model.evaluate(e_j, e_c, e_l, uphi, grad=grad)
        f = e[inv, level] - e[inv, 0]
        if not grad:
            return f, None
        return f, dp[inv, level, :] - dp[inv, 0, :]

    f1, d1 = branch(p1.e_j, p1.e_c_sigma, p1.e_l, grad=True)
    r1 = freq - f1
    s = d1[:, 0]
    delta0 = 2 * float(np.sum(np.abs(r1 * s)) / max(np.sum(s**2), 1e-300))
    x = np.log([max(p1.e_j - delta0 / 2, 1e-9), p1.e_j + delta0 / 2, p1.e_c_sigma, p1.e_l])
    if delta0 <= 0:
        x[1] = x[0]

    counter = {"n": 0}

    def evaluate(xv, assignment, grad):
        p = np.exp(xv)
        counter["n"] += 2
        fa, da = branch(p[0], p[2], p[3], grad)
        fb, db = branch(p[1], p[2], p[3], grad)
        f_model = np.where(assignment == 1, fb, fa)
        r = sqrt_w * (f_model - freq)
        if not grad:
            return r, None, fa, fb
        d = np.where(assignment[:, None] == 1, db, da)
        jac = np.zeros((freq.size, 4))
        jac[:, 0] = np.where(assignment == 0, d[:, 0], 0.0) * p[0]
        jac[:, 1] = np.where(assignment == 1, d[:, 0], 0.0) * p[1]
        jac[:, 2] = d[:, 1] * p[2]
        jac[:, 3] = d[:, 2] * p[3]
        return r, sqrt_w[:, None] * jac, fa, fb

    p = np.exp(x)
    fa, _ = branch(p[0], p[2], p[3])
    fb, _ = branch(p[1], p[2], p[3])
    assignment = _assign(fa, fb, freq)
    n_iter = 0
    res = None
    for n_iter in range(1, max_iter + 1):
        if assignment.all() or not assignment.any():
            # a single populated branch: both E_J collapse onto it
            x = np.log([p1.e_j, p1.e_j, p1.e_c_sigma, p1.e_l])
            res = None
            break
        res = optimize.least_squares(
            lambda xv, a=assignment: evaluate(xv, a, False)[0],
            x,
            jac=lambda xv, a=assignment: evaluate(xv, a, True)[1],
            method="trf",
            ftol=1e-14,
            xtol=1e-14,
            gtol=1e-12,
            max_nfev=200,
        )
        x = res.x
        _, _, fa, fb = evaluate(x, assignment, False)
        if x[0] > x[1]:
            x = x[[1, 0, 2, 3]]
            fa, fb = fb, fa
            assignment = 1 - assignment
        new = _assign(fa, fb, freq)
        if np.array_equal(new, assignment):
            break
        assignment = new
    else:
        raise ConvergenceError(
            f"branch assignment still changing after {max_iter} iterations",
            result=assignment,
        )

    p = np.exp(x)
    raw_delta = float(p[1] - p[0])
    delta_err = 0.0
    ratio = 0.0
    if res is not None:
        r, jac, fa, fb = evaluate(x, assignment, True)
        cov_log, degenerate = _covariance(jac, r, 4)
        cov = cov_log * np.outer(p, p)
        grad = np.array([-1.0, 1.0, 0.0, 0.0])
        delta_err = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
        converged = bool(res.status > 0)
        within = np.concatenate([(freq - fa)[assignment == 0], (freq - fb)[assignment == 1]])
        spread = float(np.std(within)) if within.size > 1 else 0.0
        sep = float(np.median(np.abs(fb - fa)))
        ratio = sep / spread if spread > 0 else math.inf
    significant = ratio > 1.5 * _NOISE_SEPARATION
    if not significant and collapse:
        # no evidence for two junction states: report the shared-E_J fit
        p = np.array([p1.e_j, p1.e_j, p1.e_c_sigma, p1.e_l])
        cov = np.zeros((4, 4))
        cov[np.ix_([0, 2, 3], [0, 2, 3])] = single.covariance_
        cov[1, :] = cov[0, :]
        cov[:, 1] = cov[:, 0]
        degenerate = True
        converged = single.converged_
        assignment = np.zeros_like(assignment)

    reports = []
    names = ("e_j", "e_c_sigma", "e_l")
    for b, e_j in enumerate((p[0], p[1])):
        params = CircuitParams(float(e_j), float(p[2]), float(p[3]))
        e, _, _ = model.evaluate(params.e_j, params.e_c_sigma, params.e_l, data.phi_ext)
        lv = data.upper_level
        residuals = e[np.arange(lv.size), lv] - e[:, 0] - data.frequency
        sub = np.ix_([b, 2, 3], [b, 2, 3])
        branch_mask = mask.copy()
        branch_mask[np.flatnonzero(mask)[assignment != b]] = False
        reports.append(
            FitReport(
                params_hat=params,
                residuals=residuals,
                mask=branch_mask,
                rms_residual=_rms(residuals[branch_mask]),
                covariance=cov[sub],
                param_names=names,
                n_evals=counter["n"] + single.n_evals_,
                converged=converged,
                cphir=cphir,
                degenerate=degenerate,
                phi_ext=data.phi_ext,
            )
        )
    full_assignment = np.full(len(data), -1)
    full_assignment[mask] = assignment
    return TwoJunctionResult(
        report_low=reports[0],
        report_high=reports[1],
        delta_ej=float(p[1] - p[0]),
        delta_ej_err=delta_err,
        raw_delta_ej=raw_delta,
        assignment=full_assignment,
        n_iterations=n_iter,
        covariance=cov,
        split_significant=bool(significant),
        separation_ratio=float(ratio),
    )


def branch_crossings(params, delta_ej, cphir=SINUSOIDAL, phi_range=(0.0, 0.5), n_grid=201, dim=None):
    """Flux values where the g->e lines of E_J and E_J + delta_ej intersect."""
    model = SpectrumModel(cphir, dim, 2) if dim else SpectrumModel.for_params(params, cphir, 2)
    hi = params.replace(e_j=params.e_j + delta_ej)

    def diff(phi):
        return float(model.transitions(params, [phi])[0, 0] - model.transitions(hi, [phi])[0, 0])

    grid = np.linspace(phi_range[0], phi_range[1], n_grid)
    values = model.transitions(params, grid)[:, 0] - model.transitions(hi, grid)[:, 0]
    roots = []
    for a, b, va, vb in zip(grid[:-1], grid[1:], values[:-1], values[1:]):
        if va == 0:
            roots.append(float(a))
        elif va * vb < 0:
            roots.append(float(optimize.brentq(diff, a, b, xtol=1e-10)))
    return roots


# -- reflection fit -----------------------------------------------------------


def _wrap(x):
    return np.angle(np.exp(1j * x))


def _resonance_guess(f, phase):
    order = np.argsort(f)
    f, ph = f[order], np.unwrap(phase[order])
    slope = np.abs(np.gradient(ph, f))
    k = int(np.argmax(slope))
    total = ph[-1] - ph[0]
    return f[k], ph, f, total


class ReflectionFitter(BaseEstimator):
    """Fit (f0, kappa, chi, coupling_ratio) to reflection phases.

    ``X`` has columns (probe frequency in GHz, qubit state flag with 0 = g
    and 1 = e); ``y`` is the measured phase in radians.  Residuals are
    wrapped phase differences.

    The coupling ratio is held at ``coupling_ratio`` (critical coupling by
    default) unless ``fit_coupling_ratio`` is set; near critical coupling
    phase data alone barely separate kappa from the ratio, so freeing it
    trades a few percent of kappa accuracy for the extra parameter.
    """

    def __init__(self, fit_coupling_ratio=False, coupling_ratio=1.0, min_phase_span=math.pi / 2):
        self.fit_coupling_ratio = fit_coupling_ratio
        self.coupling_ratio = coupling_ratio
        self.min_phase_span = min_phase_span

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != 2:
            raise DataError("X must have columns (f_ghz, state)")
        state = X[:, 1].astype(int)
        if not set(np.unique(state)) <= {0, 1}:
            raise DataError("state column must be 0 (g) or 1 (e)")
        guesses = {}
        for s in (0, 1):
            sel = state == s
            if sel.sum() < 5:
                raise DataError(f"need at least 5 phase points for state {'ge'[s]}")
            f_res, _, _, total = _resonance_guess(X[sel, 0], y[sel])
            if abs(total) < self.min_phase_span:
                raise DataError(
                    f"phase data for state {'ge'[s]} changes by only {math.degrees(abs(total)):.1f} deg; "
                    "sweep does not span the resonance"
                )
            guesses[s] = f_res
        f_ref = 0.5 * (guesses[0] + guesses[1])
        chi0 = (guesses[1] - guesses[0]) * 1e3
        # half-power width from the unwrapped phase swing of the g branch
        sel = state == 0
        _, ph, fs, total = _resonance_guess(X[sel, 0], y[sel])
        frac = (ph - ph[0]) / total
        lo = fs[np.searchsorted(frac, 0.25)] if np.any(frac >= 0.25) else fs[0]
        hi = fs[min(np.searchsorted(frac, 0.75), fs.size - 1)]
        kappa0 = max(abs(hi - lo) * 1e3, 1e-3)

        f = X[:, 0]

        def model_phase(p):
            df0, log_k, chi, ratio = p
            m = ReflectionModel(f_ref + df0 * 1e-3, math.exp(log_k), chi, min(ratio, 1.0))
            return np.where(state == 1, reflection_phase(m, f, "e"), reflection_phase(m, f, "g"))

        def residual(p):
            full = p if self.fit_coupling_ratio else np.append(p, self.coupling_ratio)
            return _wrap(model_phase(full) - y)

        x0 = [0.0, math.log(kappa0), chi0]
        lb, ub = [-np.inf, -np.inf, -np.inf], [np.inf, np.inf, np.inf]
        if self.fit_coupling_ratio:
            x0.append(0.9)
            lb.append(1e-6)
            ub.append(1.0)
        best = None
        for scale in (1.0, 0.5, 2.0):
            start = np.array(x0, dtype=float)
            start[1] += math.log(scale)
            res = optimize.least_squares(residual, start, bounds=(lb, ub), method="trf", x_scale="jac")
            if best is None or res.cost < best.cost:
                best = res
        p = best.x if self.fit_coupling_ratio else np.append(best.x, self.coupling_ratio)
        self.model_ = ReflectionModel(f_ref + p[0] * 1e-3, math.exp(p[1]), float(p[2]), float(min(p[3], 1.0)))
        cov, self.degenerate_ = _covariance(best.jac, best.fun, best.x.size)
        # (df0 MHz, log kappa, chi MHz, ratio) -> (f0 GHz, kappa MHz, chi MHz, ratio)
        d = np.array([1e-3, self.model_.kappa, 1.0, 1.0])[: best.x.size]
        self.covariance_ = cov * np.outer(d, d)
        self.stderr_ = dict(zip(("f0", "kappa", "chi", "coupling_ratio"), np.sqrt(np.clip(np.diag(self.covariance_), 0, None))))
        self.residuals_ = best.fun
        self.rms_residual_ = _rms(best.fun)
        self.converged_ = bool(best.status > 0)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        state = X[:, 1].astype(int)
        return np.where(
            state == 1, reflection_phase(self.model_, X[:, 0], "e"), reflection_phase(self.model_, X[:, 0], "g")
        )


def fit_reflection(f_g, phase_g, f_e, phase_e, fit_coupling_ratio=False, coupling_ratio=1.0):
    """Fit reflection phases (radians) measured with the qubit in g and in e.

    Returns the fitted :class:`ReflectionModel` and the estimator (which
    holds standard errors and residuals).
    """
    f_g, f_e = np.asarray(f_g, dtype=float), np.asarray(f_e, dtype=float)
    X = np.column_stack([np.concatenate([f_g, f_e]), np.r_[np.zeros(f_g.size), np.ones(f_e.size)]])
    y = np.concatenate([np.asarray(phase_g, dtype=float), np.asarray(phase_e, dtype=float)])
    est = ReflectionFitter(fit_coupling_ratio=fit_coupling_ratio, coupling_ratio=coupling_ratio).fit(X, y)
    return est.model_, est
