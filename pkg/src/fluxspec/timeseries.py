"""Time-domain analysis: decay and Ramsey fits, IQ state discrimination,
quantum-jump segmentation, dwell statistics and noise spectra.

Times are in µs unless a function says otherwise; PSD routines take the
sample spacing in seconds and frequencies in Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.mixture import GaussianMixture
from sklearn.utils.validation import check_array, check_is_fitted

from . import constants as const
from .exceptions import ConvergenceError, DataError, SNRError

__all__ = [
    "IQTrace",
    "DecayFit",
    "RamseyFit",
    "IQHistogramFit",
    "JumpRecord",
    "DwellEstimate",
    "PsdEstimate",
    "RtnFit",
    "DecayFitter",
    "LatchingFilter",
    "fit_exponential_decay",
    "fit_ramsey_two_tone",
    "frequency_jumps",
    "histogram_iq",
    "latch_filter",
    "dwell_mle",
    "effective_temperature",
    "estimate_psd",
    "fit_rtn_psd",
    "rtn_lorentzian",
]


@dataclass
class IQTrace:
    """Demodulated readout samples (√photon units) spaced by ``dt`` µs."""

    samples: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex).ravel()
        if not self.dt > 0:
            raise DataError(f"dt must be positive, got {self.dt!r}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("IQ samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size * self.dt


def _cov_from_jac(jac, resid):
    dof = max(resid.size - jac.shape[1], 1)
    s2 = float(resid @ resid) / dof
    jtj = jac.T @ jac
    try:
        return s2 * np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        return np.full(jtj.shape, np.inf)


# -- exponential decay --------------------------------------------------------


@dataclass
class DecayFit:
    """A exp(-t/T) + B; ``t_decay`` carries the time unit of the input."""

    t_decay: float
    amplitude: float
    offset: float
    stderr: dict
    rms_residual: float


class DecayFitter(BaseEstimator):
    """Least-squares fit of a single exponential decay.

    ``X`` is a single column of times; ``y`` the measured population.
    """

    def __init__(self, max_span_ratio=1e4):
        self.max_span_ratio = max_span_ratio

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        t = X[:, 0]
        y = np.asarray(y, dtype=float)
        if t.size < 6 or y.size != t.size:
            raise DataError("exponential fit needs at least 6 matching points")
        if np.any(np.diff(t) <= 0):
            raise DataError("times must be strictly increasing")
        span = t[-1] - t[0]
        scale = max(np.max(np.abs(y)), 1e-300)
        if np.ptp(y) <= 1e-12 * scale:
            raise DataError("data do not decay (constant signal)")

        t0 = t[0]
        tau = t - t0

        def resid(p):
            a, log_t, b = p
            return a * np.exp(-tau / math.exp(log_t)) + b - y

        def jac(p):
            a, log_t, _ = p
            T = math.exp(log_t)
            e = np.exp(-tau / T)
            return np.column_stack([e, a * e * tau / T, np.ones_like(tau)])

        best = None
        for frac in (0.1, 0.3, 1.0):
            p0 = [y[0] - y[-1], math.log(frac * span), y[-1]]
            res = optimize.least_squares(resid, p0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
            if best is None or res.cost < best.cost:
                best = res
        a, log_t, b = best.x
        T = math.exp(log_t)
        if not math.isfinite(T) or T > self.max_span_ratio * span:
            raise DataError(f"fitted decay time {T:.3g} is not resolved by a span of {span:.3g}")
        cov = _cov_from_jac(best.jac, best.fun)
        err = np.sqrt(np.clip(np.diag(cov), 0, None))
        if abs(a) <= 1e-12 * scale or (np.isfinite(err[0]) and err[0] > 0 and abs(a) < 2 * err[0]):
            raise DataError("decay amplitude is not significant")
        # the fit is referenced to the first sample; move A back to t = 0
        self.result_ = DecayFit(
            t_decay=T,
            amplitude=float(a * math.exp(t0 / T)),
            offset=float(b),
            stderr={"t_decay": float(err[1] * T), "amplitude": float(err[0]), "offset": float(err[2])},
            rms_residual=float(np.sqrt(np.mean(best.fun**2))),
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        t = check_array(X, dtype=float)[:, 0]
        r = self.result_
        return r.amplitude * np.exp(-t / r.t_decay) + r.offset


def fit_exponential_decay(times, populations):
    """Fit A exp(-t/T) + B; returns a :class:`DecayFit`."""
    t = np.asarray(times, dtype=float).reshape(-1, 1)
    return DecayFitter().fit(t, populations).result_


# -- Ramsey -------------------------------------------------------------------


@dataclass
class RamseyFit:
    """Ramsey fringe fit with one or two tones (MHz, µs).

    Model: A e^{-t/T2*} [cos(2 pi f1 t + p1) + r cos(2 pi f2 t + p2)] + B.
    For a single tone ``f2`` and ``ratio`` are None.
    """

    f1: float
    f2: float | None
    t2_star: float
    amplitude: float
    ratio: float | None
    phases: tuple
    offset: float
    two_tone: bool
    p_value: float
    stderr: dict
    span_ok: bool = True
    rss: float = math.nan
    single_tone: "RamseyFit" = None

    @property
    def f_beating(self):
        return None if self.f2 is None else abs(self.f1 - self.f2)

    @property
    def mean_frequency(self):
        """Amplitude-weighted mean of the tones."""
        if self.f2 is None:
            return self.f1
        return (self.f1 + self.ratio * self.f2) / (1 + self.ratio)

    def to_dict(self):
        return {
            "f1_mhz": self.f1,
            "f2_mhz": self.f2,
            "f_beating_mhz": self.f_beating,
            "t2_star_us": self.t2_star,
            "amplitude": self.amplitude,
            "ratio": self.ratio,
            "phases": list(self.phases),
            "offset": self.offset,
            "two_tone": self.two_tone,
            "p_value": self.p_value,
            "span_ok": self.span_ok,
            "stderr": self.stderr,
        }


def _one_tone(p, t):
    a, f, ph, log_t2, b = p
    return a * np.exp(-t / math.exp(log_t2)) * np.cos(2 * np.pi * f * t + ph) + b


def _two_tone(p, t):
    a, f1, ph1, r, f2, ph2, log_t2, b = p
    env = a * np.exp(-t / math.exp(log_t2))
    return env * (np.cos(2 * np.pi * f1 * t + ph1) + r * np.cos(2 * np.pi * f2 * t + ph2)) + b


def _fft_peaks(t, y, n_peaks=3):
    dt = t[1] - t[0]
    n = 16 * t.size
    spec = np.abs(np.fft.rfft((y - y.mean()) * np.hanning(t.size), n))
    freqs = np.fft.rfftfreq(n, dt)
    spec[0] = 0
    idx = [i for i in range(1, spec.size - 1) if spec[i] >= spec[i - 1] and spec[i] >= spec[i + 1]]
    idx.sort(key=lambda i: -spec[i])
    return [float(freqs[i]) for i in idx[:n_peaks]]


def fit_ramsey_two_tone(times, signal, alpha=0.01):
    """Fit one- and two-tone decaying fringes; keep the second tone only
    if an F-test rejects the single tone at level ``alpha``.

    Raises
    ------
    ConvergenceError
        If the two-tone optimisation fails; the single-tone fit is attached
        as ``result``.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(signal, dtype=float)
    if t.size < 12 or y.size != t.size:
        raise DataError("Ramsey fit needs at least 12 matching points")
    if np.any(np.diff(t) <= 0):
        raise DataError("times must be strictly increasing")
    span = t[-1] - t[0]
    peaks = _fft_peaks(t, y)
    if not peaks:
        raise DataError("no oscillation found in the Ramsey signal")
    amp0 = 0.5 * np.ptp(y)
    b0 = float(np.mean(y))

    best1 = None
    for f0 in peaks[:2]:
        for ph in (0.0, np.pi / 2, np.pi, -np.pi / 2):
            p0 = [amp0, f0, ph, math.log(span / 2), b0]
            res = optimize.least_squares(lambda p: _one_tone(p, t) - y, p0, method="lm", max_nfev=4000)
            if best1 is None or res.cost < best1.cost:
                best1 = res
    rss1 = 2 * best1.cost
    cov1 = _cov_from_jac(best1.jac, best1.fun)
    e1 = np.sqrt(np.clip(np.diag(cov1), 0, None))
    a, f, ph, log_t2, b = best1.x
    if f < 0:
        f, ph = -f, -ph
    if a < 0:
        a, ph = -a, ph + np.pi
    single = RamseyFit(
        f1=float(f), f2=None, t2_star=math.exp(log_t2), amplitude=float(a), ratio=None,
        phases=(float(_wrap(ph)),), offset=float(b), two_tone=False, p_value=1.0,
        stderr={"f1": float(e1[1]), "t2_star": float(e1[3] * math.exp(log_t2))}, rss=rss1,
    )

    # two-tone starts straddle the single-tone frequency
    deltas = {abs(p - f) for p in peaks[1:] if abs(p - f) > 0} | {0.5 / span, 1.0 / span, 2.0 / span, 4.0 / span}
    best2 = None
    for d in sorted(deltas):
        for sign in (-1.0, 1.0):
            for ph2 in (0.0, np.pi):
                p0 = [a / 2, f - sign * d / 2, ph, 1.0, f + sign * d / 2, ph + ph2, log_t2, b]
                try:
                    res = optimize.least_squares(lambda p: _two_tone(p, t) - y, p0, method="lm", max_nfev=4000)
                except (ValueError, np.linalg.LinAlgError):
                    continue
                if best2 is None or res.cost < best2.cost:
                    best2 = res
    if best2 is None or not np.all(np.isfinite(best2.x)):
        raise ConvergenceError("two-tone Ramsey fit failed", result=single)

    rss2 = 2 * best2.cost
    n, p1, p2 = t.size, 5, 8
    scale = max(float(np.sum((y - y.mean()) ** 2)), 1e-300)
    if rss1 <= 1e-20 * scale or rss2 >= rss1:
        p_value = 1.0
    else:
        F = ((rss1 - rss2) / (p2 - p1)) / (rss2 / (n - p2)) if rss2 > 0 else math.inf
        p_value = float(stats.f.sf(F, p2 - p1, n - p2)) if math.isfinite(F) else 0.0
    if p_value >= alpha:
        return single

    a, f1, ph1, r, f2, ph2, log_t2, b = best2.x
    if f1 < 0:
        f1, ph1 = -f1, -ph1
    if f2 < 0:
        f2, ph2 = -f2, -ph2
    if a < 0:
        a, ph1, ph2 = -a, ph1 + np.pi, ph2 + np.pi
    if r < 0:
        r, ph2 = -r, ph2 + np.pi
    # order the tones so that f1 carries the larger weight
    if r > 1:
        a, r = a * r, 1 / r
        f1, f2, ph1, ph2 = f2, f1, ph2, ph1
    cov2 = _cov_from_jac(best2.jac, best2.fun)
    e2 = np.sqrt(np.clip(np.diag(cov2), 0, None))
    beat = abs(f1 - f2)
    return RamseyFit(
        f1=float(f1), f2=float(f2), t2_star=math.exp(log_t2), amplitude=float(a), ratio=float(r),
        phases=(float(_wrap(ph1)), float(_wrap(ph2))), offset=float(b), two_tone=True, p_value=p_value,
        stderr={"f1": float(e2[1]), "f2": float(e2[4]), "t2_star": float(e2[6] * math.exp(log_t2))},
        span_ok=bool(span >= 1.5 / beat) if beat > 0 else False, rss=rss2, single_tone=single,
    )


def _wrap(x):
    return (x + np.pi) % (2 * np.pi) - np.pi


def frequency_jumps(fits):
    """Differences of the mean qubit frequency between consecutive records (MHz)."""
    means = np.array([f.mean_frequency for f in fits])
    return np.diff(means)


# -- IQ histogram and latching filter -----------------------------------------


@dataclass
class IQHistogramFit:
    """Double-Gaussian fit along the rotated I axis.

    ``angle`` rotates raw samples onto the axis carrying the state
    information (I' = Re(z e^{-i angle})); g is the more populated state
    and the axis is oriented so that mu_g < mu_e.  ``single_state`` is set
    when the minor weight is below 1e-3 or a single Gaussian describes the
    projection at least as well by BIC.
    """

    mu_g: float
    mu_e: float
    sigma_g: float
    sigma_e: float
    p_g: float
    p_e: float
    angle: float
    single_state: bool = False

    def project(self, samples):
        return np.real(np.asarray(samples) * np.exp(-1j * self.angle))

    @property
    def separation(self):
        return abs(self.mu_e - self.mu_g)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("mu_g", "mu_e", "sigma_g", "sigma_e", "p_g", "p_e", "angle", "single_state")}


def histogram_iq(trace, min_samples=10_000, random_state=0):
    """Rotate the IQ plane onto its principal axis and fit two Gaussians
    to the projected samples."""
    z = trace.samples if isinstance(trace, IQTrace) else np.asarray(trace, dtype=complex)
    if z.size < min_samples:
        raise DataError(f"{z.size} samples; need at least {min_samples} for a stable histogram fit")
    xy = np.column_stack([z.real, z.imag])
    cov = np.cov(xy, rowvar=False)
    w, v = np.linalg.eigh(cov)
    axis = v[:, np.argmax(w)]
    angle = math.atan2(axis[1], axis[0])
    x = np.real(z * np.exp(-1j * angle))

    gm = GaussianMixture(2, covariance_type="full", tol=1e-10, max_iter=2000, n_init=1,
                         reg_covar=1e-12, random_state=random_state)
    # deterministic start: one component at the bulk, one in the heavier tail
    med = float(np.median(x))
    q_lo, q_hi = np.quantile(x, [0.001, 0.999])
    tail = q_hi if (q_hi - med) > (med - q_lo) else q_lo
    mad = float(np.median(np.abs(x - med))) * 1.4826 or float(np.std(x)) or 1.0
    gm.set_params(means_init=[[med], [tail]], weights_init=[0.9, 0.1],
                  precisions_init=np.array([[[1 / mad**2]], [[1 / mad**2]]]))
    gm.fit(x.reshape(-1, 1))
    one = GaussianMixture(1, covariance_type="full", reg_covar=1e-12).fit(x.reshape(-1, 1))
    unimodal = one.bic(x.reshape(-1, 1)) <= gm.bic(x.reshape(-1, 1))
    mus = gm.means_.ravel()
    sig = np.sqrt(gm.covariances_.ravel())
    wts = gm.weights_
    g, e = (0, 1) if wts[0] >= wts[1] else (1, 0)
    if mus[g] > mus[e]:
        angle = angle + math.pi
        mus = -mus
    angle = float(_wrap(angle))
    return IQHistogramFit(
        mu_g=float(mus[g]), mu_e=float(mus[e]), sigma_g=float(sig[g]), sigma_e=float(sig[e]),
        p_g=float(wts[g]), p_e=float(wts[e]), angle=angle, single_state=bool(min(wts) < 1e-3 or unimodal),
    )


@dataclass
class JumpRecord:
    """Latched state trajectory and its dwell statistics.

    ``states`` is 0 for g and 1 for e per sample; ``transitions`` holds
    (index of the first sample in the new state, +1 for g->e / -1 for e->g).
    Dwell lists exclude the censored first and last segments.
    """

    states: np.ndarray
    transitions: np.ndarray
    dwell_g: np.ndarray
    dwell_e: np.ndarray
    dt: float
    filter_params: dict
    censored: tuple = (0, 0)

    @property
    def n_jumps(self):
        return len(self.transitions)

    def to_dict(self):
        return {
            "dt_us": self.dt,
            "n_samples": int(self.states.size),
            "transitions": self.transitions.tolist(),
            "dwell_g_us": self.dwell_g.tolist(),
            "dwell_e_us": self.dwell_e.tolist(),
            "filter_params": self.filter_params,
            "censored_samples": list(self.censored),
        }


def _latch(x, fit, band):
    gap = abs(fit.mu_e - fit.mu_g)
    reach = band * (fit.sigma_g + fit.sigma_e)
    if reach >= gap:
        raise SNRError(
            f"state bands overlap: band*(sigma_g + sigma_e) = {reach:.3g} >= |mu_e - mu_g| = {gap:.3g}"
        )
    in_g = np.abs(x - fit.mu_g) <= band * fit.sigma_g
    in_e = np.abs(x - fit.mu_e) <= band * fit.sigma_e
    label = np.where(in_e, 1, np.where(in_g, 0, -1))
    first = int(abs(x[0] - fit.mu_e) < abs(x[0] - fit.mu_g))
    idx = np.where(label >= 0, np.arange(x.size), -1)
    idx = np.maximum.accumulate(idx)
    return np.where(idx >= 0, label[np.clip(idx, 0, None)], first).astype(np.int8)


def latch_filter(trace, fit, band=2.0):
    """Two-threshold latching classification of the projected I quadrature.

    The state switches only when I enters the ``band``-sigma window around
    the other state's mean; the first sample takes the nearer mean.
    """
    z = trace.samples if isinstance(trace, IQTrace) else np.asarray(trace, dtype=complex)
    dt = trace.dt if isinstance(trace, IQTrace) else 1.0
    x = fit.project(z)
    states = _latch(x, fit, band)
    change = np.flatnonzero(np.diff(states)) + 1
    direction = np.where(states[change] == 1, 1, -1)
    transitions = np.column_stack([change, direction]).astype(int) if change.size else np.zeros((0, 2), dtype=int)
    edges = np.concatenate([[0], change, [states.size]])
    lengths = np.diff(edges)
    seg_state = states[edges[:-1]]
    inner = slice(1, -1)
    dwell_g = lengths[inner][seg_state[inner] == 0] * dt
    dwell_e = lengths[inner][seg_state[inner] == 1] * dt
    censored = (int(lengths[0]), int(lengths[-1])) if lengths.size > 1 else (int(lengths[0]), 0)
    return JumpRecord(
        states=states,
        transitions=transitions,
        dwell_g=dwell_g.astype(float),
        dwell_e=dwell_e.astype(float),
        dt=float(dt),
        filter_params={"mu_g": fit.mu_g, "mu_e": fit.mu_e, "sigma_g": fit.sigma_g, "sigma_e": fit.sigma_e,
                       "band": float(band), "angle": fit.angle},
        censored=censored,
    )


class LatchingFilter(BaseEstimator, ClassifierMixin):
    """Estimator wrapper: ``fit`` learns the double Gaussian, ``predict``
    latches states.  ``X`` holds (I, Q) columns."""

    def __init__(self, band=2.0, min_samples=10_000):
        self.band = band
        self.min_samples = min_samples

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.histogram_ = histogram_iq(X[:, 0] + 1j * X[:, 1], self.min_samples)
        self.classes_ = np.array([0, 1])
        return self

    def predict(self, X):
        check_is_fitted(self, "histogram_")
        X = check_array(X, dtype=float)
        return _latch(self.histogram_.project(X[:, 0] + 1j * X[:, 1]), self.histogram_, self.band)


# -- dwell statistics ---------------------------------------------------------


@dataclass
class DwellEstimate:
    """Exponential dwell-time MLE (µs) and derived quantities."""

    t_down: float
    t_up: float
    t1: float
    n_down: int
    n_up: int
    t_down_err: float
    t_up_err: float
    t_eff_mk: float | None = None

    def to_dict(self):
        return {
            "t_down_us": self.t_down,
            "t_up_us": self.t_up,
            "t1_us": self.t1,
            "n_dwell_e": self.n_down,
            "n_dwell_g": self.n_up,
            "t_down_err_us": self.t_down_err,
            "t_up_err_us": self.t_up_err,
            "t_eff_mk": self.t_eff_mk,
        }


def _geometric_mle(dwells, dt):
    """Mean dwell of an exponential observed on a grid of spacing dt.

    Run lengths k = dwell/dt are geometric with success 1 - exp(-dt/T); the
    MLE inverts mean(k) = 1/(1 - exp(-dt/T)).
    """
    mean = float(np.mean(dwells))
    if mean <= dt:
        return dt / 1e3
    return -dt / math.log1p(-dt / mean)


def effective_temperature(f01, t_up, t_down):
    """Detailed-balance temperature (mK) for a transition at f01 GHz.

    Returns inf when the rates balance and a negative value for inversion.
    """
    ratio = t_up / t_down
    if ratio == 1:
        return math.inf
    return const.PLANCK * f01 * const.GHZ / (const.BOLTZMANN * math.log(ratio)) * 1e3


def dwell_mle(record, f01=None, min_dwells=20):
    """T_down (mean e dwell), T_up (mean g dwell), composite T1 and T_eff."""
    n_e, n_g = record.dwell_e.size, record.dwell_g.size
    if n_e < min_dwells or n_g < min_dwells:
        raise DataError(f"too few complete dwells: {n_g} in g, {n_e} in e (need {min_dwells} each)")
    t_down = _geometric_mle(record.dwell_e, record.dt)
    t_up = _geometric_mle(record.dwell_g, record.dt)
    t1 = 1.0 / (1.0 / t_down + 1.0 / t_up)
    return DwellEstimate(
        t_down=t_down,
        t_up=t_up,
        t1=t1,
        n_down=n_e,
        n_up=n_g,
        t_down_err=t_down / math.sqrt(n_e),
        t_up_err=t_up / math.sqrt(n_g),
        t_eff_mk=None if f01 is None else effective_temperature(f01, t_up, t_down),
    )


# -- power spectra ------------------------------------------------------------


@dataclass
class PsdEstimate:
    """One-sided spectrum S(f) = 2 T |F(f)|^2 with F = DFT / N.

    The Nyquist bin (even N) carries T |F|^2 so that sum(power) * df equals
    the mean-removed variance exactly.  DC is dropped.
    """

    frequencies: np.ndarray
    power: np.ndarray
    n_averages: int
    total_duration: float
    variance: float = math.nan

    @property
    def df(self):
        return self.frequencies[1] - self.frequencies[0] if self.frequencies.size > 1 else math.nan


def estimate_psd(series, duration=None, n_traces=None, times=None):
    """Average one-sided PSD of one or more uniformly sampled traces.

    Parameters
    ----------
    series : array_like, shape (n_traces, n) or (n,)
    duration : float
        Length T of each trace in seconds (n samples spaced T/n).
    times : array_like, optional
        Sample times in seconds; must be uniform and then fix ``duration``.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    if n_traces is not None and x.shape[0] != n_traces:
        raise DataError(f"expected {n_traces} traces, got {x.shape[0]}")
    n = x.shape[1]
    if n < 4:
        raise DataError("traces need at least 4 samples")
    if times is not None:
        t = np.asarray(times, dtype=float)
        step = np.diff(t)
        if t.size != n or np.any(step <= 0) or np.ptp(step) > 1e-6 * np.mean(step):
            raise DataError("timestamps must be uniform and match the trace length")
        duration = float(np.mean(step)) * n
    if duration is None or not duration > 0:
        raise DataError("positive duration required")
    x = x - x.mean(axis=1, keepdims=True)
    F = np.fft.rfft(x, axis=1) / n
    p = 2 * duration * np.abs(F) ** 2
    if n % 2 == 0:
        p[:, -1] /= 2
    power = p[:, 1:].mean(axis=0)
    freqs = np.arange(1, F.shape[1]) / duration
    return PsdEstimate(freqs, power, x.shape[0], duration * x.shape[0], float(np.mean(np.var(x, axis=1))))


def rtn_lorentzian(f, gamma_rtn, b, s0):
    """b Γ² / (f² + Γ²) + S0."""
    f = np.asarray(f, dtype=float)
    return b * gamma_rtn**2 / (f**2 + gamma_rtn**2) + s0


@dataclass
class RtnFit:
    """Lorentzian-plus-white fit of a frequency-noise PSD."""

    gamma_rtn: float
    b: float
    s0: float
    stderr: dict
    p_value: float
    decade_coverage: bool

    def to_dict(self):
        return {"gamma_rtn_hz": self.gamma_rtn, "b_hz2_per_hz": self.b, "s0_hz2_per_hz": self.s0,
                "stderr": self.stderr, "p_value_vs_flat": self.p_value, "decade_coverage": self.decade_coverage}


def fit_rtn_psd(psd, alpha=0.01):
    """Least squares in log power for b Γ²/(f² + Γ²) + S0.

    Raises
    ------
    DataError
        When a flat spectrum explains the data (F-test at ``alpha``) or the
        fitted knee lies outside the measured band.
    """
    f = psd.frequencies
    s = psd.power
    if f.size < 8 or np.any(s <= 0):
        raise DataError("PSD needs at least 8 positive bins")
    log_s = np.log(s)
    m = max(f.size // 10, 2)
    s0_0 = float(np.median(s[-m:]))
    b_0 = max(float(np.median(s[:m])) - s0_0, s0_0 * 1e-3)
    half = s0_0 + b_0 / 2
    below = np.flatnonzero(s < half)
    g_0 = float(f[below[0]]) if below.size else float(f[f.size // 2])

    def resid(p):
        return np.log(rtn_lorentzian(f, *np.exp(p))) - log_s

    best = None
    for scale in (1.0, 0.3, 3.0):
        p0 = np.log([g_0 * scale, b_0, s0_0])
        res = optimize.least_squares(resid, p0, method="lm", xtol=1e-14, ftol=1e-14, max_nfev=5000)
        if best is None or res.cost < best.cost:
            best = res
    g, b, s0 = np.exp(best.x)
    rss_lor = 2 * best.cost
    rss_flat = float(np.sum((log_s - log_s.mean()) ** 2))
    n, k = f.size, 3
    F = ((rss_flat - rss_lor) / (k - 1)) / (rss_lor / (n - k)) if rss_lor > 0 else math.inf
    p_value = float(stats.f.sf(F, k - 1, n - k)) if math.isfinite(F) else 0.0
    if p_value >= alpha:
        raise DataError(f"spectrum is consistent with flat noise (p = {p_value:.3g}); knee unidentifiable")
    if not f[0] <= g <= f[-1]:
        raise DataError(f"fitted knee {g:.3g} Hz lies outside the measured band [{f[0]:.3g}, {f[-1]:.3g}] Hz")
    cov = _cov_from_jac(best.jac, best.fun)
    err = np.sqrt(np.clip(np.diag(cov), 0, None)) * np.array([g, b, s0])
    return RtnFit(
        gamma_rtn=float(g), b=float(b), s0=float(s0),
        stderr={"gamma_rtn": float(err[0]), "b": float(err[1]), "s0": float(err[2])},
        p_value=p_value, decade_coverage=bool(f[-1] / f[0] >= 10),
    )
