"""Synthetic data generators used as oracles for the analysis code.

All randomness comes from numpy's PCG64 bit generator.  A seed is an
unsigned integer; per-task streams are derived with
``SeedSequence(seed).spawn(n)`` so parallel generation stays reproducible.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .coupled import reflection_coefficient
from .exceptions import ParameterError
from .fitting import SpectroscopyDataset
from .hamiltonian import SINUSOIDAL, transition_table
from .params import validate

__all__ = [
    "PRNG_ALGORITHM",
    "GeneratorSpec",
    "TelegraphSeries",
    "make_rng",
    "derive_seeds",
    "gen_telegraph",
    "gen_iq_trace",
    "gen_spectrum",
    "gen_ramsey",
    "gen_decay",
    "gen_s11",
    "gen_rtn_series",
]

PRNG_ALGORITHM = "numpy.random.PCG64"

KINDS = ("telegraph", "iq_trace", "spectrum", "ramsey", "decay", "s11", "rtn")


def make_rng(seed):
    """A PCG64-backed generator for ``seed`` (int or SeedSequence)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if seed is None or int(seed) < 0:
        raise ParameterError("seed must be a non-negative integer", "seed")
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seeds(seed, n):
    """Child seed sequences for ``n`` independent tasks."""
    return np.random.SeedSequence(int(seed)).spawn(n)


@dataclass
class GeneratorSpec:
    """Seed, kind and kind-specific parameters of a generated dataset."""

    kind: str
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown generator kind {self.kind!r}", "kind")

    def to_dict(self):
        out = asdict(self)
        out["prng"] = PRNG_ALGORITHM
        out["numpy"] = np.__version__
        return out


@dataclass
class TelegraphSeries:
    """Two-state sequence sampled every ``dt``; 1 marks the excited state."""

    states: np.ndarray
    dt: float
    t_down: float
    t_up: float
    coarse: bool = False
    spec: GeneratorSpec = None

    @property
    def excited_fraction(self):
        return float(np.mean(self.states))


def gen_telegraph(t_down, t_up, dt, n, seed=0, initial=None):
    """Telegraph process sampled on ``n`` points spaced ``dt``.

    Dwell times are drawn exactly from exponentials with means ``t_down``
    (time spent in the excited state) and ``t_up`` (time in the ground
    state); the sequence is then read off at t = k dt.  The initial state is
    drawn from the stationary occupancy P_e = t_down / (t_down + t_up)
    unless given.  ``coarse`` is set (with a warning) when dt exceeds a
    third of the shorter mean dwell.
    """
    if not (t_down > 0 and t_up > 0 and dt > 0):
        raise ParameterError("t_down, t_up and dt must be positive", "dt")
    n = int(n)
    if n < 1:
        raise ParameterError("n must be >= 1", "n")
    rng = make_rng(seed)
    coarse = dt > min(t_down, t_up) / 3
    if coarse:
        warnings.warn(f"dt={dt} is coarse compared with the mean dwells", RuntimeWarning, stacklevel=2)
    p_e = t_down / (t_down + t_up)
    state0 = int(rng.random() < p_e) if initial is None else int(initial)
    total = n * dt
    means = (t_up, t_down)  # mean dwell in g, in e
    expected = max(16, int(2 * total / (t_down + t_up) * 1.2) + 16)
    bounds = np.zeros(0)
    start = 0.0
    parity = state0
    while True:
        m = expected
        scale = np.where((np.arange(m) + parity) % 2 == 0, means[0], means[1])
        chunk = start + np.cumsum(rng.exponential(1.0, m) * scale)
        bounds = np.concatenate([bounds, chunk])
        if chunk[-1] > total:
            break
        start = chunk[-1]
        parity = (parity + m) % 2
    t = np.arange(n) * dt
    n_switch = np.searchsorted(bounds, t, side="right")
    states = ((state0 + n_switch) % 2).astype(np.int8)
    spec = GeneratorSpec("telegraph", int(seed) if not isinstance(seed, np.random.SeedSequence) else -1,
                         {"t_down": t_down, "t_up": t_up, "dt": dt, "n": n})
    return TelegraphSeries(states, float(dt), float(t_down), float(t_up), bool(coarse), spec)


def gen_iq_trace(telegraph, mu_g, mu_e, sigma, seed=0, meta=None):
    """Noisy IQ samples: state mean plus complex Gaussian noise of standard
    deviation ``sigma`` per quadrature."""
    from .timeseries import IQTrace

    if sigma < 0:
        raise ParameterError("sigma must be >= 0", "sigma")
    rng = make_rng(seed)
    states = np.asarray(telegraph.states)
    mean = np.where(states == 1, complex(mu_e), complex(mu_g))
    noise = sigma * (rng.standard_normal(states.size) + 1j * rng.standard_normal(states.size))
    info = {"mu_g": complex(mu_g), "mu_e": complex(mu_e), "sigma": float(sigma), "seed": seed}
    if telegraph.spec is not None:
        info["telegraph"] = telegraph.spec.to_dict()
    if meta:
        info.update(meta)
    return IQTrace(mean + noise, telegraph.dt, info)


def gen_spectrum(
    params,
    cphir=SINUSOIDAL,
    phi_values=None,
    sigma_f=0.0,
    seed=0,
    transitions=("ge", "gf"),
    delta_ej=None,
    exclusion_windows=(),
    dim=None,
):
    """Spectroscopy points from the Hamiltonian plus Gaussian noise (GHz).

    With ``delta_ej`` set, every flux point carries two g->e lines, one for
    E_J and one for E_J + delta_ej, both labelled ``"unassigned"``.
    """
    validate(params)
    phi = np.linspace(0.0, 0.5, 41) if phi_values is None else np.asarray(phi_values, dtype=float)
    rng = make_rng(seed)
    level_of = {"ge": 0, "gf": 1}
    phis, freqs, labels = [], [], []
    if delta_ej is None:
        table = transition_table(params, phi, cphir, n_levels=3, dim=dim)
        for name in transitions:
            phis.append(phi)
            freqs.append(table[:, level_of[name]])
            labels += [name] * phi.size
    else:
        for e_j in (params.e_j, params.e_j + delta_ej):
            table = transition_table(params.replace(e_j=e_j), phi, cphir, n_levels=3, dim=dim)
            phis.append(phi)
            freqs.append(table[:, 0])
            labels += ["unassigned"] * phi.size
    phi_all = np.concatenate(phis)
    f_all = np.concatenate(freqs)
    if sigma_f > 0:
        f_all = f_all + sigma_f * rng.standard_normal(f_all.size)
    return SpectroscopyDataset(phi_all, f_all, np.array(labels), None, exclusion_windows)


def gen_decay(times, t_decay, amplitude=1.0, offset=0.0, noise=0.0, seed=0):
    """A exp(-t/T) + B plus Gaussian noise."""
    rng = make_rng(seed)
    t = np.asarray(times, dtype=float)
    y = amplitude * np.exp(-t / t_decay) + offset
    return y + noise * rng.standard_normal(t.size) if noise > 0 else y


def gen_ramsey(times, f1, f2=None, t2_star=5.0, amplitude=0.5, ratio=1.0, phases=(0.0, 0.0), offset=0.5, noise=0.0, seed=0):
    """A e^{-t/T2*} [cos(2 pi f1 t + p1) + r cos(2 pi f2 t + p2)] + B.

    Times in µs and frequencies in MHz; ``f2=None`` gives a single tone.
    """
    rng = make_rng(seed)
    t = np.asarray(times, dtype=float)
    sig = np.cos(2 * np.pi * f1 * t + phases[0])
    if f2 is not None:
        sig = sig + ratio * np.cos(2 * np.pi * f2 * t + phases[1])
    y = amplitude * np.exp(-t / t2_star) * sig + offset
    return y + noise * rng.standard_normal(t.size) if noise > 0 else y


def gen_s11(model, f_probe, phase_noise_deg=0.0, seed=0):
    """Complex reflection for both qubit states with Gaussian phase noise.

    Returns ``(s11_g, s11_e)``.
    """
    rng = make_rng(seed)
    f = np.asarray(f_probe, dtype=float)
    out = []
    for state in ("g", "e"):
        s = reflection_coefficient(model, f, state)
        if phase_noise_deg > 0:
            s = s * np.exp(1j * np.deg2rad(phase_noise_deg) * rng.standard_normal(f.size))
        out.append(s)
    return out[0], out[1]


def gen_rtn_series(gamma_rtn, b, s0, dt, n_samples, n_traces=1, seed=0, mean=0.0):
    """Traces of a symmetric telegraph signal plus white noise.

    The telegraph flips between +a and -a with per-direction rate
    pi * gamma_rtn, so its one-sided spectrum is the Lorentzian
    b gamma_rtn^2 / (f^2 + gamma_rtn^2) with a^2 = pi b gamma_rtn / 2.
    The white part has one-sided level ``s0``, i.e. variance s0 / (2 dt).
    Units follow the inputs (Hz and s for frequency-noise traces).

    Returns an array of shape (n_traces, n_samples).
    """
    if gamma_rtn <= 0 or dt <= 0 or b < 0 or s0 < 0:
        raise ParameterError("gamma_rtn and dt must be positive, b and s0 non-negative", "gamma_rtn")
    children = derive_seeds(seed, 2 * n_traces)
    amp = math.sqrt(math.pi * b * gamma_rtn / 2)
    sigma_w = math.sqrt(s0 / (2 * dt))
    dwell = 1.0 / (math.pi * gamma_rtn)
    out = np.empty((n_traces, int(n_samples)))
    for i in range(n_traces):
        tel = gen_telegraph(dwell, dwell, dt, n_samples, seed=children[2 * i])
        white = make_rng(children[2 * i + 1]).standard_normal(int(n_samples))
        out[i] = mean + amp * (2.0 * tel.states - 1.0) + sigma_w * white
    return out
