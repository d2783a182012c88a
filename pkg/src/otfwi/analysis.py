"""Experiment harness: misfit landscapes, noise studies, residual spectra and
the layer-thickness and three-layer inversion studies.

Every study returns a small dataclass with a ``to_csv`` method; CSVs carry a
header row naming the parameters and misfit tags.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .misfit1d import misfit_j1, misfit_j3, misfit_l2, w2_squared_1d
from .normalize import NormConfig, normalize_linear
from .scenarios import Scenario, build_layered, snap_interface
from .wave import ConfigError, Grid2D, ShotRecord, TimeAxis, Trace, VelocityModel, ricker, simulate_shots

log = logging.getLogger(__name__)

LANDSCAPE_TAGS = ("l2", "w1d", "j3")


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# ------------------------------------------------------------------ landscapes


@dataclass
class LandscapeSweep:
    axes: dict  # name -> 1D grid, strictly increasing
    values: dict  # misfit tag -> array shaped like the axes grid

    def __post_init__(self):
        for name, a in self.axes.items():
            if np.any(np.diff(a) <= 0):
                raise ValueError(f"axis {name} is not strictly increasing")

    def to_csv(self, path) -> Path:
        names = list(self.axes)
        tags = list(self.values)
        grids = np.meshgrid(*self.axes.values(), indexing="ij")
        rows = zip(*(g.ravel() for g in grids), *(np.asarray(self.values[t]).ravel() for t in tags))
        return write_csv(path, names + tags, rows)


def two_ricker_signal(axis: TimeAxis | None = None, peak_freq: float = 5.0, delays=(1.05, 1.35),
                      weights=(1.0, -0.8)) -> Trace:
    """Two overlapping Ricker wavelets centred in a 2.4 s window.

    The default 0.1 ms sampling resolves the thin exponential layers that the
    sign-sensitive normalization produces near zero crossings; at 2 ms their
    interpolation error shows up as small negative curvature in shift sweeps.
    """
    axis = axis or TimeAxis(24001, 1e-4)
    data = sum(w * ricker(peak_freq, d, axis).values for w, d in zip(weights, delays))
    return Trace(data, axis)


def shift_padding(signal: Trace, rel: float = 1e-6) -> tuple[float, float]:
    """How far (s) the signal can move left / right before non-negligible samples leave the window."""
    a = np.abs(signal.values)
    live = np.flatnonzero(a > rel * a.max()) if a.max() > 0 else np.array([0, len(a) - 1])
    dt = signal.axis.dt
    return live[0] * dt, (len(a) - 1 - live[-1]) * dt


def shift_trace(signal: Trace, s: float) -> np.ndarray:
    """``f(t - s)`` with zeros shifted in at the ends."""
    t = signal.axis.t
    return np.interp(t - s, t, signal.values, left=0.0, right=0.0)


def _pair_misfit(tag: str, f: np.ndarray, g: np.ndarray, axis: TimeAxis, norm: NormConfig, c: float | None) -> float:
    fs = ShotRecord(f[None, :], axis)
    gs = ShotRecord(g[None, :], axis)
    if tag == "l2":
        return misfit_l2(fs, gs).value
    if tag == "w1d":
        return misfit_j1(fs, gs, norm, c=c).value
    if tag == "j3":
        return misfit_j3(fs, gs, c=c, factor=norm.factor, through_mass=norm.through_mass).value
    raise ValueError(f"unknown misfit tag {tag!r}")


def landscape_shift(signal: Trace, shifts, tags=("l2", "j3"), norm: NormConfig = NormConfig()) -> LandscapeSweep:
    """Misfit between ``f(t)`` and ``f(t - s)`` over the shift grid, one column per tag."""
    shifts = np.asarray(shifts, dtype=float)
    left, right = shift_padding(signal)
    if shifts.min() < -left - 1e-12 or shifts.max() > right + 1e-12:
        raise ValueError(f"shifts must lie in [{-left:.4g}, {right:.4g}] s to stay inside the zero padding")
    f = signal.values
    c = norm.scale_for(f)
    values = {}
    for tag in tags:
        values[tag] = np.array([_pair_misfit(tag, shift_trace(signal, s), f, signal.axis, norm, c) for s in shifts])
    return LandscapeSweep({"shift": shifts}, values)


def local_minima(values, strict: bool = True) -> np.ndarray:
    """Indices of discrete interior local minima (plus endpoints that are lower than their neighbour)."""
    v = np.asarray(values)
    lt = np.less if strict else np.less_equal
    idx = []
    for i in range(len(v)):
        left = i == 0 or lt(v[i], v[i - 1])
        right = i == len(v) - 1 or lt(v[i], v[i + 1])
        if left and right:
            idx.append(i)
    return np.array(idx, dtype=int)


def gaussian_density(mu: float, sigma: float, n: int = 4000, width: float = 8.0):
    """Renormalized N(mu, sigma^2) samples on ``mu +- width*sigma``; returns (t0, dt, density)."""
    t = np.linspace(mu - width * sigma, mu + width * sigma, n)
    dt = t[1] - t[0]
    p = np.exp(-0.5 * ((t - mu) / sigma) ** 2)
    w = np.full(n, dt)
    w[[0, -1]] *= 0.5
    return t[0], dt, p / np.sum(w * p)


def _signal(t0, dt, p):
    from .normalize import NormalizedSignal, NormalizationJacobianAction

    w = np.full(len(p), dt)
    w[[0, -1]] *= 0.5
    jac = NormalizationJacobianAction("none", np.ones_like(p), p, 1.0, w)
    return NormalizedSignal(p, 1.0, "none", 0.0, w, jac, t0, dt)


def landscape_gaussian(mus, sigmas, n: int = 4000) -> LandscapeSweep:
    """W2^2 between discretized N(mu, sigma^2) and N(0, 1) on the (mu, sigma) grid."""
    mus = np.asarray(mus, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(sigmas <= 0):
        raise ValueError("sigma must be positive")
    g = _signal(*gaussian_density(0.0, 1.0, n))
    out = np.empty((len(mus), len(sigmas)))
    for i, mu in enumerate(mus):
        for j, s in enumerate(sigmas):
            out[i, j] = w2_squared_1d(_signal(*gaussian_density(mu, s, n)), g)
    return LandscapeSweep({"mu": mus, "sigma": sigmas}, {"w2": out})


def sampled_hessians(sweep: LandscapeSweep, tag: str = "w2") -> np.ndarray:
    """Central-difference 2x2 Hessians at interior points of a 2D sweep, shape (n1-2, n2-2, 2, 2)."""
    (a1, a2) = sweep.axes.values()
    v = np.asarray(sweep.values[tag])
    h1 = a1[2:] - a1[:-2]
    h2 = a2[2:] - a2[:-2]
    d1 = np.diff(a1)
    d2 = np.diff(a2)
    # non-uniform three-point second derivatives
    v11 = 2 * ((v[2:, 1:-1] - v[1:-1, 1:-1]) / d1[1:, None] - (v[1:-1, 1:-1] - v[:-2, 1:-1]) / d1[:-1, None]) / h1[:, None]
    v22 = 2 * ((v[1:-1, 2:] - v[1:-1, 1:-1]) / d2[None, 1:] - (v[1:-1, 1:-1] - v[1:-1, :-2]) / d2[None, :-1]) / h2[None, :]
    v12 = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (h1[:, None] * h2[None, :])
    H = np.empty(v11.shape + (2, 2))
    H[..., 0, 0] = v11
    H[..., 1, 1] = v22
    H[..., 0, 1] = H[..., 1, 0] = v12
    return H


def dilation_moments(n: int = 4000) -> tuple[float, float]:
    """Discrete second moment ``a`` and mean ``b`` of the reference N(0, 1)."""
    t0, dt, p = gaussian_density(0.0, 1.0, n)
    t = t0 + dt * np.arange(n)
    w = np.full(n, dt)
    w[[0, -1]] *= 0.5
    return float(np.sum(w * p * t**2)), float(np.sum(w * p * t))


def translation_dilation_eigenvalues(a: float, b: float) -> tuple[float, float]:
    """Eigenvalues of the half Hessian [[1, b], [b, a]] of the shift/dilation quadratic."""
    r = np.sqrt(a * a - 2 * a + 4 * b * b + 1)
    return 0.5 * (a + 1 - r), 0.5 * (a + 1 + r)


# ------------------------------------------------------------------ noise


@dataclass
class NoiseStudy:
    pieces: np.ndarray
    values: np.ndarray  # mean misfit per piece count
    slope: float
    tag: str = "w2"
    degenerate: int = 0

    def to_csv(self, path) -> Path:
        return write_csv(path, ["pieces", self.tag], zip(self.pieces, self.values))


def noise_reference_signal(axis: TimeAxis | None = None) -> Trace:
    """Strictly positive test signal: a Gaussian bump on a unit floor."""
    axis = axis or TimeAxis(1600, 0.001)
    t = axis.t
    mid = t[len(t) // 2]
    return Trace(1.0 + 2.0 * np.exp(-0.5 * ((t - mid) / 0.1) ** 2), axis)


def piecewise_noise(n: int, pieces: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero uniform noise on [-amplitude, amplitude], constant on ``pieces`` blocks."""
    edges = (np.arange(pieces + 1) * n) // pieces
    vals = rng.uniform(-amplitude, amplitude, pieces)
    return np.repeat(vals, np.diff(edges))


def fit_loglog_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def noise_scaling(f: Trace, pieces, trials: int = 20, seed: int = 0, amplitude: float = 0.5,
                  tag: str = "w2") -> NoiseStudy:
    """Mean misfit between ``f`` and ``f`` plus piecewise-constant noise, per piece count.

    ``tag="w2"`` normalizes both linearly (shift by the common minimum when
    negative) and uses the exact 1D W2^2; ``tag="l2"`` is the raw least-squares
    misfit.
    """
    pieces = np.asarray(pieces, dtype=int)
    if np.any(np.diff(pieces) <= 0):
        raise ValueError("piece counts must be strictly increasing")
    if tag not in ("w2", "l2"):
        raise ValueError(f"unknown tag {tag!r}")
    rng = np.random.default_rng(seed)
    n = len(f.values)
    dt = f.axis.dt
    means = np.zeros(len(pieces))
    bad = 0
    for i, N in enumerate(pieces):
        if N > n:
            raise ValueError(f"{N} pieces exceed {n} samples")
        vals = []
        for _ in range(trials):
            fn = f.values + piecewise_noise(n, int(N), amplitude, rng)
            if tag == "l2":
                vals.append(0.5 * float(np.sum((fn - f.values) ** 2)) * dt)
                continue
            if np.all(fn <= 0):
                bad += 1
                continue
            a, b = normalize_linear(f.values, fn, dt=dt)
            vals.append(w2_squared_1d(a, b))
        means[i] = np.mean(vals) if vals else np.nan
    if bad:
        log.warning("%d noisy realizations were entirely nonpositive and skipped", bad)
    ok = means > 0
    slope = fit_loglog_slope(pieces[ok], means[ok]) if ok.sum() >= 2 else float("nan")
    return NoiseStudy(pieces, means, slope, tag, bad)


def correlated_noise(g: ShotRecord, amplitude: float, seed: int = 0) -> tuple[ShotRecord, float]:
    """Add smoothed, data-modulated uniform noise trace by trace; returns (noisy record, SNR in dB).

    ``r`` is iid uniform on [-amplitude, amplitude]; the noise is the 1-2-1
    average of ``r`` (zero padded) times ``1 + g / max|g|``. SNR is ``inf``
    when no noise is added.
    """
    if amplitude < 0:
        raise ValueError("noise amplitude must be nonnegative")
    if amplitude == 0:
        return g.like(g.data.copy()), float("inf")
    rng = np.random.default_rng(seed)
    data = g.data
    r = rng.uniform(-amplitude, amplitude, data.shape)
    rp = np.pad(r, ((0, 0), (1, 1)))
    smooth = 0.25 * (rp[:, :-2] + 2 * rp[:, 1:-1] + rp[:, 2:])
    peak = np.max(np.abs(data), axis=1, keepdims=True)
    scale = np.where(peak > 0, peak, 1.0)  # zero traces get unmodulated noise
    noise = smooth * (1.0 + data / scale)
    return g.like(data + noise), snr_db(data, noise)


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    pn = float(np.sum(noise**2))
    ps = float(np.sum(signal**2))
    if pn == 0:
        return float("inf")
    return float("-inf") if ps == 0 else 10.0 * np.log10(ps / pn)


def tune_noise_amplitude(g: ShotRecord, target_db: float = 5.98, seed: int = 0, tol: float = 0.01,
                         max_iter: int = 20) -> tuple[float, float]:
    """Amplitude giving a realized SNR within ``tol`` dB of ``target_db`` for this seed."""
    if not np.any(g.data):
        raise ValueError("cannot tune noise against an all-zero record")
    amp = float(np.max(np.abs(g.data)))
    for _ in range(max_iter):
        _, snr = correlated_noise(g, amp, seed)
        if abs(snr - target_db) <= tol:
            break
        amp *= 10 ** ((snr - target_db) / 20)  # noise power scales with amp^2
    return amp, snr


# ------------------------------------------------------------------ spectra


@dataclass
class ResidualSpectrum:
    freqs: np.ndarray
    amplitude: np.ndarray  # mean over receivers of |DFT| * dt
    energy: np.ndarray  # per-frequency share of sum_t r^2 dt (one-sided, sums to the total)
    time_energy: float

    def band_fraction(self, lo: float, hi: float = np.inf, total: float | None = None) -> float:
        """Band energy over ``total`` (default: this spectrum's own total energy)."""
        total = float(self.energy.sum()) if total is None else total
        if total == 0:
            return 0.0
        sel = (self.freqs >= lo) & (self.freqs < hi)
        return float(self.energy[sel].sum()) / total

    def to_csv(self, path) -> Path:
        return write_csv(path, ["freq_hz", "amplitude", "energy"], zip(self.freqs, self.amplitude, self.energy))


def residual_spectrum(f: ShotRecord | list, g: ShotRecord | list) -> ResidualSpectrum:
    """Spectrum of ``f - g`` per trace, averaged over receivers (and shots when lists are given)."""
    fs = f if isinstance(f, (list, tuple)) else [f]
    gs = g if isinstance(g, (list, tuple)) else [g]
    if len(fs) != len(gs):
        raise ValueError("synthetic and observed shot counts differ")
    for a, b in zip(fs, gs):
        if a.data.shape != b.data.shape or a.axis != b.axis:
            raise ValueError(f"shot {a.shot_id}: residual needs matching geometry")
    r = np.concatenate([a.data - b.data for a, b in zip(fs, gs)], axis=0)
    dt = fs[0].axis.dt
    n = r.shape[1]
    R = np.fft.rfft(r, axis=1)
    freqs = np.fft.rfftfreq(n, dt)
    power = np.abs(R) ** 2
    mult = np.full(len(freqs), 2.0)
    mult[0] = 1.0
    if n % 2 == 0:
        mult[-1] = 1.0
    energy = (mult * power).sum(axis=0) * dt / n
    return ResidualSpectrum(freqs, np.abs(R).mean(axis=0) * dt, energy, float(np.sum(r * r)) * dt)


# ------------------------------------------------------------------ thickness study


@dataclass
class ThicknessStudy:
    thicknesses: np.ndarray  # km
    linf: np.ndarray
    records: list
    reference: float
    quiet_until: float  # s; before this no thickness difference can arrive
    pre_linf: np.ndarray = field(default=None)

    def to_csv(self, path) -> Path:
        return write_csv(path, ["thickness_km", "residual_linf", "pre_reflection_linf"],
                          zip(self.thicknesses, self.linf, self.pre_linf))


def thickness_models(base: Scenario, thicknesses, reference: float):
    """Third-layer models of varying thickness (km) on a grid deep enough for ``reference``.

    Below the third layer the velocity returns to that of the second layer.
    """
    m = base.model
    if len(m.depths) != 2 or len(m.velocities) != 3:
        raise ConfigError("thickness study needs a three-layer base scenario")
    top = m.depths[1]
    nz = max(m.nz, int(np.ceil((top + 1000 * reference) / m.dz)) + 11)
    grid = Grid2D(nz, m.nx, m.dz, m.dx)
    v1, v2, v3 = m.velocities
    models = []
    for th in list(thicknesses) + [reference]:
        if th <= 0:
            raise ConfigError("layer thickness must be positive")
        bottom = top + 1000 * th
        models.append(build_layered([m.depths[0], top, bottom], [v1, v2, v3, v2], grid))
    return grid, models


def thickness_study(base: Scenario, thicknesses, reference: float = 4.0, shot: int | None = None,
                    threads: int = 1) -> ThicknessStudy:
    """Residual sup-norm of one shot gather against the ``reference``-thickness model."""
    th = np.asarray(thicknesses, dtype=float)
    if np.any(th > reference):
        raise ConfigError("thicknesses must not exceed the reference thickness")
    grid, models = thickness_models(base, th, reference)
    acq = base.acquisition_geometry()
    shot = len(acq.sources) // 2 if shot is None else shot
    one = replace(acq, sources=[acq.sources[shot]])
    recs = [simulate_shots(mod, one, base.sim_config(), threads)[0] for mod in models]
    ref = recs[-1]
    linf = np.array([np.max(np.abs(r.data - ref.data)) for r in recs[:-1]])
    # earliest arrival that can see the bottom of the thinnest layer, less one wavelet period
    a = base.acquisition
    m = base.model
    bottom = snap_interface(m.depths[1], grid) + 1000 * th.min()
    vmax = max(m.velocities)
    t_first = 2 * (bottom - a.source_depth) / 1000.0 / vmax
    quiet = max(0.0, t_first - 1.0 / a.peak_freq)
    nq = int(quiet / a.dt)
    pre = np.array([np.max(np.abs(r.data[:, :nq] - ref.data[:, :nq]), initial=0.0) for r in recs[:-1]])
    return ThicknessStudy(th, linf, recs, reference, quiet, pre)


# ------------------------------------------------------------------ three-layer comparison


@dataclass
class InversionRun:
    misfit: str
    state: object
    spectra: dict  # checkpoint iteration (1-based) -> ResidualSpectrum

    @property
    def misfit_reduction(self) -> float:
        m = self.state.misfit
        return 1.0 - m[-1] / m[0]

    @property
    def model_error(self) -> float:
        return self.state.model_error[-1]


def run_inversion(scenario: Scenario, misfit: str, observed=None, checkpoints=(1, 51, 101), truth=None,
                  initial=None, acq=None, **overrides) -> InversionRun:
    """Invert the scenario data and record residual spectra at the given 1-based iterations.

    Iteration 1 is the initial model, iteration k the model after k - 1 updates.
    """
    from .optimize import lbfgs_minimize

    if truth is None:
        truth, initial, acq = scenario.build()
    cfg = scenario.inversion_config(misfit, **overrides)
    if observed is None:
        observed = simulate_shots(truth, acq, cfg.sim, cfg.threads)
    spectra = {}

    def callback(state, model):
        k = state.iteration + 1
        if k in checkpoints:
            syn = simulate_shots(model, acq, cfg.sim, cfg.threads)
            spectra[k] = residual_spectrum(syn, observed)

    state = lbfgs_minimize(initial, acq, observed, cfg, truth=truth, error_region=scenario.error_region(),
                           callback=callback)
    return InversionRun(misfit, state, spectra)


def spectra_table(runs, lo: float = 4.0, relative_to: str = "current"):
    """Rows of (misfit, iteration, low-band fraction, high-band fraction) split at ``lo`` Hz.

    ``relative_to="current"`` divides by each checkpoint's own residual energy, so
    the two fractions sum to one. ``"initial"`` divides by the residual energy at
    the run's first checkpoint, so both bands can be seen shrinking.
    """
    if relative_to not in ("current", "initial"):
        raise ValueError(f"relative_to must be 'current' or 'initial', got {relative_to!r}")
    rows = []
    for run in runs:
        items = sorted(run.spectra.items())
        ref = float(items[0][1].energy.sum()) if items and relative_to == "initial" else None
        for k, sp in items:
            rows.append((run.misfit, k, sp.band_fraction(0.0, lo, ref), sp.band_fraction(lo, np.inf, ref)))
    return rows
