"""Adjoint-state gradients and L-BFGS inversion in squared slowness.

The optimization variable is ``m = 1/c^2`` on the full grid. Masked cells get a
zero gradient and therefore never move. Bounds on ``c`` are enforced by
clipping ``m`` whenever the model is evaluated or updated.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import line_search

from .gridio import write_grid
from .misfit1d import MisfitEval, misfit_j1, misfit_j3, misfit_l2
from .monge_ampere import MaConfig, MaNonConvergence, misfit_j2
from .normalize import NormConfig
from .wave import Acquisition, ConfigError, ShotRecord, SimConfig, Simulator, VelocityModel

log = logging.getLogger(__name__)

MISFITS = ("l2", "w1d", "w2d", "j3")


class ShotError(RuntimeError):
    def __init__(self, shot_id: int, exc: Exception):
        super().__init__(f"shot {shot_id}: {exc}")
        self.shot_id = shot_id
        self.__cause__ = exc


@dataclass
class InversionConfig:
    misfit: str = "l2"  # l2, w1d (trace-by-trace W2), w2d (Monge-Ampere), j3 (two-sided sign-sensitive)
    norm: NormConfig = field(default_factory=NormConfig)
    ma: MaConfig = field(default_factory=MaConfig)
    j2_fallback: bool = False  # use the trace-by-trace misfit for a shot whose Monge-Ampere solve fails
    max_iters: int = 20
    lbfgs_memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    ls_maxiter: int = 10
    max_restarts: int = 1
    c_min: float = 1.0
    c_max: float = 6.0
    gtol: float = 1e-8  # relative to the initial gradient norm
    first_step_dc: float = 0.05  # km/s, largest velocity change of the first step
    source_mask_radius: int = 2
    update_mask: np.ndarray | None = None
    threads: int = 1
    sim: SimConfig = field(default_factory=SimConfig)
    snapshot_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.misfit not in MISFITS:
            raise ConfigError(f"unknown misfit {self.misfit!r}; choose from {MISFITS}")
        if self.lbfgs_memory < 1:
            raise ConfigError("lbfgs_memory must be >= 1")
        if not 0 < self.c_min < self.c_max:
            raise ConfigError("need 0 < c_min < c_max")


@dataclass
class InversionState:
    model: VelocityModel
    iteration: int = 0
    misfit: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    step_len: list[float] = field(default_factory=list)
    model_error: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    status: str = "running"
    evaluations: int = 0
    diagnostics: list = field(default_factory=list)  # per-shot misfit diagnostics of the latest evaluation

    def rows(self):
        for k in range(len(self.misfit)):
            err = self.model_error[k] if self.model_error else ""
            yield k, self.misfit[k], self.grad_norm[k], self.step_len[k], err, self.seconds[k]


LOG_COLUMNS = ("iter", "misfit", "grad_norm", "step_len", "model_error", "seconds")


def write_log(state: InversionState, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in state.rows():
            w.writerow(row)
    return path


def model_error(current: VelocityModel | np.ndarray, truth: VelocityModel | np.ndarray,
                relative: bool = False, region: np.ndarray | None = None) -> float:
    """Frobenius norm of the velocity difference, optionally relative and restricted to ``region``."""
    a = current.c if isinstance(current, VelocityModel) else np.asarray(current, float)
    b = truth.c if isinstance(truth, VelocityModel) else np.asarray(truth, float)
    if a.shape != b.shape:
        raise ConfigError(f"model grids differ: {a.shape} vs {b.shape}")
    d = a - b
    if region is not None:
        d, b = d[region], b[region]
    err = float(np.linalg.norm(d))
    return err / float(np.linalg.norm(b)) if relative else err


def source_mask(model: VelocityModel, acq: Acquisition, radius: int) -> np.ndarray:
    """1 everywhere except within ``radius`` cells (Chebyshev distance) of a source."""
    mask = np.ones(model.grid.shape)
    if radius < 0:
        return mask
    for z, x in acq.sources:
        iz, ix = model.grid.node(z, x)
        mask[max(0, iz - radius): iz + radius + 1, max(0, ix - radius): ix + radius + 1] = 0.0
    return mask


def evaluate_misfit(syn: ShotRecord, obs: ShotRecord, config: InversionConfig) -> MisfitEval:
    kind = config.misfit
    if kind == "l2":
        return misfit_l2(syn, obs)
    if kind == "w1d":
        return misfit_j1(syn, obs, config.norm)
    if kind == "j3":
        return misfit_j3(syn, obs, c=config.norm.c, factor=config.norm.factor, through_mass=config.norm.through_mass)
    try:
        return misfit_j2(syn, obs, config.norm, config.ma)
    except MaNonConvergence as exc:
        if not config.j2_fallback:
            raise
        warnings.warn(f"shot {syn.shot_id}: Monge-Ampere solve failed, using trace-by-trace W2 ({exc})",
                      RuntimeWarning, stacklevel=2)
        ev = misfit_j1(syn, obs, config.norm)
        ev.diagnostics["fallback"] = True
        return ev


def check_observed(acq: Acquisition, observed: list[ShotRecord]) -> None:
    if len(observed) != len(acq.sources):
        raise ConfigError(f"{len(observed)} observed records for {len(acq.sources)} sources")
    for k, rec in enumerate(observed):
        if rec.n_receivers != len(acq.receivers) or rec.axis != acq.axis:
            raise ConfigError(f"observed record for shot {k} does not match the acquisition geometry")


def model_gradient(model: VelocityModel, acq: Acquisition, observed: list[ShotRecord],
                   config: InversionConfig, mask: np.ndarray | None = None):
    """Summed misfit and its gradient with respect to ``m`` over all shots.

    Returns ``(value, gradient, diagnostics)``; per-shot contributions are
    reduced in shot order so the result does not depend on ``config.threads``.
    """
    check_observed(acq, observed)
    sim = Simulator(model, acq.axis, config.sim)

    def one(shot: int):
        try:
            syn, wf = sim.forward(acq, shot, record_wavefield=True)
            ev = evaluate_misfit(syn, observed[shot], config)
            grad = sim.gradient(acq.receivers, ev.adjoint_source.data, wf)
        except (ConfigError, ShotError):
            raise
        except Exception as exc:  # noqa: BLE001 - rewrapped with the shot id
            raise ShotError(shot, exc) from exc
        return ev.value, grad, ev.diagnostics

    shots = range(len(acq.sources))
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(one, shots))
    else:
        results = [one(s) for s in shots]
    value = 0.0
    grad = np.zeros(model.grid.shape)
    for v, g, _ in results:
        value += v
        grad += g
    if mask is not None:
        grad *= mask
    return value, grad, [d for _, _, d in results]


def combined_mask(model: VelocityModel, acq: Acquisition, config: InversionConfig) -> np.ndarray:
    mask = source_mask(model, acq, config.source_mask_radius)
    if config.update_mask is not None:
        um = np.asarray(config.update_mask, dtype=float)
        if um.shape != mask.shape:
            raise ConfigError(f"update mask shape {um.shape} does not match grid {mask.shape}")
        mask = mask * um
    return mask


def two_loop(grad: np.ndarray, s_hist: list, y_hist: list) -> np.ndarray:
    """L-BFGS two-loop recursion returning the search direction ``-H grad``."""
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


class _Objective:
    """Caches the last evaluation so value and gradient at a point cost one solve set."""

    def __init__(self, fun, lo: float, hi: float):
        self.fun, self.lo, self.hi = fun, lo, hi
        self.x = None
        self.count = 0

    def clip(self, x):
        return np.clip(x, self.lo, self.hi)

    def _eval(self, x):
        if self.x is None or not np.array_equal(x, self.x):
            xc = self.clip(x)
            self.val, g = self.fun(xc)
            # the clipped coordinates are locally constant
            self.grad = np.where((x < self.lo) | (x > self.hi), 0.0, g)
            self.x = x.copy()
            self.count += 1

    def value(self, x):
        self._eval(x)
        return self.val

    def gradient(self, x):
        self._eval(x)
        return self.grad


def lbfgs(fun, x0: np.ndarray, lo: float, hi: float, max_iters: int, memory: int = 10, first_step=None,
          gtol: float = 1e-8, c1: float = 1e-4, c2: float = 0.9, ls_maxiter: int = 10, max_restarts: int = 1,
          callback=None):
    """Minimize ``fun(x) -> (value, gradient)`` over the box ``[lo, hi]``.

    ``first_step(x, grad)`` returns the scale of the first steepest-descent
    step. ``callback(k, x, value, grad, step_len)`` is called for the starting
    point (k = 0) and after every accepted step. Returns ``(x, status)``.
    """
    obj = _Objective(fun, lo, hi)
    x = obj.clip(np.asarray(x0, dtype=float).copy())
    f = obj.value(x)
    g = obj.gradient(x)
    g0 = float(np.linalg.norm(g))
    if callback:
        callback(0, x, f, g, 0.0)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    restarts = 0
    status = "max_iters"
    k = 0
    while k < max_iters:
        gn = float(np.linalg.norm(g))
        if gn == 0.0 or gn <= gtol * g0:
            status = "gradient_tolerance"
            break
        if s_hist:
            d = two_loop(g, s_hist, y_hist)
        else:
            d = -g * (first_step(x, g) if first_step else 1.0 / gn)
        if float(d @ g) >= 0:  # not a descent direction; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g * (first_step(x, g) if first_step else 1.0 / gn)
        alpha, _, _, f_new, _, _ = line_search(obj.value, obj.gradient, x, d, g, f, c1=c1, c2=c2,
                                               amax=50.0, maxiter=ls_maxiter)
        if alpha is None:
            alpha, f_new = _backtrack(obj, x, d, f, g, c1)
        if alpha is None:
            if s_hist and restarts < max_restarts:
                restarts += 1
                s_hist.clear()
                y_hist.clear()
                log.info("line search failed at iteration %d; restarting from steepest descent", k + 1)
                continue
            status = "line_search_failed"
            break
        x_new = obj.clip(x + alpha * d)
        g_new = obj.gradient(x + alpha * d)
        f_new = obj.value(x + alpha * d)
        s = x_new - x
        y = g_new - g
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        obj.x = None  # the clipped point is now the reference; drop the cache keyed on the unclipped one
        k += 1
        if callback:
            callback(k, x, f, g, float(np.linalg.norm(s)))
    return x, status, obj.count


def _backtrack(obj: _Objective, x, d, f, g, c1, max_halvings: int = 20):
    slope = float(g @ d)
    a = 1.0
    for _ in range(max_halvings):
        fa = obj.value(x + a * d)
        if np.isfinite(fa) and fa <= f + c1 * a * slope:
            return a, fa
        a *= 0.5
    return None, None


def lbfgs_minimize(initial: VelocityModel, acq: Acquisition, observed: list[ShotRecord],
                   config: InversionConfig, truth: VelocityModel | None = None, error_region=None,
                   callback=None) -> InversionState:
    """Invert ``observed`` starting from ``initial``.

    ``callback(state, model)`` runs after every logged iteration, e.g. to
    record residuals. ``model_error`` is relative and restricted to
    ``error_region`` when one is given, the full-grid Frobenius norm otherwise.
    """
    acq.check(initial.grid)
    check_observed(acq, observed)
    grid = initial.grid
    mask = combined_mask(initial, acq, config)
    out = Path(config.out_dir) if config.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    state = InversionState(initial.copy())
    t_start = [time.perf_counter()]

    def fun(m_flat):
        model = VelocityModel.from_slowness(grid, m_flat.reshape(grid.shape))
        value, grad, diags = model_gradient(model, acq, observed, config, mask)
        state.diagnostics = diags
        return value, grad.ravel()

    def first_step(m_flat, g):
        # largest velocity change of the step -alpha g is about alpha * max|c^3 / 2 * g|
        c = 1.0 / np.sqrt(m_flat)
        return config.first_step_dc / float(np.max(np.abs(0.5 * c**3 * g)))

    def record(k, m_flat, f, g, step):
        now = time.perf_counter()
        model = VelocityModel.from_slowness(grid, m_flat.reshape(grid.shape))
        state.model = model
        state.iteration = k
        state.misfit.append(float(f))
        state.grad_norm.append(float(np.linalg.norm(g)))
        state.step_len.append(step)
        state.seconds.append(now - t_start[0])
        t_start[0] = now
        if truth is not None:
            if error_region is not None:
                state.model_error.append(model_error(model, truth, relative=True, region=error_region))
            else:
                state.model_error.append(model_error(model, truth))
        log.info("iter %d misfit %.6e |g| %.3e step %.3e", k, f, state.grad_norm[-1], step)
        if out and config.snapshot_every and k % config.snapshot_every == 0:
            write_grid(out / f"model_{k:04d}.bin", model.c)
        if callback:
            callback(state, model)

    lo = 1.0 / config.c_max**2
    hi = 1.0 / config.c_min**2
    _, status, nev = lbfgs(fun, initial.m.ravel(), lo, hi, config.max_iters, config.lbfgs_memory, first_step,
                           config.gtol, config.c1, config.c2, config.ls_maxiter, config.max_restarts, record)
    state.status = status
    state.evaluations = nev
    if out:
        write_log(state, out / f"convergence_{config.misfit}.csv")
        write_grid(out / f"final_model_{config.misfit}.bin", state.model.c)
    return state
