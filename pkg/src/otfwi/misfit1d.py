"""Exact one-dimensional optimal transport between traces.

Densities live on uniform time axes. CDFs are cumulative trapezoid integrals,
quantiles are generalized inverses with linear interpolation between knots, and
the squared W2 distance is the quantile integral

    W = int_0^1 (F^{-1}(y) - G^{-1}(y))^2 dy

evaluated exactly for the two piecewise-linear CDFs, so it is symmetric in
``f`` and ``g``. :func:`w2_frechet_1d` is the exact derivative of that discrete
functional with respect to the density samples ``f`` (including the
renormalization of the CDF), so it can be checked against finite differences
to rounding error.

Most of the work happens in batched helpers that treat a stack of traces row by
row, which keeps whole-shot misfits vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .normalize import (
    NormConfig,
    NormalizedSignal,
    apply_normalization_jacobian_transpose,
    normalize_pair,
    normalize_signsensitive,
    trapezoid_weights,
    warn_degenerate,
)
from .wave import ShotRecord

G_FLOOR_REL = 1e-12


@dataclass
class Cdf:
    knots: np.ndarray
    values: np.ndarray


@dataclass
class MisfitEval:
    value: float
    adjoint_source: ShotRecord
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------- batched core


def _cumtrapz(p: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoid along the last axis, starting at 0."""
    c = np.zeros_like(p)
    np.cumsum(0.5 * dt * (p[..., 1:] + p[..., :-1]), axis=-1, out=c[..., 1:])
    return c


def _cdf_rows(p: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Renormalized CDF rows and the raw totals."""
    c = _cumtrapz(p, dt)
    total = c[..., -1:]
    return c / total, total


def _quantile_rows(G: np.ndarray, t0: float, dt: float, y: np.ndarray):
    """Row-wise generalized inverse of CDF rows ``G`` (R, n) at levels ``y`` (R, m).

    Returns the quantiles, the segment index ``k`` (interpolation between knots
    ``k-1`` and ``k``), the segment CDF increment and a mask of levels that fall
    inside a segment. ``y <= 0`` maps to the last knot where the CDF is still
    zero, i.e. the start of the support.
    """
    R, n = G.shape
    base = (np.arange(R) * n)[:, None]
    off = 2.0 * np.arange(R)[:, None]  # rows are shifted apart so one flat search works
    flat = (G + off).ravel()
    k = np.searchsorted(flat, (y + off).ravel(), side="left").reshape(y.shape) - base
    zero = y <= 0
    if np.any(zero):
        kz = np.searchsorted(flat, np.broadcast_to(off, y.shape).ravel(), side="right").reshape(y.shape)
        k = np.where(zero, np.maximum(kz - base - 1, 0), k)
    k = np.clip(k, 0, n - 1)
    rows = np.arange(R)[:, None]
    km = np.maximum(k - 1, 0)
    g_lo = G[rows, km]
    inc = G[rows, k] - g_lo
    interior = (k > 0) & ~zero
    safe = np.where(interior & (inc > 0), inc, 1.0)
    frac = np.where(interior, (y - g_lo) / safe, 0.0)
    tq = t0 + dt * (np.where(interior, km, k) + frac)
    return tq, k, inc, interior


@dataclass
class _Transport:
    value: np.ndarray  # per row
    F: np.ndarray
    C: np.ndarray
    total: np.ndarray
    x: np.ndarray  # merged breakpoints on the time axis of f
    d: np.ndarray  # x - T(x) at both ends of each merged segment, shape (R, K-1, 2)
    flat: int  # merged segments sitting on a flat stretch of the target CDF


def _transport_rows(f, g, tf0, dtf, tg0, dtg) -> _Transport:
    """Exact W2^2 between the piecewise-linear CDFs of ``f`` and ``g``, row by row.

    Breakpoints of both CDFs are merged on f's time axis; on each merged segment
    ``x - T(x)`` is linear in the CDF level, so the quantile integral is exact.
    """
    f = np.atleast_2d(f)
    g = np.atleast_2d(g)
    R, n = f.shape
    C = _cumtrapz(f, dtf)
    total = C[:, -1:]
    F = C / total
    G, _ = _cdf_rows(g, dtg)
    xg = _quantile_rows(F, tf0, dtf, G)[0]  # where F reaches each level of G
    t = np.broadcast_to(tf0 + dtf * np.arange(n), (R, n))
    x = np.concatenate([t, xg], axis=1)
    y = np.concatenate([F, G], axis=1)
    order = np.lexsort((y, x), axis=1)
    x = np.take_along_axis(x, order, axis=1)
    y = np.maximum.accumulate(np.take_along_axis(y, order, axis=1), axis=1)
    # target quantile is linear on each merged segment: pick its G element from the midpoint level
    ymid = 0.5 * (y[:, 1:] + y[:, :-1])
    m = G.shape[1]
    off = 2.0 * np.arange(R)[:, None]
    j = np.searchsorted((G + off).ravel(), (ymid + off).ravel(), side="left").reshape(ymid.shape)
    j = np.clip(j - (np.arange(R) * m)[:, None], 1, m - 1)
    rows = np.arange(R)[:, None]
    g_lo, g_hi = G[rows, j - 1], G[rows, j]
    inc = g_hi - g_lo
    floor = G_FLOOR_REL * dtg * np.max(g, axis=1, keepdims=True) / _cumtrapz(g, dtg)[:, -1:]
    safe = np.where(inc > 0, inc, 1.0)
    ends = np.stack([y[:, :-1], y[:, 1:]], axis=-1)
    T = tg0 + dtg * ((j - 1)[..., None] + np.where((inc > 0)[..., None], (ends - g_lo[..., None]) / safe[..., None], 0.0))
    d = np.stack([x[:, :-1], x[:, 1:]], axis=-1) - T
    dy = y[:, 1:] - y[:, :-1]
    value = np.sum(dy * (d[..., 0] ** 2 + d[..., 0] * d[..., 1] + d[..., 1] ** 2), axis=1) / 3.0
    flat = int(np.count_nonzero((dy > 0) & (inc < floor)))
    return _Transport(value, F, C, total, x, d, flat)


def _frechet_rows(f, g, tf0, dtf, tg0, dtg):
    """Values and exact derivatives with respect to ``f`` for each row.

    The derivative with respect to the CDF value at knot i is
    ``-2 * int phi_i(x) (x - T(x)) dx`` with ``phi_i`` the hat function, which
    is integrated exactly segment by segment and chained through ``F = C / C_N``.
    Returns (value per row, gradient rows, number of flat target segments).
    """
    f = np.atleast_2d(np.asarray(f, dtype=float))
    g = np.atleast_2d(np.asarray(g, dtype=float))
    tr = _transport_rows(f, g, tf0, dtf, tg0, dtg)
    R, n = f.shape
    x0, x1 = tr.x[:, :-1], tr.x[:, 1:]
    e = np.clip(np.floor((0.5 * (x0 + x1) - tf0) / dtf).astype(int), 0, n - 2)
    # right hat of the element at both segment ends; the left hat is one minus it
    r0 = (x0 - tf0) / dtf - e
    r1 = (x1 - tf0) / dtf - e
    a0, a1 = tr.d[..., 0], tr.d[..., 1]
    L = x1 - x0

    def hat_integral(b0, b1):
        return L / 6.0 * (2 * a0 * b0 + a0 * b1 + a1 * b0 + 2 * a1 * b1)

    a = np.zeros((R, n))
    flat_idx = (e + (np.arange(R) * n)[:, None]).ravel()
    a.ravel()[:] += np.bincount(flat_idx, (-2 * hat_integral(1 - r0, 1 - r1)).ravel(), R * n)
    a.ravel()[:] += np.bincount(flat_idx + 1, (-2 * hat_integral(r0, r1)).ravel(), R * n)
    # dF_i/df_j = (dC_i/df_j)/C_N - C_i w_j / C_N^2 with dC_i/df_j from the trapezoid sum
    w = trapezoid_weights(n, dtf)
    S = np.cumsum(a[:, ::-1], axis=1)[:, ::-1]  # S_j = sum_{i >= j} a_i
    Sn = np.zeros_like(S)
    Sn[:, :-1] = S[:, 1:]
    dC = dtf * 0.5 * (S + Sn)
    dC[:, 0] = dtf * 0.5 * S[:, 1] if n > 1 else 0.0
    total = tr.total
    grad = dC / total - w * np.sum(a * tr.C, axis=1, keepdims=True) / total**2
    return tr.value, grad, tr.flat


# ---------------------------------------------------------------- public API


def cdf(density: NormalizedSignal) -> Cdf:
    p = np.asarray(density.density, dtype=float)
    if np.any(p < 0):
        raise ValueError("density has negative samples")
    values, _ = _cdf_rows(p, density.dt)
    return Cdf(density.t, values)


def quantile(F: Cdf, y):
    """Generalized inverse ``inf{t : F(t) >= y}`` with linear interpolation."""
    y = np.asarray(y, dtype=float)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("quantile level outside [0, 1]")
    t0 = float(F.knots[0])
    dt = float(F.knots[1] - F.knots[0])
    tq = _quantile_rows(F.values[None, :], t0, dt, y.reshape(1, -1))[0]
    return float(tq[0, 0]) if y.ndim == 0 else tq.reshape(y.shape)


def optimal_map_1d(f: NormalizedSignal, g: NormalizedSignal) -> np.ndarray:
    """``T = G^{-1}(F(t))`` sampled on the time axis of ``f``."""
    F, _ = _cdf_rows(np.atleast_2d(f.density), f.dt)
    G, _ = _cdf_rows(np.atleast_2d(g.density), g.dt)
    return _quantile_rows(G, g.t0, g.dt, F)[0][0]


def w2_squared_1d(f: NormalizedSignal, g: NormalizedSignal) -> float:
    return float(_transport_rows(f.density, g.density, f.t0, f.dt, g.t0, g.dt).value[0])


def w2_frechet_1d(f: NormalizedSignal, g: NormalizedSignal, diagnostics: dict | None = None) -> np.ndarray:
    """Derivative of :func:`w2_squared_1d` with respect to the samples of ``f``."""
    _, grad, flat = _frechet_rows(f.density, g.density, f.t0, f.dt, g.t0, g.dt)
    if diagnostics is not None:
        diagnostics["g_flat_segments"] = flat
    return grad[0]


def _check_pair(f: ShotRecord, g: ShotRecord) -> None:
    if f.data.shape != g.data.shape or f.axis != g.axis:
        raise ValueError(f"shot {f.shot_id}: synthetic and observed records differ in geometry or time axis")


def _w2_rows_through(nf: NormalizedSignal, ng: NormalizedSignal, dt: float):
    bad = np.zeros(nf.density.shape[0], bool)
    for s in (nf, ng):
        if s.degenerate is not None:
            bad |= s.degenerate
    fd, gd = nf.density, ng.density
    if np.any(bad):  # placeholder densities; these rows are zeroed below
        fd, gd = fd.copy(), gd.copy()
        fd[bad] = gd[bad] = 1.0
    value, grad, clamped = _frechet_rows(fd, gd, 0.0, dt, 0.0, dt)
    value = np.where(bad, 0.0, value)
    grad[bad] = 0.0
    adj = apply_normalization_jacobian_transpose(nf.jac, grad)
    adj[bad] = 0.0
    return value, adj, int(bad.sum()), clamped


def misfit_j1(f: ShotRecord, g: ShotRecord, norm: NormConfig = NormConfig(), c: float | None = None) -> MisfitEval:
    """Sum over receivers of W2^2 between independently normalized trace pairs."""
    _check_pair(f, g)
    dt = f.axis.dt
    nf, ng = normalize_pair(f.data, g.data, norm, c=c, dt=dt, rowwise=True)
    value, adj, nbad, clamped = _w2_rows_through(nf, ng, dt)
    warn_degenerate(nbad, f"shot {f.shot_id}")
    return MisfitEval(float(value.sum()), f.like(adj),
                      {"degenerate_traces": nbad, "g_flat_segments": clamped, "per_trace": value})


def misfit_j3(f: ShotRecord, g: ShotRecord, c: float | None = None, factor: float = 10.0,
              through_mass: bool = True) -> MisfitEval:
    """Two-sided sign-sensitive misfit: W2^2(P(f), P(g)) + W2^2(P(-f), P(-g))."""
    _check_pair(f, g)
    dt = f.axis.dt
    if c is None:
        c = NormConfig(factor=factor).scale_for(g.data)
    total = np.zeros(f.n_receivers)
    adj = np.zeros_like(f.data)
    clamped = 0
    for sign in (1.0, -1.0):
        nf = normalize_signsensitive(sign * f.data, c, dt=dt, through_mass=through_mass, rowwise=True)
        ng = normalize_signsensitive(sign * g.data, c, dt=dt, through_mass=through_mass, rowwise=True)
        value, a, _, cl = _w2_rows_through(nf, ng, dt)
        total += value
        adj += sign * a
        clamped += cl
    return MisfitEval(float(total.sum()), f.like(adj), {"c": c, "g_flat_segments": clamped, "per_trace": total})


def misfit_l2(f: ShotRecord, g: ShotRecord) -> MisfitEval:
    """``0.5 * sum (f - g)^2 dt`` with adjoint source ``(f - g) dt``."""
    _check_pair(f, g)
    r = f.data - g.data
    dt = f.axis.dt
    return MisfitEval(0.5 * float(np.sum(r * r)) * dt, f.like(r * dt))
