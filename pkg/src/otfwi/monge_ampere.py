"""Filtered monotone finite differences for the 2D Monge-Ampere transport problem.

Solves ``det D^2 u = f / g(grad u)`` on a box with the second boundary value
condition written as the Neumann condition ``grad u . n = x . n`` (the box maps
onto itself). Nodes are equally spaced with spacing ``h`` in both directions so
that the diagonal stencils line up with grid points; the longest side of the
box has length one.

Interior equations, with ``q(p) = f(x) / g(p)``:

* monotone: ``M_M = -min(MA_axis, MA_diag) + u0`` where each branch is
  ``max(a, d) max(b, d) + (min(a, d) - d) + (min(b, d) - d) - q`` built from
  axis (``a, b = D11, D22``) or diagonal second differences, with the gradient
  argument of ``q`` taken from the matching first differences;
* standard: ``M_N = -(D11 D22 - D12^2) + q(D1 u, D2 u) + u0``;
* filtered: ``M_F = M_M + eps * S((M_N - M_M) / eps)``.

``u0`` is the value of ``u`` at the centre node; including it in every interior
equation removes the additive constant. Newton's method uses the exact sparse
Jacobian of ``M_F`` and the same factorization gives the gradient of the
discrete W2 distance with respect to the source density by one transposed solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline
from scipy.sparse.linalg import splu

from .gridio import write_grid
from .normalize import NormConfig, apply_normalization_jacobian_transpose, normalize_pair, trapezoid_weights
from .wave import ShotRecord


class MaNonConvergence(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(f"{message}; residual history {['%.3e' % r for r in history]}")
        self.history = history


class MaDomainError(ValueError):
    """Negative or vanishing density."""


@dataclass(frozen=True)
class MaConfig:
    tol: float = 1e-8
    max_iters: int = 100
    max_halvings: int = 20
    delta: float | None = None  # default min(max(K h / 2, 1e-6), h)
    epsilon: float | None = None  # default sqrt(h)
    floor_rel: float = 1e-10
    continuation: bool = True  # retry through densities blended with the uniform one
    dump_dir: str | None = None


@dataclass
class MaProblem:
    f: np.ndarray
    g: np.ndarray
    h: float
    delta: float
    epsilon: float
    g_lipschitz: float
    fixed_point: tuple[int, int]
    f_clamped: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if np.any(self.g <= 0):
            raise MaDomainError("target density must be strictly positive (apply the density floor)")
        self.g_spline = _log_spline(self.g, self.h)

    @property
    def shape(self) -> tuple[int, int]:
        return self.f.shape

    @property
    def extent(self) -> tuple[float, float]:
        n1, n2 = self.shape
        return (n1 - 1) * self.h, (n2 - 1) * self.h

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        n1, n2 = self.shape
        return np.meshgrid(self.h * np.arange(n1), self.h * np.arange(n2), indexing="ij")

    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.shape, self.h)

    @classmethod
    def from_densities(cls, f, g, h: float | None = None, config: MaConfig = MaConfig()) -> "MaProblem":
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        if f.shape != g.shape or f.ndim != 2 or min(f.shape) < 3:
            raise ValueError("f and g must be 2D arrays of the same shape, at least 3x3")
        if np.any(g < 0) or not np.any(g > 0):
            raise MaDomainError("target density must be nonnegative with positive mass")
        if np.any(f < 0):
            raise MaDomainError("source density must be nonnegative")
        if h is None:
            h = 1.0 / (max(f.shape) - 1)
        f_floor = config.floor_rel * f.max()
        g_floor = config.floor_rel * g.max()
        clamped = f < f_floor
        # additive rather than max(): a kink at the floor stalls Newton in the tails
        f = f + f_floor
        g = g + g_floor
        K = lipschitz_inverse(g, h)
        # K h / 2 alone can exceed the curvature of the solution itself for
        # strongly varying g; capping at h keeps the floor consistent as h -> 0
        delta = config.delta if config.delta is not None else min(max(K * h / 2, 1e-6), h)
        eps = config.epsilon if config.epsilon is not None else math.sqrt(h)
        centre = (f.shape[0] // 2, f.shape[1] // 2)
        return cls(f, g, h, delta, eps, K, centre, clamped)


@dataclass
class MaSolution:
    u: np.ndarray
    map: np.ndarray  # (2, n1, n2)
    residual_norm: float
    newton_iters: int
    filter_fraction: float
    history: list[float] = field(default_factory=list)
    lu: object = field(default=None, repr=False)
    eval: object = field(default=None, repr=False)


def lipschitz_inverse(g: np.ndarray, h: float) -> float:
    """Grid-difference estimate of the Lipschitz constant of ``1/g``."""
    r = 1.0 / g
    d1 = np.abs(np.diff(r, axis=0)).max(initial=0.0)
    d2 = np.abs(np.diff(r, axis=1)).max(initial=0.0)
    return max(d1, d2) / h


def filter_s(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= 1, x, np.where(ax >= 2, 0.0, np.sign(x) * 2 - x))


def filter_ds(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= 1, 1.0, np.where(ax >= 2, 0.0, -1.0))


# ------------------------------------------------------------------ stencils


def _at(di: int, dj: int) -> int:
    return (di + 1) * 3 + (dj + 1)


def _stencils(h: float) -> dict[str, np.ndarray]:
    s = {k: np.zeros(9) for k in ("d11", "d22", "dvv", "dww", "d12", "d1", "d2", "dv", "dw")}
    s["d11"][[_at(1, 0), _at(-1, 0)]] = 1
    s["d22"][[_at(0, 1), _at(0, -1)]] = 1
    s["dvv"][[_at(1, 1), _at(-1, -1)]] = 1
    s["dww"][[_at(1, -1), _at(-1, 1)]] = 1
    for k in ("d11", "d22", "dvv", "dww"):
        s[k][_at(0, 0)] = -2
    s["d11"] /= h * h
    s["d22"] /= h * h
    s["dvv"] /= 2 * h * h
    s["dww"] /= 2 * h * h
    s["d12"][[_at(1, 1), _at(-1, -1)]] = 1
    s["d12"][[_at(1, -1), _at(-1, 1)]] = -1
    s["d12"] /= 4 * h * h
    s["d1"][[_at(1, 0), _at(-1, 0)]] = [1, -1]
    s["d2"][[_at(0, 1), _at(0, -1)]] = [1, -1]
    s["d1"] /= 2 * h
    s["d2"] /= 2 * h
    s["dv"][[_at(1, 1), _at(-1, -1)]] = [1, -1]
    s["dw"][[_at(1, -1), _at(-1, 1)]] = [1, -1]
    s["dv"] /= 2 * math.sqrt(2) * h
    s["dw"] /= 2 * math.sqrt(2) * h
    # gradient recovered from the rotated frame
    s["p1_rot"] = (s["dv"] + s["dw"]) / math.sqrt(2)
    s["p2_rot"] = (s["dv"] - s["dw"]) / math.sqrt(2)
    return s


def _one_sided_derivative(n: int, h: float) -> sp.csr_matrix:
    """1D first derivative: centred inside, second-order one-sided at both ends."""
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 1, n - 2, n - 3]
    vals += [-1.5 / h, 2.0 / h, -0.5 / h, 1.5 / h, -2.0 / h, 0.5 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class _Layout:
    """Index bookkeeping shared by every evaluation on one grid."""

    def __init__(self, n1: int, n2: int, h: float):
        self.n1, self.n2, self.h = n1, n2, h
        self.n = n1 * n2
        idx = np.arange(self.n).reshape(n1, n2)
        self.interior = idx[1:-1, 1:-1].ravel()
        self.nbr = np.stack([idx[1 + di:n1 - 1 + di, 1 + dj:n2 - 1 + dj].ravel()
                             for di in (-1, 0, 1) for dj in (-1, 0, 1)], axis=1)
        bmask = np.ones((n1, n2), bool)
        bmask[1:-1, 1:-1] = False
        self.boundary = idx[bmask]
        self.st = _stencils(h)
        d1 = _one_sided_derivative(n1, h)
        d2 = _one_sided_derivative(n2, h)
        self.grad1 = sp.kron(d1, sp.identity(n2), format="csr")
        self.grad2 = sp.kron(sp.identity(n1), d2, format="csr")
        # Neumann rows: sum over the sides a boundary node touches of (one-sided normal derivative - x . n)
        L1, L2 = (n1 - 1) * h, (n2 - 1) * h
        x1, x2 = np.meshgrid(h * np.arange(n1), h * np.arange(n2), indexing="ij")
        sel1 = np.zeros(self.n)
        sel2 = np.zeros(self.n)
        tgt = np.zeros(self.n)
        for mask, sgn, coord, rhs in [
            (x1 == 0, -1.0, 1, 0.0), (np.isclose(x1, L1), 1.0, 1, L1),
            (x2 == 0, -1.0, 2, 0.0), (np.isclose(x2, L2), 1.0, 2, L2),
        ]:
            m = mask.ravel()
            if coord == 1:
                sel1[m] += sgn
            else:
                sel2[m] += sgn
            tgt[m] += sgn * rhs
        self.bc = (sp.diags(sel1) @ self.grad1 + sp.diags(sel2) @ self.grad2).tocsr()[self.boundary]
        self.bc_target = tgt[self.boundary]
        self.x = np.stack([x1.ravel(), x2.ravel()])


def _log_spline(g: np.ndarray, h: float) -> RectBivariateSpline:
    n1, n2 = g.shape
    k1, k2 = min(3, n1 - 1), min(3, n2 - 1)
    return RectBivariateSpline(h * np.arange(n1), h * np.arange(n2), np.log(g), kx=k1, ky=k2)


def _interp(prob: "MaProblem", p1: np.ndarray, p2: np.ndarray):
    """Target density at points clamped into the box, with its gradient.

    Interpolates ``log g`` with a bicubic spline: positive, twice continuously
    differentiable (which Newton needs) and exact for Gaussians.
    """
    spl = prob.g_spline
    L1, L2 = prob.extent
    c1 = np.clip(p1, 0.0, L1)
    c2 = np.clip(p2, 0.0, L2)
    val = np.exp(spl.ev(c1, c2))
    dg1 = np.where((p1 < 0) | (p1 > L1), 0.0, val * spl.ev(c1, c2, dx=1))
    dg2 = np.where((p2 < 0) | (p2 > L2), 0.0, val * spl.ev(c1, c2, dy=1))
    return val, dg1, dg2


@dataclass
class _Eval:
    residual: np.ndarray
    mono: np.ndarray
    standard: np.ndarray
    filtered_share: float
    jac: sp.csc_matrix | None = None
    dres_df: np.ndarray | None = None  # diagonal of dM_F/df at interior nodes


def _evaluate(u: np.ndarray, prob: MaProblem, lay: _Layout, jacobian: bool) -> _Eval:
    st = lay.st
    uf = u.ravel()
    U = uf[lay.nbr]
    fi = prob.f.ravel()[lay.interior]
    d = prob.delta
    centre = prob.fixed_point[0] * lay.n2 + prob.fixed_point[1]
    u0 = uf[centre]
    op = {k: U @ v for k, v in st.items()}

    def ratio(p1s, p2s):
        gv, dg1, dg2 = _interp(prob, op[p1s], op[p2s])
        q = fi / gv
        dq = -(q / gv)[:, None] * (dg1[:, None] * st[p1s] + dg2[:, None] * st[p2s])
        return q, dq, 1.0 / gv

    def branch(a, b, sa, sb, qpack):
        q, dq, dqdf = qpack
        ma, mb = np.maximum(a, d), np.maximum(b, d)
        val = ma * mb + np.minimum(a, d) - d + np.minimum(b, d) - d - q
        da = np.where(a > d, mb, 1.0)
        db = np.where(b > d, ma, 1.0)
        return val, da[:, None] * sa + db[:, None] * sb - dq, dqdf

    q_axis = ratio("d1", "d2")
    q_diag = ratio("p1_rot", "p2_rot")
    ma1, j1, f1 = branch(op["d11"], op["d22"], st["d11"], st["d22"], q_axis)
    ma2, j2, f2 = branch(op["dvv"], op["dww"], st["dvv"], st["dww"], q_diag)
    pick1 = ma1 <= ma2
    mono = -np.where(pick1, ma1, ma2) + u0
    det = op["d11"] * op["d22"] - op["d12"] ** 2
    standard = -det + q_axis[0] + u0
    z = (standard - mono) / prob.epsilon
    filt = mono + prob.epsilon * filter_s(z)
    res = np.empty(lay.n)
    res[lay.interior] = filt
    res[lay.boundary] = lay.bc @ uf - lay.bc_target
    ev = _Eval(res, mono, standard, float(np.mean(np.abs(z) > 1)))
    if not jacobian:
        return ev
    jm = -np.where(pick1[:, None], j1, j2)
    jn = -(op["d22"][:, None] * st["d11"] + op["d11"][:, None] * st["d22"]
           - 2 * op["d12"][:, None] * st["d12"]) + q_axis[1]
    s = filter_ds(z)[:, None]
    jf = jm + s * (jn - jm)
    fm = np.where(pick1, f1, f2)
    ev.dres_df = fm + s[:, 0] * (q_axis[2] - fm)
    ni = lay.interior.size
    rows = np.concatenate([np.repeat(lay.interior, 9), lay.interior])
    cols = np.concatenate([lay.nbr.ravel(), np.full(ni, centre)])
    vals = np.concatenate([jf.ravel(), np.ones(ni)])
    bc = lay.bc.tocoo()
    rows = np.concatenate([rows, lay.boundary[bc.row]])
    cols = np.concatenate([cols, bc.col])
    vals = np.concatenate([vals, bc.data])
    ev.jac = sp.csc_matrix((vals, (rows, cols)), shape=(lay.n, lay.n))
    return ev


# ------------------------------------------------------------------ public API


def ma_monotone_residual(u, prob: MaProblem) -> np.ndarray:
    lay = _Layout(*prob.shape, prob.h)
    out = np.zeros(prob.shape)
    out.ravel()[lay.interior] = _evaluate(np.asarray(u, float), prob, lay, False).mono
    return out


def ma_standard_residual(u, prob: MaProblem) -> np.ndarray:
    lay = _Layout(*prob.shape, prob.h)
    out = np.zeros(prob.shape)
    out.ravel()[lay.interior] = _evaluate(np.asarray(u, float), prob, lay, False).standard
    return out


def ma_filtered_residual(u, prob: MaProblem, include_boundary: bool = False) -> np.ndarray:
    lay = _Layout(*prob.shape, prob.h)
    r = _evaluate(np.asarray(u, float), prob, lay, False).residual.reshape(prob.shape)
    if not include_boundary:
        r = r.copy()
        r[0, :] = r[-1, :] = r[:, 0] = r[:, -1] = 0.0
    return r


def ma_jacobian(u, prob: MaProblem) -> sp.csc_matrix:
    lay = _Layout(*prob.shape, prob.h)
    return _evaluate(np.asarray(u, float), prob, lay, True).jac


def identity_potential(prob: MaProblem) -> np.ndarray:
    x1, x2 = prob.coords()
    return 0.5 * (x1**2 + x2**2)


def _newton(prob: MaProblem, lay: _Layout, u: np.ndarray, config: MaConfig):
    history = []
    ev = _evaluate(u, prob, lay, True)
    rn = float(np.abs(ev.residual).max())
    history.append(rn)
    iters = 0
    while rn >= config.tol:
        if iters >= config.max_iters:
            raise MaNonConvergence(f"Newton did not converge in {config.max_iters} iterations", history)
        try:
            step = splu(ev.jac).solve(-ev.residual)
        except RuntimeError as exc:
            raise MaNonConvergence(f"singular Jacobian ({exc})", history) from exc
        t = 1.0
        for _ in range(config.max_halvings + 1):
            trial = u + t * step.reshape(u.shape)
            try:
                ev_t = _evaluate(trial, prob, lay, True)
                rt = float(np.abs(ev_t.residual).max())
            except MaDomainError:
                rt = np.inf
            if rt < rn:
                break
            t *= 0.5
        else:
            raise MaNonConvergence("line search stagnated", history)
        u, ev, rn = trial, ev_t, rt
        history.append(rn)
        iters += 1
    return u, ev, history, iters


def _continuation(prob: MaProblem, lay: _Layout, config: MaConfig, history: list[float]):
    """Homotopy from uniform densities to (f, g), halving the step after a failed stage."""
    uni = np.full(prob.shape, 1.0 / np.sum(prob.weights()))
    u = identity_potential(prob)
    s, ds, iters = 0.0, 0.25, 0
    while s < 1.0:
        t = min(1.0, s + ds)
        sub = MaProblem((1 - t) * uni + t * prob.f, (1 - t) * uni + t * prob.g, prob.h, prob.delta,
                        prob.epsilon, prob.g_lipschitz, prob.fixed_point, prob.f_clamped)
        try:
            u_t, ev, h_t, it = _newton(sub, lay, u, config)
        except MaNonConvergence as exc:
            history += exc.history
            ds *= 0.5
            if ds < 1.0 / 256:
                raise MaNonConvergence(f"continuation stalled at blend {s:.4f}", history) from exc
            continue
        history += h_t
        iters += it
        u, s = u_t, t
        ds = min(2 * ds, 0.5)
    return u, ev, history, iters


def ma_solve(prob: MaProblem, config: MaConfig = MaConfig(), u_init: np.ndarray | None = None) -> MaSolution:
    """Damped Newton on the filtered scheme, starting from the identity-map potential."""
    lay = _Layout(*prob.shape, prob.h)
    u = identity_potential(prob) if u_init is None else np.array(u_init, dtype=float)
    try:
        u, ev, history, iters = _newton(prob, lay, u, config)
    except MaNonConvergence as first:
        if not config.continuation:
            raise
        u, ev, history, iters = _continuation(prob, lay, config, list(first.history))
    sol = MaSolution(u, gradient_map(u, prob, lay), history[-1], iters, ev.filtered_share, history)
    sol.eval = ev
    if config.dump_dir:
        dump_solution(sol, prob, config.dump_dir)
    return sol


def gradient_map(u: np.ndarray, prob: MaProblem, lay: _Layout | None = None) -> np.ndarray:
    lay = lay or _Layout(*prob.shape, prob.h)
    uf = u.ravel()
    return np.stack([(lay.grad1 @ uf).reshape(prob.shape), (lay.grad2 @ uf).reshape(prob.shape)])


def w2_squared_2d(sol: MaSolution, prob: MaProblem) -> float:
    """``sum f |x - grad u|^2`` with trapezoid cell areas."""
    x1, x2 = prob.coords()
    cost = (x1 - sol.map[0]) ** 2 + (x2 - sol.map[1]) ** 2
    return float(np.sum(prob.weights() * prob.f * cost))


def w2_frechet_2d(sol: MaSolution, prob: MaProblem) -> np.ndarray:
    """Gradient of :func:`w2_squared_2d` with respect to the source density ``f``.

    Differentiates through the discrete scheme: ``dW/df = a |x - Gu|^2 - Phi J^{-T} G^T (2 a f (Gu - x))``
    with ``a`` the cell areas, ``G`` the map operator, ``J`` the scheme Jacobian
    and ``Phi`` the diagonal derivative of the scheme with respect to ``f``.
    Samples raised to the density floor get zero derivative.
    """
    lay = _Layout(*prob.shape, prob.h)
    ev = sol.eval if sol.eval is not None and sol.eval.jac is not None else _evaluate(sol.u, prob, lay, True)
    a = prob.weights().ravel()
    fv = prob.f.ravel()
    r1 = sol.map[0].ravel() - lay.x[0]
    r2 = sol.map[1].ravel() - lay.x[1]
    rhs = lay.grad1.T @ (2 * a * fv * r1) + lay.grad2.T @ (2 * a * fv * r2)
    try:
        lam = splu(ev.jac).solve(rhs, trans="T")
    except RuntimeError as exc:
        raise MaNonConvergence(f"singular Jacobian in transposed solve ({exc})", sol.history) from exc
    grad = a * (r1**2 + r2**2)
    grad[lay.interior] -= ev.dres_df * lam[lay.interior]
    grad = grad.reshape(prob.shape)
    if prob.f_clamped is not None:
        grad[prob.f_clamped] = 0.0
    return grad


def dump_solution(sol: MaSolution, prob: MaProblem, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lay = _Layout(*prob.shape, prob.h)
    res = _evaluate(sol.u, prob, lay, False).residual.reshape(prob.shape)
    items = {"ma_u": sol.u, "ma_map_1": sol.map[0], "ma_map_2": sol.map[1], "ma_residual": res}
    return [write_grid(out / f"{k}.bin", v) for k, v in items.items()]


def misfit_j2(f: ShotRecord, g: ShotRecord, norm: NormConfig = NormConfig(), config: MaConfig = MaConfig(),
              c: float | None = None):
    """W2^2 between whole gathers treated as densities on the (receiver, time) box."""
    from .misfit1d import MisfitEval

    if f.data.shape != g.data.shape or f.axis != g.axis:
        raise ValueError(f"shot {f.shot_id}: synthetic and observed gathers differ in shape or time axis")
    n1, n2 = f.data.shape
    h = 1.0 / (max(n1, n2) - 1)
    w = trapezoid_weights((n1, n2), h)
    nf, ng = normalize_pair(f.data, g.data, norm, c=c, weights=w)
    prob = MaProblem.from_densities(nf.density, ng.density, h, config)
    sol = ma_solve(prob, config)
    value = w2_squared_2d(sol, prob)
    grad = w2_frechet_2d(sol, prob)
    adj = apply_normalization_jacobian_transpose(nf.jac, grad)
    diag = {
        "newton_iters": sol.newton_iters,
        "residual_norm": sol.residual_norm,
        "filter_fraction": sol.filter_fraction,
        "box_scale_receiver": (n1 - 1) * h,
        "box_scale_time_per_s": h / f.axis.dt,
        "delta": prob.delta,
        "epsilon": prob.epsilon,
    }
    return MisfitEval(value, f.like(adj), diag)
