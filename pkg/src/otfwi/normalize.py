"""Turning signed traces into unit-mass densities, with the transposed Jacobian.

All maps here have the form ``f -> p(f) / b`` with ``b = sum(w * p(f))`` and
``w`` trapezoidal quadrature weights. A 1D trace, a whole 2D gather, or a stack
of traces normalized row by row (``rowwise=True``) are all supported.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

OVERFLOW_LIMIT = 700.0


class DegenerateInputError(ValueError):
    """Normalization would produce zero total mass."""


def trapezoid_weights(shape, spacing) -> np.ndarray:
    """Tensor-product trapezoid weights for a regular grid.

    ``shape`` and ``spacing`` are ints/floats for 1D or tuples for nD.
    """
    shape = np.atleast_1d(shape)
    spacing = np.broadcast_to(np.atleast_1d(np.asarray(spacing, dtype=float)), shape.shape)
    w = np.ones(())
    for n, h in zip(shape, spacing):
        wk = np.full(int(n), float(h))
        if n > 1:
            wk[0] = wk[-1] = 0.5 * h
        w = np.multiply.outer(w, wk)
    return w


@dataclass
class NormalizationJacobianAction:
    """Captured intermediates of ``f -> p(f)/b`` to apply the transposed Jacobian."""

    method: str
    dp: np.ndarray  # pointwise p'(f)
    density: np.ndarray
    b: float | np.ndarray
    weights: np.ndarray
    through_mass: bool = True
    rowwise: bool = False


@dataclass
class NormalizedSignal:
    density: np.ndarray
    b: float | np.ndarray
    method: str
    c: float | np.ndarray
    weights: np.ndarray
    jac: NormalizationJacobianAction
    t0: float = 0.0
    dt: float | None = None
    degenerate: np.ndarray | None = field(default=None, repr=False)

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.density.shape[-1])

    def mass(self):
        if self.jac.rowwise:
            return np.sum(self.weights * self.density, axis=-1)
        return float(np.sum(self.weights * self.density))


def _weights_for(f: np.ndarray, dt, weights, rowwise: bool) -> np.ndarray:
    shape = f.shape[-1:] if rowwise else f.shape
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != shape:
            raise ValueError("quadrature weights do not match the signal shape")
        return w
    if dt is None:
        raise ValueError("either dt or weights is required")
    return trapezoid_weights(shape, dt)


def _finish(p, dp, w, method, c, through_mass, t0, dt, rowwise) -> NormalizedSignal:
    if rowwise:
        b = np.sum(w * p, axis=-1, keepdims=True)
        bad = ~(b[..., 0] > 0)
        if np.any(bad):
            b = np.where(b > 0, b, 1.0)
        density = p / b
        jac = NormalizationJacobianAction(method, dp, density, b, w, through_mass, True)
        return NormalizedSignal(density, b, method, c, w, jac, t0, dt, bad)
    b = float(np.sum(w * p))
    if not b > 0:
        raise DegenerateInputError(f"{method} normalization has zero total mass")
    density = p / b
    jac = NormalizationJacobianAction(method, dp, density, b, w, through_mass)
    return NormalizedSignal(density, b, method, c, w, jac, t0, dt)


def normalize_linear(f, g, dt=None, weights=None, shift=None, through_mass=True, t0=0.0, rowwise=False):
    """Shift both signals by a common constant and rescale each to unit mass.

    The shift is ``-min(f, g)`` (clipped at zero) unless given explicitly; it is
    held fixed when differentiating.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape:
        raise ValueError("linear normalization needs signals on the same axis")
    w = _weights_for(f, dt, weights, rowwise)
    if shift is not None:
        c = float(shift)
    elif rowwise:
        c = np.maximum(0.0, -np.minimum(f.min(axis=-1), g.min(axis=-1)))[..., None]
    else:
        c = max(0.0, -min(f.min(), g.min()))
    ones = np.ones_like(f)
    out = []
    for s in (f, g):
        p = s + c
        if np.any(p < -1e-14 * max(1.0, np.abs(p).max())):
            raise DegenerateInputError("shift leaves negative values")
        out.append(_finish(np.maximum(p, 0.0), ones, w, "linear", c, through_mass, t0, dt, rowwise))
    return out[0], out[1]


def signsensitive_map(f: np.ndarray, c) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise ``p(f)`` and ``p'(f)``: ``f + 1/c`` for f >= 0, ``exp(c f)/c`` below."""
    neg = f < 0
    e = np.exp(c * np.where(neg, f, 0.0))
    p = np.where(neg, e / c, f + 1.0 / c)
    dp = np.where(neg, e, 1.0)
    return p, dp


def normalize_signsensitive(f, c, dt=None, weights=None, through_mass=True, t0=0.0, rowwise=False):
    if not np.all(np.asarray(c) > 0):
        raise ValueError("sign-sensitive normalization needs c > 0")
    f = np.asarray(f, dtype=float)
    w = _weights_for(f, dt, weights, rowwise)
    p, dp = signsensitive_map(f, c)
    return _finish(p, dp, w, "signsensitive", c, through_mass, t0, dt, rowwise)


def normalize_exponential(f, c, dt=None, weights=None, through_mass=True, t0=0.0, rowwise=False):
    if not np.all(np.asarray(c) > 0):
        raise ValueError("exponential normalization needs c > 0")
    f = np.asarray(f, dtype=float)
    if np.max(np.asarray(c) * np.abs(f), initial=0.0) > OVERFLOW_LIMIT:
        raise ValueError(f"c * max|f| exceeds {OVERFLOW_LIMIT}; exp would overflow")
    w = _weights_for(f, dt, weights, rowwise)
    p = np.exp(c * f)
    return _finish(p, c * p, w, "exponential", c, through_mass, t0, dt, rowwise)


def apply_normalization_jacobian_transpose(jac: NormalizationJacobianAction, v) -> np.ndarray:
    """``(d density / d f)^T v`` including the quotient rule through ``b``."""
    v = np.asarray(v, dtype=float)
    if v.shape != jac.density.shape:
        raise ValueError(f"vector shape {v.shape} does not match the {jac.method} normalization")
    if not jac.through_mass:
        return jac.dp * v / jac.b
    if jac.rowwise:
        inner = np.sum(jac.density * v, axis=-1, keepdims=True)
    else:
        inner = float(np.sum(jac.density * v))
    return jac.dp / jac.b * (v - jac.weights * inner)


def default_c(*signals, factor: float = 10.0) -> float:
    """Sign-sensitive scale ``factor / max|signal|``."""
    amp = max(float(np.abs(s).max(initial=0.0)) for s in signals)
    return factor / amp if amp > 0 else 1.0


@dataclass(frozen=True)
class NormConfig:
    """How traces are turned into densities.

    ``c=None`` means ``factor / max|g|`` taken over the observed shot record.
    """

    method: str = "signsensitive"  # "linear", "signsensitive" or "exponential"
    c: float | None = None
    factor: float = 10.0
    shift: float | None = None
    through_mass: bool = True

    def __post_init__(self):
        if self.method not in ("linear", "signsensitive", "exponential"):
            raise ValueError(f"unknown normalization {self.method!r}")

    def scale_for(self, g) -> float:
        return self.c if self.c is not None else default_c(g, factor=self.factor)


def normalize_pair(f, g, config: NormConfig, c=None, dt=None, weights=None, rowwise=False):
    """Normalize synthetic ``f`` and observed ``g`` with one configuration."""
    if config.method == "linear":
        return normalize_linear(f, g, dt, weights, shift=config.shift, through_mass=config.through_mass,
                                rowwise=rowwise)
    c = config.scale_for(g) if c is None else c
    fn = normalize_signsensitive if config.method == "signsensitive" else normalize_exponential
    out = (fn(f, c, dt, weights, config.through_mass, rowwise=rowwise),
           fn(g, c, dt, weights, config.through_mass, rowwise=rowwise))
    return out


def warn_degenerate(count: int, where: str) -> None:
    if count:
        warnings.warn(f"{count} degenerate trace(s) in {where} contribute zero misfit", RuntimeWarning, stacklevel=3)
