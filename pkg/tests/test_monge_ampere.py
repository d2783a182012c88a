import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otfwi.misfit1d import w2_squared_1d
from otfwi.monge_ampere import (
    MaConfig,
    MaDomainError,
    MaProblem,
    filter_s,
    identity_potential,
    ma_filtered_residual,
    ma_jacobian,
    ma_monotone_residual,
    ma_solve,
    ma_standard_residual,
    misfit_j2,
    w2_frechet_2d,
    w2_squared_2d,
)
from otfwi.normalize import normalize_linear, trapezoid_weights
from otfwi.wave import ShotRecord, TimeAxis


def unit(p, h):
    return p / np.sum(trapezoid_weights(p.shape, h) * p)


def coords(n):
    h = 1.0 / (n - 1)
    x1, x2 = np.meshgrid(np.arange(n) * h, np.arange(n) * h, indexing="ij")
    return h, x1, x2


def smooth_pair(n):
    h, x1, x2 = coords(n)
    f = unit(1 + 0.5 * np.sin(3 * x1) * np.cos(2 * x2) + 0.3 * x1, h)
    g = unit(1 + 0.4 * np.cos(2 * x1 + x2), h)
    return h, x1, x2, f, g


def interior(a):
    return a[1:-1, 1:-1]


def test_identity_problem():
    h, *_ = coords(17)
    f = unit(np.ones((17, 17)), h)
    prob = MaProblem.from_densities(f, f)
    sol = ma_solve(prob)
    assert w2_squared_2d(sol, prob) <= 1e-10
    x1, x2 = prob.coords()
    assert np.abs(sol.map[0] - x1).max() <= 1e-8 and np.abs(sol.map[1] - x2).max() <= 1e-8
    assert np.abs(w2_frechet_2d(sol, prob)).max() <= 1e-8


def test_quadratic_exactness():
    n = 17
    h, x1, x2 = coords(n)
    a, b = 1.3, 0.7
    u = 0.5 * (a * x1**2 + b * x2**2)
    prob = MaProblem.from_densities(np.full((n, n), a * b), np.ones((n, n)), config=MaConfig(delta=0.1))
    u0 = u[prob.fixed_point]
    np.testing.assert_allclose(interior(ma_monotone_residual(u, prob)), u0, atol=1e-10)
    np.testing.assert_allclose(interior(ma_standard_residual(u, prob)), u0, atol=1e-10)
    np.testing.assert_allclose(interior(ma_filtered_residual(u, prob)), u0, atol=1e-10)


def test_saddle_and_cross_term():
    n = 9
    h, x1, x2 = coords(n)
    prob = MaProblem.from_densities(np.ones((n, n)), np.ones((n, n)), config=MaConfig(delta=0.05))
    saddle = 0.5 * (2.0 * x1**2 - 0.5 * x2**2)
    mono = interior(ma_monotone_residual(saddle, prob))
    std = interior(ma_standard_residual(saddle, prob))
    # the standard form sees det = -1; the monotone form only the delta-floored branches
    assert np.all(np.abs(mono - std) > 0.1)
    cross = x1 * x2
    u0 = cross[prob.fixed_point]
    np.testing.assert_allclose(interior(ma_standard_residual(cross, prob)), 1.0 + 1.0 + u0, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_filter_blend(seed):
    n = 9
    rng = np.random.default_rng(seed)
    prob = MaProblem.from_densities(np.ones((n, n)), np.ones((n, n)) + rng.random((n, n)))
    u = identity_potential(prob) + 0.02 * rng.standard_normal((n, n))
    mm = ma_monotone_residual(u, prob)
    mn = ma_standard_residual(u, prob)
    mf = ma_filtered_residual(u, prob)
    eps = prob.epsilon
    np.testing.assert_allclose(mf, mm + eps * filter_s((mn - mm) / eps), atol=1e-12)
    far = np.abs(mn - mm) >= 2 * eps
    np.testing.assert_allclose(mf[far], mm[far], atol=1e-12)
    same = mn == mm
    np.testing.assert_allclose(mf[same], mn[same], atol=1e-12)


def test_jacobian_matches_finite_differences():
    n = 13
    h, x1, x2, f, g = smooth_pair(n)
    prob = MaProblem.from_densities(f, g)
    rng = np.random.default_rng(0)
    u = identity_potential(prob) + 0.01 * rng.standard_normal((n, n))
    J = ma_jacobian(u, prob).toarray()

    def res(v):
        return ma_filtered_residual(v, prob, include_boundary=True).ravel()

    for k in rng.choice(n * n, 12, replace=False):
        e = np.zeros(n * n)
        e[k] = 1e-7
        col = (res(u + e.reshape(n, n)) - res(u - e.reshape(n, n))) / 2e-7
        assert np.abs(col - J[:, k]).max() <= 1e-6 * np.abs(J[:, k]).max()


@pytest.mark.parametrize("n", [17, 33])
def test_smooth_pair_solution_properties(n):
    h, x1, x2, f, g = smooth_pair(n)
    prob = MaProblem.from_densities(f, g)
    sol = ma_solve(prob)
    assert sol.newton_iters <= 30
    u = sol.u
    second = [u[2:, 1:-1] - 2 * u[1:-1, 1:-1] + u[:-2, 1:-1],
              u[1:-1, 2:] - 2 * u[1:-1, 1:-1] + u[1:-1, :-2],
              (u[2:, 2:] - 2 * u[1:-1, 1:-1] + u[:-2, :-2]) / 2,
              (u[2:, :-2] - 2 * u[1:-1, 1:-1] + u[:-2, 2:]) / 2]
    assert min(s.min() for s in second) / h**2 >= -10 * prob.delta
    # Neumann condition: the boundary maps onto itself
    m1, m2 = sol.map
    assert max(np.abs(m1[0]).max(), np.abs(m1[-1] - 1).max(),
               np.abs(m2[:, 0]).max(), np.abs(m2[:, -1] - 1).max()) <= h
    # quadratic tail of Newton
    r = sol.history[-3:]
    assert r[2] / r[1] < r[1] / r[0] < 1
    # push-forward of f matches g on coarse bins, error O(h)
    w = trapezoid_weights((n, n), h)
    edges = np.linspace(0.0, 1.0, 5)
    edges[[0, -1]] += [-1e-9, 1e-9]
    A = np.histogram2d(m1.ravel(), m2.ravel(), bins=[edges, edges], weights=(w * f).ravel())[0]
    B = np.histogram2d(x1.ravel(), x2.ravel(), bins=[edges, edges], weights=(w * g).ravel())[0]
    assert np.abs(A - B).sum() <= 3 * h


def test_frechet_matches_finite_differences():
    n = 13
    h, x1, x2, f, g = smooth_pair(n)
    prob = MaProblem.from_densities(f, g)
    sol = ma_solve(prob)
    G = w2_frechet_2d(sol, prob)
    w = trapezoid_weights((n, n), h)
    rng = np.random.default_rng(1)

    def W(ff):
        p = MaProblem.from_densities(ff, g)
        return w2_squared_2d(ma_solve(p, MaConfig(tol=1e-12)), p)

    for _ in range(3):
        d = rng.standard_normal((n, n))
        d -= np.sum(w * d) / np.sum(w)
        step = 1e-6
        fd = (W(f + step * d) - W(f - step * d)) / (2 * step)
        assert np.sum(G * d) == pytest.approx(fd, rel=1e-3)
    assert np.sum(G * -G) < 0


def test_agrees_with_1d_on_product_densities():
    n = 33
    h, x1, x2 = coords(n)
    p = 1 + 0.8 * np.exp(-(((x2 - 0.4) / 0.1) ** 2))
    q = 1 + 0.8 * np.exp(-(((x2 - 0.55) / 0.1) ** 2))
    prob = MaProblem.from_densities(unit(p, h), unit(q, h))
    w2d = w2_squared_2d(ma_solve(prob), prob)
    a, b = normalize_linear(p[0], q[0], dt=h, shift=0.0)
    assert w2d == pytest.approx(w2_squared_1d(a, b), rel=0.01)


def test_domain_errors():
    with pytest.raises(MaDomainError):
        MaProblem.from_densities(-np.ones((5, 5)), np.ones((5, 5)))
    with pytest.raises(MaDomainError):
        MaProblem.from_densities(np.ones((5, 5)), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        MaProblem.from_densities(np.ones((2, 5)), np.ones((2, 5)))


def test_misfit_j2_zero_for_equal_gathers():
    ax = TimeAxis(24, 0.01)
    data = np.sin(np.arange(24)[None, :] * 0.3 + np.arange(10)[:, None])
    rec = ShotRecord(data, ax)
    ev = misfit_j2(rec, rec)
    assert ev.value <= 1e-12
    assert np.abs(ev.adjoint_source.data).max() <= 1e-8
