import numpy as np
import pytest

from eqhjb.core import ConfigError, DivergenceError, Field4, make_grid
from eqhjb.hjb import assemble_equilibrium_F
from eqhjb.linear import CoefficientSet, LinearProblem, StepperConfig, solve_linear
from eqhjb.merton import MertonParams, merton_spec
from eqhjb.nonlinear import (NonlinearConfig, Nonlinearity, linearize_at_initial,
                             numeric_partials, pde_residual, picard_step, quasilinear_solve,
                             solve_nonlinear)

PERIODIC = dict(y_min=0.0, y_max=2 * np.pi, closure="periodic")


def _data(grid, fn):
    s, y = grid.s_nodes, grid.y_nodes
    return np.broadcast_to(fn(s[:, None, None], y[None, :, None], y[None, None, :]),
                           (grid.n_s, grid.n_y, grid.n_y)).copy()


def linear_F():
    return Nonlinearity(lambda t, s, x, y, zl, zd: zl[2] + 0.3 * zd[1] - 0.2 * zd[0])


def G(t, x, y):
    return np.sin(y) + 0.2 * np.cos(x) + 0 * t


def test_linearize_linear_constants():
    g = make_grid(1.0, 5, n_y=8, **PERIODIC)
    co = linearize_at_initial(linear_F(), _data(g, G), g)
    A, B = co.materialize(g)
    assert set(A) == {2} and np.allclose(A[2], 1.0, atol=1e-9)
    assert np.allclose(B[1], -0.3, atol=1e-9) and np.allclose(B[0], 0.2, atol=1e-9)


def test_linearize_chain_rule():
    g = make_grid(1.0, 5, n_y=16, **PERIODIC)
    a = 0.7
    F = Nonlinearity(lambda t, s, x, y, zl, zd: a * zl[2] + np.sin(zl[1]))
    g0 = _data(g, G)
    co = linearize_at_initial(F, g0, g)
    A, _ = co.materialize(g)
    from eqhjb.core import diff_state
    gy = diff_state(g0, g.dy, 1, g.closure)
    assert np.allclose(A[2], a, atol=1e-8)
    assert np.allclose(A[1][:, 0], np.cos(gy), atol=1e-8)


def test_linearize_rejects_data_outside_domain():
    g = make_grid(1.0, 5, n_y=8, **PERIODIC)
    F = Nonlinearity(linear_F().eval, domain_radius=1.0)
    with pytest.raises(ConfigError, match="outside nonlinearity domain"):
        linearize_at_initial(F, 3.0 + _data(g, G), g)


def test_numeric_partials_on_merton_hamiltonian():
    P = MertonParams()
    F = assemble_equilibrium_F(merton_spec(P), P.T)
    rng = np.random.default_rng(5)
    y = rng.uniform(0.6, 3.0, 10)
    zl = (rng.uniform(-3, -1, 10), rng.uniform(-2, -0.5, 10), rng.uniform(0.1, 0.5, 10))
    zd = (-2.0 * y ** 0.5, -0.9 * y ** -0.5, 0.45 * y ** -1.5)
    t = x = 0.3
    s = 0.6
    dl, _ = numeric_partials(F.eval, t, s, x, y, zl, zd)
    # at a frozen control the cost-form H is affine in (u, p, q): partials -w, b(a), sigma^2 a^2 / 2
    a, c = F.policy(P.T - s, y, zd)
    assert np.allclose(dl[0], -P.w(P.T - t, P.T - s), rtol=1e-7)
    assert np.allclose(dl[1], P.r * y + (P.mu - P.r) * a - c, rtol=1e-6)
    assert np.allclose(dl[2], 0.5 * P.sigma ** 2 * a ** 2, rtol=1e-6)


def test_picard_fixed_point_and_zero():
    g = make_grid(1.0, 9, n_y=8, **PERIODIC)
    F = linear_F()
    g0 = _data(g, G)
    frozen = linearize_at_initial(F, g0, g)
    cfg = StepperConfig(inner_picard_tol=1e-13)
    uk = np.repeat(g0[:, None], g.n_s, axis=1)
    once = picard_step(uk, F, frozen, g, cfg)
    twice = picard_step(once, F, frozen, g, cfg)
    assert np.max(np.abs(twice - once)) < 1e-9
    zero = np.zeros(g.shape4)
    F0 = Nonlinearity(lambda t, s, x, y, zl, zd: zl[2] + zl[0] ** 2)
    assert np.max(np.abs(picard_step(zero, F0, linearize_at_initial(F0, zero[:, 0], g), g))) == 0


def test_linear_F_matches_linear_solver():
    g = make_grid(1.0, 21, n_y=16, **PERIODIC)
    u, st, ext = solve_nonlinear(linear_F(), _data(g, G), g)
    lin = solve_linear(LinearProblem(CoefficientSet({2: 1.0}, {1: -0.3, 0: 0.2}), 0.0, G, g))
    assert len(st.residual_history) == 2 and len(ext.intervals) == 1
    assert np.max(np.abs(u.values - lin.values)) < 1e-8


def test_contraction_and_residual():
    g = make_grid(1.0, 21, n_y=16, **PERIODIC)
    F = Nonlinearity(lambda t, s, x, y, zl, zd: zl[2] + 0.5 * zd[2] + 0.5 * zl[0] ** 2)
    u, st, ext = solve_nonlinear(F, _data(g, lambda t, x, y: 0.5 * (1 + np.cos(y)) + 0 * t + 0 * x), g,
                                 NonlinearConfig(delta_init=0.25))
    assert ext.tau == 1.0 and all(iv[2] == "converged" for iv in ext.intervals)
    for iv in st.intervals:
        assert iv["ratios"][-1] <= 0.5
    assert st.residual_history[-1] < 1e-8


def test_uniqueness_from_two_starts():
    g = make_grid(0.5, 11, n_y=8, **PERIODIC)
    F = Nonlinearity(lambda t, s, x, y, zl, zd: zl[2] + 0.5 * zd[2] + 0.5 * zl[0] ** 2)
    g0 = _data(g, lambda t, x, y: 0.3 * np.cos(y - x) + 0 * t)
    frozen = linearize_at_initial(F, g0, g)
    cfg = StepperConfig(inner_picard_tol=1e-13)
    ends = []
    first = np.repeat(g0[:, None], g.n_s, axis=1)
    other = first.copy()
    other[:, 1:] += 0.1 * np.cos(g.y_nodes)
    for uk in (first, other):
        for _ in range(60):
            new = picard_step(uk, F, frozen, g, cfg)
            done = np.max(np.abs(new - uk)) < 1e-11
            uk = new
            if done:
                break
        ends.append(uk)
    assert np.max(np.abs(ends[0] - ends[1])) < 2e-8


def test_blow_up_stops_at_domain_exit():
    g = make_grid(1.0, 201, n_y=8, **PERIODIC)
    F = Nonlinearity(lambda t, s, x, y, zl, zd: zl[2] + zl[0] ** 2, domain_radius=200.0)
    u, st, ext = solve_nonlinear(F, 2.0, g, NonlinearConfig(delta_init=0.1))
    # u' = u^2, u(0) = 2 blows up at s = 0.5
    assert ext.intervals[-1][2] == "domain-exit"
    assert 0.4 < ext.tau < 0.5
    assert u.meta["valid_until"] < g.n_s - 1


def test_underflow_is_hard_failure():
    g = make_grid(1.0, 5, n_y=8, **PERIODIC)
    F = Nonlinearity(lambda t, s, x, y, zl, zd: zl[2] + 40 * zl[0] ** 2)
    with pytest.raises(DivergenceError):
        solve_nonlinear(F, 1.0, g, NonlinearConfig(max_outer=2))


def test_quasilinear_matches_picard_and_heat():
    g = make_grid(1.0, 21, n_y=16, **PERIODIC)
    g0 = _data(g, G)
    uq = quasilinear_solve(0.5, lambda t, s, x, y, zl, zd: -0.3 * zl[1] * zd[0], g0, g, tol=1e-13)
    F = Nonlinearity(lambda t, s, x, y, zl, zd: 0.5 * zl[2] - 0.3 * zl[1] * zd[0])
    un, _, _ = solve_nonlinear(F, g0, g, NonlinearConfig(tol=1e-11))
    assert np.max(np.abs(uq.values - un.values)) < 1e-9
    u0 = quasilinear_solve(1.0, lambda t, s, x, y, zl, zd: 0.0 * zl[0], g0, g)
    heat = solve_linear(LinearProblem(CoefficientSet({2: 1.0}), None, G, g))
    assert np.max(np.abs(u0.values - heat.values)) < 1e-12


def test_quasilinear_manufactured_order():
    import sympy as sp
    t, s, x, y = sp.symbols("t s x y")
    U = sp.exp(0.3 * (t - s)) * sp.sin(y - x) + 0.5 * sp.cos(s) * sp.cos(y)
    a2 = 0.5
    Ud = U.subs({t: s, x: y}, simultaneous=True)
    f = sp.diff(U, s) - a2 * sp.diff(U, y, 2) + sp.diff(U, y) * Ud
    fn = sp.lambdify((t, s, x, y), f, "numpy")
    Un = sp.lambdify((t, s, x, y), U, "numpy")

    def Q(t_, s_, x_, y_, zl, zd):
        return -zl[1] * zd[0] + fn(t_, s_, x_, y_)

    errs = []
    for n in (16, 32):
        g = make_grid(1.0, n + 1, n_y=n, **PERIODIC)
        g0 = _data(g, lambda tt, xx, yy: Un(tt, 0.0, xx, yy))
        u = quasilinear_solve(a2, Q, g0, g, tol=1e-13)
        tt, ss, xx, yy = g.open_mesh()
        errs.append(np.max(np.abs(u.values - Un(tt, ss, xx, yy))))
    assert np.log2(errs[0] / errs[1]) >= 1.8


def test_pde_residual_is_truncation_error():
    F = Nonlinearity(lambda t, s, x, y, zl, zd: zl[2] + 0 * zd[0])
    out = []
    for n in (16, 32):
        g = make_grid(1.0, n + 1, n_y=n, **PERIODIC)
        u = Field4.from_function(g, lambda t, s, x, y: np.exp(-s) * np.sin(y) + 0 * t * x)
        out.append(np.max(np.abs(pde_residual(F, u))))
    assert out[1] < 5e-3 and 3.5 < out[0] / out[1] < 4.5


def test_initial_data_stability():
    F = Nonlinearity(lambda t, s, x, y, zl, zd: zl[2] + 0.5 * zd[2] + 0.5 * zl[0] ** 2)
    consts = []
    for n in (16, 32):
        g = make_grid(0.5, n + 1, n_y=n, **PERIODIC)
        g0 = _data(g, lambda t, x, y: 0.3 * np.cos(y - x) + 0 * t)
        cfg = NonlinearConfig(tol=1e-12)
        base = solve_nonlinear(F, g0, g, cfg)[0].values
        eps = 1e-3
        bumped = solve_nonlinear(F, g0 + eps * np.sin(g.y_nodes), g, cfg)[0].values
        consts.append(np.max(np.abs(bumped - base)) / eps)
    assert consts[0] < 5 and abs(consts[1] - consts[0]) / consts[0] < 0.1
