import numpy as np
import pytest

from eqhjb.core import ConfigError, Field4, derivative, diff_state, make_grid, slice_diagonal
from eqhjb.linear import (CoefficientSet, LinearProblem, StepperConfig, apply_operator,
                          integral_rep, schauder_stability_probe, solve_linear, solve_local)


def smooth(t, s, x, y):
    return np.exp(0.5 * (t - s)) * (1 + 0.3 * np.sin(x)) * np.sin(y) + np.cos(s + t) * np.cos(x - 2 * y)


def test_operator_on_sine():
    g = make_grid(1.0, 5, 0.0, 2 * np.pi, 64, "periodic")
    u = Field4.from_function(g, lambda t, s, x, y: np.sin(y) + 0 * t)
    Lu = apply_operator(u, CoefficientSet({2: 1.0}))
    assert np.max(np.abs(Lu.values - np.sin(g.y_nodes))) < 2e-3


def test_operator_diagonal_ode_reduction():
    b, c = 0.7, 1.3
    errs = []
    for n in (21, 41):
        g = make_grid(1.0, n, 0.0, 1.0, 4)
        u = Field4.from_function(g, lambda t, s, x, y: c * np.exp(-b * s) + 0 * t)
        errs.append(np.max(np.abs(apply_operator(u, CoefficientSet({}, {0: b})).values)))
    assert errs[1] < 1e-3 and errs[0] / errs[1] > 3.5


def _brute_operator(u, A, B, grid):
    """Term-by-term loop over nodes with explicit periodic stencils."""
    nt, ns, nx, ny = u.shape
    h, ds = grid.dy, grid.ds
    out = np.zeros_like(u)

    def dy(w, l, k):
        if k == 0:
            return w[l]
        lp, lm = (l + 1) % ny, (l - 1) % ny
        if k == 1:
            return (w[lp] - w[lm]) / (2 * h)
        return (w[lp] - 2 * w[l] + w[lm]) / h ** 2

    for i in range(nt):
        for j in range(ns):
            for kx in range(nx):
                for l in range(ny):
                    if j == 0:
                        us = (-3 * u[i, 0, kx, l] + 4 * u[i, 1, kx, l] - u[i, 2, kx, l]) / (2 * ds)
                    elif j == ns - 1:
                        us = (3 * u[i, j, kx, l] - 4 * u[i, j - 1, kx, l] + u[i, j - 2, kx, l]) / (2 * ds)
                    else:
                        us = (u[i, j + 1, kx, l] - u[i, j - 1, kx, l]) / (2 * ds)
                    v = us
                    for k, a in A.items():
                        v -= a[i, j, kx, l] * dy(u[i, j, kx], l, k)
                    for k, b in B.items():
                        v += b[i, j, kx, l] * dy(u[j, j, l], l, k)
                    out[i, j, kx, l] = v
    return out


def test_operator_matches_brute_force():
    g = make_grid(1.0, 5, 0.0, 2 * np.pi, 6, "periodic")
    co = CoefficientSet({2: lambda t, s, x, y: 1 + 0.2 * np.cos(y + t) + 0 * s * x, 1: 0.3, 0: -0.2},
                        {2: 0.3, 1: lambda t, s, x, y: 0.2 * np.cos(y) + 0 * t * s * x, 0: 0.5})
    u = Field4.from_function(g, smooth)
    A, B = co.materialize(g)
    A = {k: np.broadcast_to(v, g.shape4) for k, v in A.items()}
    B = {k: np.broadcast_to(v, g.shape4) for k, v in B.items()}
    brute = _brute_operator(u.values, A, B, g)
    assert np.max(np.abs(apply_operator(u, co).values - brute)) < 1e-11


def _ir_lhs(u, I):
    g = u.grid
    dI = diff_state(u.values, g.dy, I, g.closure)
    j = np.arange(g.n_s)
    return dI - slice_diagonal(dI[j, j])[None, :, None, :]


def test_integral_rep_trivial_cases():
    g = make_grid(1.0, 9, 0.0, 1.0, 9)
    u = Field4.from_function(g, lambda t, s, x, y: np.sin(s) * y ** 2 + 0 * t * x)
    for I in (0, 1, 2):
        rep = integral_rep(derivative(u, "t"), derivative(u, "x"), I)
        assert np.max(np.abs(rep.values)) < 1e-14
    u = Field4.from_function(g, lambda t, s, x, y: t + x + 0 * s * y)
    rep = integral_rep(derivative(u, "t"), derivative(u, "x"), 0)
    t, s, x, y = g.open_mesh()
    assert np.max(np.abs(rep.values + ((t - s) + (x - y)))) < 1e-13


def test_integral_rep_paths_and_conservative_field():
    diffs, cons = [], []
    for n in (11, 21):
        g = make_grid(1.0, n, 0.0, 1.0, n)
        u = Field4.from_function(g, smooth)
        ut, ux = derivative(u, "t"), derivative(u, "x")
        for I in (0, 1):
            a = integral_rep(ut, ux, I, "space-first").values
            b = integral_rep(ut, ux, I, "time-first").values
            diffs.append(np.max(np.abs(a - b)))
        # d/dt of I^0 is -u_t and d/dx of I^0 is -u_x
        rep = integral_rep(ut, ux, 0)
        cons.append(max(np.max(np.abs(derivative(rep, "t").values + ut.values)),
                        np.max(np.abs(derivative(rep, "x").values + ux.values))))
    assert max(diffs[2:]) < max(diffs[:2]) / 3
    assert cons[1] < cons[0] / 3 and cons[1] < 1e-2


def test_nonlocal_ode_closed_form():
    g = make_grid(1.0, 101, 0.0, 2 * np.pi, 8, "periodic")
    u = solve_linear(LinearProblem(CoefficientSet({}, {0: 1.0}), None, 1.0, g))
    assert np.max(np.abs(u.values[:, -1] - np.exp(-1.0))) < 1e-3


def test_heat_eigenfunction_second_order():
    errs = []
    for n in (16, 32):
        g = make_grid(1.0, n + 1, 0.0, 2 * np.pi, n, "periodic")
        u = solve_linear(LinearProblem(CoefficientSet({2: 1.0}, {}, 1.0), None,
                                       lambda t, x, y: np.sin(y), g))
        t, s, x, y = g.open_mesh()
        errs.append(np.max(np.abs(u.values - np.exp(-s) * np.sin(y))))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_backward_direction_heat():
    g = make_grid(1.0, 33, 0.0, 2 * np.pi, 32, "periodic")
    u = solve_linear(LinearProblem(CoefficientSet({2: 1.0}), None, lambda t, x, y: np.sin(y), g,
                                   direction="backward"))
    t, s, x, y = g.open_mesh()
    assert np.max(np.abs(u.values - np.exp(-(1 - s)) * np.sin(y))) < 2e-3


def test_local_stepper_identical_without_b():
    g = make_grid(1.0, 9, 0.0, 2 * np.pi, 8, "periodic")
    p = LinearProblem(CoefficientSet({2: 1.0, 1: 0.3}, {0: 0.0}), lambda t, s, x, y: np.cos(s + y) + 0 * t * x,
                      lambda t, x, y: np.sin(x - y) + 0 * t, g)
    u = solve_linear(p)
    assert np.array_equal(u.values, solve_local(p).values)
    assert max(u.meta["inner_iterations"] or [0]) == 0


def _problem(g, f, gdata):
    co = CoefficientSet({2: 1.0, 1: 0.2}, {2: 0.3, 0: 0.5}, 0.5)
    return LinearProblem(co, f, gdata, g)


def test_superposition_and_zero():
    g = make_grid(1.0, 9, 0.0, 2 * np.pi, 8, "periodic")
    cfg = StepperConfig(inner_picard_tol=1e-13)
    f1 = lambda t, s, x, y: np.cos(s + x) * np.sin(y) + 0 * t
    f2 = lambda t, s, x, y: 0.5 + np.sin(t - y) + 0 * s * x
    g1 = lambda t, x, y: np.cos(x - y) + 0 * t
    g2 = lambda t, x, y: np.sin(2 * y) * (1 + t) + 0 * x
    u1 = solve_linear(_problem(g, f1, g1), cfg).values
    u2 = solve_linear(_problem(g, f2, g2), cfg).values
    both = solve_linear(_problem(g, lambda *a: f1(*a) + f2(*a), lambda *a: g1(*a) + g2(*a)), cfg).values
    assert np.max(np.abs(both - u1 - u2)) < 1e-10
    assert np.max(np.abs(solve_linear(_problem(g, None, 0.0), cfg).values)) == 0.0


def test_ellipticity_rejected():
    g = make_grid(1.0, 5, 0.0, 2 * np.pi, 8, "periodic")
    with pytest.raises(ConfigError, match="ellipticity"):
        solve_linear(LinearProblem(CoefficientSet({2: 0.1}, {}, 0.5), None, 1.0, g))
    with pytest.raises(ConfigError, match="ellipticity"):
        solve_linear(LinearProblem(CoefficientSet({2: 1.0}, {2: 0.8}, 0.5), None, 1.0, g))


def test_stepper_config_validation():
    with pytest.raises(ConfigError):
        StepperConfig(scheme="leapfrog")
    with pytest.raises(ConfigError):
        StepperConfig(inner_picard_tol=0.0)


def test_schauder_zero_perturbation_flagged():
    g = make_grid(1.0, 5, 0.0, 2 * np.pi, 8, "periodic")
    rep = schauder_stability_probe(_problem(g, None, 1.0), perturbation_scale=0.0)
    assert rep.zero_perturbation and np.isnan(rep.ratio)


def test_schauder_ratio_scale_invariant():
    g = make_grid(1.0, 9, 0.0, 2 * np.pi, 8, "periodic")
    p = _problem(g, lambda t, s, x, y: np.cos(s + x) * np.sin(y) + 0 * t, lambda t, x, y: np.cos(x - y) + 0 * t)
    cfg = StepperConfig(inner_picard_tol=1e-14, inner_picard_max=500)
    r1 = schauder_stability_probe(p, cfg, 1e-2).ratio
    r2 = schauder_stability_probe(p, cfg, 2e-2).ratio
    assert np.isfinite(r1) and abs(r1 - r2) / r1 < 1e-10
