import numpy as np
import pytest

from eqhjb.core import ConfigError, SpaceTimeGrid, make_grid
from eqhjb.merton import (MertonParams, equilibrium_closed_form, fixed_point_residual,
                          integral_bounds, naive_phi, solve_integral_equation, solve_phi1,
                          solve_phi2, time_consistent_oracle)


def test_phi2_constant_coefficients():
    P = MertonParams()
    s = np.linspace(0, 1, 401)
    phi2 = solve_phi2(P, s)
    assert phi2[0, 0] == pytest.approx(0.952419, abs=1e-6)
    # constant w, z: exp(-w tau) g2 + z (1 - exp(-w tau)) / w
    tau = 1 - s
    exact = np.exp(-0.1 * tau) + 0.05 * (1 - np.exp(-0.1 * tau)) / 0.1
    assert np.allclose(np.diagonal(phi2), exact, atol=1e-10)


def test_param_validation():
    with pytest.raises(ConfigError):
        MertonParams(mu=0.02)
    with pytest.raises(ConfigError):
        MertonParams(beta=1.0)
    with pytest.raises(ConfigError):
        MertonParams(z=lambda t, s: 0.0 * s)
    assert MertonParams().risky_ratio == pytest.approx(2.5)


def test_integral_equation_terminal_and_bounds():
    P = MertonParams()
    res = solve_integral_equation(P, n_quad=401, tol=1e-12)
    assert res.phibar[-1] == pytest.approx(1.0 / P.v(1.0, 1.0), rel=1e-14)
    assert res.floor_hits == 0
    phi1 = solve_phi1(P, res.phibar, res.s)
    assert np.allclose(phi1[:, -1], 1.0, atol=1e-14)
    assert np.allclose(np.diagonal(phi1) / P.v(res.s, res.s), res.phibar, atol=1e-11)
    assert integral_bounds(P, res.s).check(res.phibar)


def test_fixed_point_residual_small():
    P = MertonParams()
    tol = 1e-10
    res = solve_integral_equation(P, n_quad=801, tol=tol)
    assert fixed_point_residual(P, res) <= 10 * tol


def test_time_consistent_reduces_to_ode():
    P = MertonParams(v=lambda t, s: np.exp(-0.1 * s) + 0 * t)
    assert P.time_consistent() and not MertonParams().time_consistent()
    res = solve_integral_equation(P, n_quad=801, tol=1e-12)
    ode = time_consistent_oracle(P, res.s)
    assert np.max(np.abs(res.phibar - ode)) < 1e-6
    assert np.max(np.abs(naive_phi(P, res.s[::100]) / P.v(res.s[::100], res.s[::100])
                         - res.phibar[::100])) < 1e-6


def test_naive_differs_when_inconsistent():
    P = MertonParams()
    s = np.linspace(0, 1, 401)
    res = solve_integral_equation(P, s_nodes=s, tol=1e-12)
    phin = naive_phi(P, s[::50])
    soph = res.phibar[::50] * P.v(s[::50], s[::50])
    assert abs(phin[-1] - soph[-1]) < 1e-12
    assert np.max(np.abs(phin - soph)) > 1e-4


def test_closed_form_fields():
    P = MertonParams()
    g = SpaceTimeGrid(np.linspace(0, 1, 11), np.linspace(0.5, 4.5, 9), "power", closure_exponent=0.5)
    sol = equilibrium_closed_form(P, g)
    y = g.y_nodes
    assert np.allclose(sol.a_policy.values / y, 2.5)
    assert np.allclose(sol.V.values[-1], y ** 0.5 + y ** 0.5)
    assert np.allclose(sol.c_policy.values, sol.phibar[:, None] ** -2 * y)
    with pytest.raises(ConfigError, match="y_min"):
        equilibrium_closed_form(P, make_grid(1.0, 11, 0.0, 1.0, 5))


def test_phi2_reductions():
    P = MertonParams()
    P.z = lambda t, s: 0.0 * (t + s)          # bypasses the positivity check on purpose
    s = np.linspace(0, 1, 201)
    phi2 = solve_phi2(P, s)
    assert np.allclose(phi2, np.exp(-0.1 * (1 - s))[None, :], atol=1e-13)
    Q = MertonParams(g2=lambda t: 1.0 + t)
    assert np.allclose(solve_phi2(Q, s)[:, -1], 1.0 + s, atol=1e-14)


def _ode_defect(P, n):
    s = np.linspace(0, 1, n)
    res = solve_integral_equation(P, s_nodes=s, tol=1e-13)
    phi = solve_phi1(P, res.phibar, s)
    t, ss = np.meshgrid(s, s, indexing="ij")
    b = P.beta
    lhs = np.gradient(phi, s, axis=1, edge_order=2)
    rhs = -((P.k(t, ss) - b * res.phibar[None, :] ** (1 / (b - 1))) * phi
            + P.v(t, ss) * res.phibar[None, :] ** (b / (b - 1)))
    return float(np.max(np.abs(lhs - rhs)[t <= ss])), res.phibar


def test_phi1_satisfies_ode_and_quadrature_converges():
    P = MertonParams()
    d1, p1 = _ode_defect(P, 101)
    d2, p2 = _ode_defect(P, 201)
    d3, p3 = _ode_defect(P, 401)
    assert d2 < d1 / 3.5 and d3 < d2 / 3.5
    c1 = np.max(np.abs(p2[::2] - p1))
    c2 = np.max(np.abs(p3[::2] - p2))
    assert c2 < c1 / 3.5
