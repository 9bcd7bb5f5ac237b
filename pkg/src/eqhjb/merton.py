"""Semi-analytic solution of the time-inconsistent investment-consumption problem.

Wealth X, risky fraction a, consumption c:

    dX = [r X + (mu - r) a - c] ds + sigma a dW,
    dY = -[v(t,s) c^beta - w(t,s) Y + z(t,s) x^gamma] ds + Z dW,
    Y(T) = g1(t) X(T)^beta + g2(t) x^gamma.

With u = phi1(t,s) y^beta + phi2(t,s) x^gamma the equilibrium equation becomes
a pair of ODEs in s, coupled through the diagonal phibar(s) = phi1(s,s)/v(s,s).
Everything here is quadrature on a fine s-grid (cumulative Simpson), plus
independent checks (Gauss-Legendre, a stiff ODE integrator).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, solve_ivp
from scipy.interpolate import CubicSpline

from .core import ConfigError, DivergenceError, Field2, SpaceTimeGrid

log = logging.getLogger(__name__)

EPS_POS = 1e-12


def _const(c):
    return lambda *args: np.full(np.broadcast_shapes(*(np.shape(a) for a in args)), float(c))


@dataclass
class MertonParams:
    """Market and preference data; v, w, z take (t, s), g1, g2 take t."""

    r: float = 0.03
    mu: float = 0.08
    sigma: float = 0.2
    beta: float = 0.5
    gamma: float = 0.5
    T: float = 1.0
    v: object = field(default=lambda t, s: np.exp(-0.1 * (s - t)))
    w: object = field(default_factory=lambda: _const(0.1))
    z: object = field(default_factory=lambda: _const(0.05))
    g1: object = field(default_factory=lambda: _const(1.0))
    g2: object = field(default_factory=lambda: _const(1.0))

    def __post_init__(self):
        if not (self.mu > self.r > 0):
            raise ConfigError("need mu > r > 0")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        for name in ("beta", "gamma"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        s = np.linspace(0, self.T, 41)
        t, ss = np.meshgrid(s, s, indexing="ij")
        for name in ("v", "w", "z"):
            vals = np.asarray(getattr(self, name)(t, ss), float)
            if not np.all(np.isfinite(vals)) or np.any(vals[t <= ss] <= 0):
                raise ConfigError(f"{name} must be positive on the (t, s) triangle")
        for name in ("g1", "g2"):
            vals = np.asarray(getattr(self, name)(s), float)
            if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise ConfigError(f"{name} must be positive")
        # crude C^1 check on v in s: first differences at h and h/2 agree
        h = self.T / 200
        tq = np.linspace(0, self.T - 2 * h, 50)
        d1 = (self.v(tq, tq + 2 * h) - self.v(tq, tq)) / (2 * h)
        d2 = (self.v(tq, tq + h) - self.v(tq, tq)) / h
        if np.max(np.abs(d1 - d2)) > 1e-2 * (1 + np.max(np.abs(d2))) + 50 * h:
            raise ConfigError("v does not look continuously differentiable in s")

    @property
    def risky_ratio(self):
        """a(s,y)/y = -(mu - r) / (sigma^2 (beta - 1))."""
        return -(self.mu - self.r) / (self.sigma ** 2 * (self.beta - 1))

    def k(self, t, s):
        b = self.beta
        return (self.r * b - (self.mu - self.r) ** 2 * b / (2 * self.sigma ** 2 * (b - 1))
                - self.w(t, s))

    def time_consistent(self):
        """True when v, w depend on s only and g1 is constant (sampled)."""
        s = np.linspace(0, self.T, 17)
        t, ss = np.meshgrid(s, s, indexing="ij")
        ok = all(np.allclose(f(t, ss), f(np.zeros_like(t), ss), rtol=0, atol=1e-14)
                 for f in (self.v, self.w))
        return ok and np.ptp(self.g1(s)) == 0


def _tail(f, s):
    """int_{s_j}^T f ds along the last axis, cumulative Simpson."""
    c = cumulative_simpson(f, x=s, axis=-1, initial=0.0)
    return c[..., -1:] - c


def quad_nodes(T, n_quad, n_sub=None):
    """Uniform quadrature nodes; when ``n_sub`` is given the node count is raised
    so that every (n_sub - 1)-grid node is also a quadrature node."""
    n_quad = int(n_quad)
    if n_quad < 3:
        raise ConfigError("need at least 3 quadrature nodes")
    if n_sub is not None:
        m = max(1, math.ceil((n_quad - 1) / (n_sub - 1)))
        n_quad = m * (n_sub - 1) + 1
    return np.linspace(0.0, T, n_quad)


def _subsample(s_fine, s_coarse):
    idx = np.searchsorted(s_fine, s_coarse - 1e-12 * s_fine[-1])
    if not np.allclose(s_fine[idx], s_coarse, atol=1e-12 * s_fine[-1]):
        raise ConfigError("coarse nodes are not a subset of the quadrature nodes")
    return idx


def solve_phi2(params, s_nodes):
    """phi2(t, s) on a (t, s) node table; rows t, columns s (full square)."""
    s = np.asarray(s_nodes, float)
    t, ss = np.meshgrid(s, s, indexing="ij")
    W = _tail(params.w(t, ss), s)                    # int_s^T w(t, tau)
    integ = np.exp(W) * params.z(t, ss)
    inner = _tail(integ, s)                          # int_s^T exp(W(t, l)) z(t, l)
    return np.exp(-W) * (params.g2(s)[:, None] + inner)


def _phi1_rows(params, phibar, t_rows, s):
    """phi1(t, s) for rows t given the diagonal phibar on nodes s."""
    b = params.beta
    t, ss = np.meshgrid(t_rows, s, indexing="ij")
    K = params.k(t, ss) - b * phibar[None, :] ** (1 / (b - 1))
    A = _tail(K, s)                                   # int_s^T K(t, tau)
    src = np.exp(-A) * params.v(t, ss) * phibar[None, :] ** (b / (b - 1))
    return np.exp(A) * (params.g1(t_rows)[:, None] + _tail(src, s))


def integral_equation_rhs(params, phibar, s):
    """phi1(s, s) / v(s, s) computed from a trial diagonal on nodes s."""
    table = _phi1_rows(params, phibar, s, s)
    return np.diagonal(table) / params.v(s, s)


@dataclass
class IntegralEquationResult:
    s: np.ndarray
    phibar: np.ndarray
    iterations: int
    residual_log: list
    floor_hits: int


def solve_integral_equation(params, n_quad=401, damping=1.0, tol=1e-10, max_iter=500,
                            s_nodes=None):
    """Damped fixed-point iteration for the diagonal phibar(s)."""
    if not 0 < damping <= 1:
        raise ConfigError("damping must lie in (0, 1]")
    s = quad_nodes(params.T, n_quad) if s_nodes is None else np.asarray(s_nodes, float)
    gbar = params.g1(s) / params.v(s, s)
    phi = np.array(gbar, float)
    hist = []
    floor_hits = 0
    for it in range(1, int(max_iter) + 1):
        new = (1 - damping) * phi + damping * integral_equation_rhs(params, phi, s)
        low = new < EPS_POS
        if np.any(low):
            floor_hits += int(low.sum())
            log.warning("positivity floor applied at %d nodes", int(low.sum()))
            new = np.where(low, EPS_POS, new)
        change = float(np.max(np.abs(new - phi)))
        hist.append(change)
        phi = new
        if change < tol:
            return IntegralEquationResult(s, phi, it, hist, floor_hits)
    raise DivergenceError(f"integral equation did not converge in {max_iter} sweeps", hist)


def fixed_point_residual(params, res, n_gauss=48):
    """max |phibar - RHS(phibar)| with RHS by nested Gauss-Legendre on a spline of phibar."""
    b = params.beta
    T = params.T
    spline = CubicSpline(res.s, res.phibar)
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    out = np.empty(res.s.size)
    for i, s0 in enumerate(res.s):
        if T - s0 <= 0:
            out[i] = abs(res.phibar[i] - params.g1(np.array(s0)) / params.v(s0, s0))
            continue
        lam = s0 + (T - s0) * (xg + 1) / 2
        wl = wg * (T - s0) / 2
        # int_s^lambda K(s, tau) for each lambda, then int_lambda^T for the tail
        tau = s0 + (lam[:, None] - s0) * (xg[None, :] + 1) / 2
        wt = wg[None, :] * (lam[:, None] - s0) / 2
        K = params.k(np.full_like(tau, s0), tau) - b * spline(tau) ** (1 / (b - 1))
        inner = np.sum(K * wt, axis=1)                    # int_s^lambda K
        Kl = params.k(np.full_like(lam, s0), lam) - b * spline(lam) ** (1 / (b - 1))
        total = np.sum(Kl * wl)                           # int_s^T K
        vbar = params.v(np.full_like(lam, s0), lam) / params.v(s0, s0)
        rhs = (math.exp(total) * params.g1(np.array(s0)) / params.v(s0, s0)
               + np.sum(np.exp(inner) * vbar * spline(lam) ** (b / (b - 1)) * wl))
        out[i] = abs(res.phibar[i] - rhs)
    return float(out.max())


def solve_phi1(params, phibar, s_nodes, t_nodes=None):
    """phi1(t, s) table (rows t) from the diagonal phibar on nodes s."""
    s = np.asarray(s_nodes, float)
    phibar = np.asarray(phibar, float)
    if np.any(phibar <= 0):
        raise ConfigError("phibar must be positive")
    t_rows = s if t_nodes is None else np.asarray(t_nodes, float)
    return _phi1_rows(params, phibar, t_rows, s)


def time_consistent_oracle(params, s_nodes, rtol=1e-12, atol=1e-14):
    """phibar(s) from a stiff integration of the t = s reduction (s-only data)."""
    b = params.beta
    g1 = float(params.g1(np.array(params.T)))

    def rhs(s, y):
        phi = y[0]
        vs = params.v(s, s)
        ratio = max(phi / vs, EPS_POS)
        return [-((params.k(s, s) - b * ratio ** (1 / (b - 1))) * phi
                  + vs * ratio ** (b / (b - 1)))]

    s = np.asarray(s_nodes, float)
    sol = solve_ivp(rhs, (params.T, 0.0), [g1], method="Radau", t_eval=s[::-1],
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise DivergenceError(f"oracle integration failed: {sol.message}")
    phi = sol.y[0][::-1]
    return phi / params.v(s, s)


def naive_phi(params, s_nodes, rtol=1e-12, atol=1e-14):
    """phi^n(s, s) of the naive controller: per t, the local ODE with t frozen."""
    b = params.beta
    s = np.asarray(s_nodes, float)
    out = np.empty(s.size)
    for i, t in enumerate(s):
        g1 = float(params.g1(np.array(t)))
        if t >= params.T:
            out[i] = g1
            continue

        def rhs(tau, y, t=t):
            vt = params.v(t, tau)
            ratio = max(y[0] / vt, EPS_POS)
            return [-((params.k(t, tau) - b * ratio ** (1 / (b - 1))) * y[0]
                      + vt * ratio ** (b / (b - 1)))]

        sol = solve_ivp(rhs, (params.T, t), [g1], method="Radau", rtol=rtol, atol=atol)
        if not sol.success:
            raise DivergenceError(f"naive oracle failed at t={t}: {sol.message}")
        out[i] = sol.y[0][-1]
    return out


@dataclass
class BoundsReport:
    g0: float
    rho: float
    delta: float
    lower: np.ndarray
    upper: np.ndarray
    K: float

    def check(self, phibar, tol=0.0):
        return bool(np.all(phibar >= self.lower - tol) and np.all(phibar <= self.upper + tol))


def integral_bounds(params, s_nodes):
    """Lower bound exp(-rho (T-s)) g0 and the upper bound built from delta."""
    b = params.beta
    s = np.asarray(s_nodes, float)
    t, ss = np.meshgrid(s, s, indexing="ij")
    k = params.k(t, ss)
    vdiag = params.v(s, s)
    gbar = params.g1(s) / vdiag
    Ktail = _tail(k, s)                               # int_s^T k(t, tau), rows t
    ghat = gbar * np.exp(np.diagonal(Ktail))
    g0 = float(ghat.min())
    # int_t^s k(t, tau) = Ktail[t, t] - Ktail[t, s]
    kin = np.diagonal(Ktail)[:, None] - Ktail
    vbar = params.v(t, ss) / vdiag[:, None]
    vhat = vbar * np.exp(kin)
    gap = ss - t
    mask = gap > 0
    rho = max(0.0, float(np.max(-np.log(vhat[mask]) / gap[mask]))) if mask.any() else 0.0
    delta = g0 * math.exp(-rho * params.T)
    lower = g0 * np.exp(-rho * (params.T - s))
    Kconst = delta ** (-b / (1 - b))
    src = np.exp(kin) * vbar                           # exp(int_s^lambda k(s,.)) vbar(s, lambda)
    tail_src = np.diagonal(_tail(src, s))
    upper = np.exp(np.diagonal(Ktail)) * gbar + Kconst * tail_src
    return BoundsReport(g0, rho, delta, lower, upper, float(upper.max()))


@dataclass
class MertonSolution:
    """Oracle tables on the PDE grid plus the closed-form fields."""

    phibar: np.ndarray
    phi1_diag: np.ndarray
    phi2_diag: np.ndarray
    V: Field2
    a_policy: Field2
    c_policy: Field2
    fine: IntegralEquationResult


def equilibrium_closed_form(params, grid, n_quad=801, tol=1e-11):
    """V, a and c on a grid with y_min > 0 (state power functions)."""
    if not isinstance(grid, SpaceTimeGrid):
        raise ConfigError("expected a SpaceTimeGrid")
    if grid.y_nodes[0] <= 0:
        raise ConfigError("grid must satisfy y_min > 0")
    if abs(grid.T - params.T) > 1e-12:
        raise ConfigError("grid horizon differs from params.T")
    s_fine = quad_nodes(params.T, n_quad, grid.n_s)
    res = solve_integral_equation(params, s_nodes=s_fine, tol=tol)
    idx = _subsample(s_fine, grid.s_nodes)
    s = grid.s_nodes
    phibar = res.phibar[idx]
    phi1d = phibar * params.v(s, s)
    phi2d = np.diagonal(solve_phi2(params, s_fine))[idx]
    y = grid.y_nodes[None, :]
    b, g = params.beta, params.gamma
    V = phi1d[:, None] * y ** b + phi2d[:, None] * y ** g
    a = params.risky_ratio * y * np.ones((s.size, 1))
    c = phibar[:, None] ** (1 / (b - 1)) * y
    meta = {"sense": "max"}
    return MertonSolution(phibar, phi1d, phi2d, Field2(V, grid, dict(meta)),
                          Field2(a, grid, dict(meta)), Field2(c, grid, dict(meta)), res)


def naive_closed_form(params, grid):
    """Naive value phi^n(s,s) y^beta + phi2(s,s) y^gamma on the grid."""
    s = grid.s_nodes
    phin = naive_phi(params, s)
    s_fine = quad_nodes(params.T, 801, grid.n_s)
    phi2d = np.diagonal(solve_phi2(params, s_fine))[_subsample(s_fine, s)]
    y = grid.y_nodes[None, :]
    return Field2(phin[:, None] * y ** params.beta + phi2d[:, None] * y ** params.gamma,
                  grid, {"sense": "max"})


def oracle_columns(params, grid, sol):
    """CSV columns (s, phibar, phi1(s,s), phi2(s,s)) plus V, a/y, c/y at the mid state."""
    mid = grid.n_y // 2
    y = grid.y_nodes[mid]
    return {
        "s": grid.s_nodes, "phibar": sol.phibar, "phi1_diag": sol.phi1_diag,
        "phi2_diag": sol.phi2_diag, "V": sol.V.values[:, mid],
        "a_over_y": sol.a_policy.values[:, mid] / y, "c_over_y": sol.c_policy.values[:, mid] / y,
    }


Q_FLOOR = 1e-8


def merton_spec(params=None):
    """The investment-consumption problem as a utility-maximizing control spec.

    Controls are (a, c): money in the risky asset and consumption.  The closed
    form optimizer holds for p > 0 and q < 0; elsewhere the numeric search runs
    with q replaced by min(q, -1e-8).
    """
    from .hjb import HamiltonianSpec

    P = params or MertonParams()
    b_, g_ = P.beta, P.gamma

    def drift(s, y, a):
        return P.r * y + (P.mu - P.r) * a[0] - a[1]

    def vol(s, y, a):
        return P.sigma * np.abs(a[0])

    def gen(t, s, x, y, a, u, z):
        return P.v(t, s) * np.maximum(a[1], 0.0) ** b_ - P.w(t, s) * u + P.z(t, s) * x ** g_

    def terminal(t, x, y):
        return P.g1(t) * y ** b_ + P.g2(t) * x ** g_

    def closed(t, s, x, y, u, p, q):
        p = np.asarray(p, float)
        q = np.asarray(q, float)
        valid = (p > 0) & (q < 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(valid, -(P.mu - P.r) * p / (P.sigma ** 2 * q), np.nan)
            c = np.where(valid, (p / (b_ * P.v(t, s))) ** (1 / (b_ - 1)), np.nan)
        return a, c

    def regularize(u, p, q):
        return u, p, np.minimum(q, -Q_FLOOR)

    return HamiltonianSpec(drift, vol, gen, terminal, (-np.inf, 0.0), (np.inf, np.inf),
                           closed_form_argmin=closed, sense="max", regularize=regularize,
                           name="merton", params=P)
