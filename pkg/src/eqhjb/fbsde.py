"""Monte Carlo check of the probabilistic representation of a solved field.

For a field u with  -u_s = F(t, s, x, y, zl, zd),  u(t, T, x, y) = g(t, x, y)
and a state dX = b ds + sigma dW started at X(t) = x0, Ito's formula gives

    Y(t, t) = g(X_T) + int_t^T Fc ds - int_t^T Z dW,
    Y(t, s) = u(t, s, x0, X_s),  Z = sigma u_y,  Fc = F - sigma^2 u_yy / 2 - b u_y.

The path residual  R = Y(t, t) - g - sum Fc ds + sum Z dW  is sampled with
an Euler-Maruyama state and left-point sums that share the Brownian
increments.  The field is read at the (t, x) node nearest (t_anchor, x0)
and interpolated bilinearly in (s, y).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, Field4, diff_state, slice_diagonal
from .hjb import _argmin_min, cost_form, hamiltonian_eval
from .linear import _apply_local, _System, _tri_coeffs

log = logging.getLogger(__name__)

BLOCK = 1024          # paths per counter-based RNG key


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 4096
    n_steps: int = 64
    seed: int = 0
    x0: float = 0.0
    antithetic: bool = False

    def __post_init__(self):
        if int(self.n_paths) < 1 or int(self.n_steps) < 1:
            raise ConfigError("n_paths and n_steps must be at least 1")
        if self.antithetic and self.n_paths % 2:
            raise ConfigError("antithetic sampling needs an even n_paths")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must fit in 64 unsigned bits")


@dataclass
class ResidualReport:
    bsde_residual_mean: float
    bsde_residual_max: float
    bsde_residual_se: float
    fk_identity_error: float
    anchor_error: float
    n_used: int
    n_discarded: int
    x0_used: float
    t_anchor: float
    rates: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class FlowModel:
    """State coefficients and generator; ``control(s, y, zd)`` feeds b and sigma.

    ``F(t, s, x, y, zl, zd, a)`` is the backward generator, ``g(t, x, y)`` the
    terminal data.  ``sign`` flips a utility field into cost form."""

    b: object
    sigma: object
    F: object
    g: object
    control: object = None
    sign: float = 1.0

    @classmethod
    def heat(cls, sigma=1.0, drift=0.0, g=None):
        """-u_s = sigma^2 u_yy / 2 + drift u_y, for which Fc vanishes."""
        g = g or (lambda t, x, y: np.sin(y))
        return cls(lambda s, y, a: drift + 0 * y, lambda s, y, a: sigma + 0 * y,
                   lambda t, s, x, y, zl, zd, a: 0.5 * sigma ** 2 * zl[2] + drift * zl[1], g)

    @classmethod
    def from_spec(cls, spec):
        """Equilibrium flow: control from the diagonal, F = H at that control."""
        c = cost_form(spec)

        def control(s, y, zd):
            return _argmin_min(c, s, s, y, y, *zd)

        def F(t, s, x, y, zl, zd, a):
            return hamiltonian_eval(c, t, s, x, y, a, *zl, check_bounds=False)

        return cls(c.b, c.sigma, F, c.g, control, -1.0 if spec.sense == "max" else 1.0)


def heat_field(grid, sigma=1.0, drift=0.0, g=None):
    """Crank-Nicolson solve of -u_s = sigma^2 u_yy / 2 + drift u_y, u(T) = g(y).

    The problem does not involve (t, x), so one slice is solved and the
    result broadcast as a read-only view over the parameter axes.
    """
    g = g or np.sin
    h, ny = grid.dy, grid.n_y
    A = {2: np.full((1, ny), 0.5 * sigma ** 2), 1: np.full((1, ny), float(drift)),
         0: np.zeros((1, ny))}
    lo, di, up = _tri_coeffs(A, h, ny)
    w = np.empty(grid.shape2)
    w[-1] = g(grid.y_nodes)
    bounds = (w[-1, :1].copy(), w[-1, -1:].copy())
    weights = grid.extrapolation_weights()
    for j in range(grid.n_s - 1, 0, -1):
        ds = grid.s_nodes[j] - grid.s_nodes[j - 1]
        system = _System(-0.5 * ds * lo, 1 - 0.5 * ds * di, -0.5 * ds * up, grid.closure, weights)
        rhs = w[j][None] + 0.5 * ds * _apply_local(A, w[j][None], h, grid.closure)
        w[j - 1] = system.solve(rhs, bounds)[0]
    return Field4(np.broadcast_to(w[None, :, None, :], grid.shape4), grid,
                  {"model": "heat", "sigma": sigma, "drift": drift})


def brownian_increments(sim, dt):
    """(n_steps, n_paths) increments; block b of paths uses Philox key (seed, b)."""
    n, m = int(sim.n_steps), int(sim.n_paths)
    m_draw = m // 2 if sim.antithetic else m
    out = np.empty((n, m_draw))
    for b0 in range(0, m_draw, BLOCK):
        width = min(BLOCK, m_draw - b0)
        key = np.array([sim.seed, b0 // BLOCK], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key))
        out[:, b0:b0 + width] = rng.standard_normal((n, width))
    dW = np.sqrt(dt) * out
    if sim.antithetic:
        dW = np.concatenate([dW, -dW], axis=1)
    return dW


class _Slab:
    """Bilinear (s, y) interpolation of several (s, y) tables at once."""

    def __init__(self, grid, tables):
        self.grid = grid
        self.tables = np.stack(tables)          # (k, s, y)
        self.periodic = grid.closure == "periodic"

    def __call__(self, s, y):
        g = self.grid
        sn = g.s_nodes
        i = np.clip(np.searchsorted(sn, s, side="right") - 1, 0, g.n_s - 2)
        ws = np.clip((s - sn[i]) / (sn[i + 1] - sn[i]), 0.0, 1.0)
        r = (y - g.y_nodes[0]) / g.dy
        if self.periodic:
            r = np.mod(r, g.n_y)
            j = np.floor(r).astype(int) % g.n_y
            j1 = (j + 1) % g.n_y
        else:
            j = np.clip(np.floor(r).astype(int), 0, g.n_y - 2)
            j1 = j + 1
        wy = r - np.floor(r) if self.periodic else np.clip(r - j, 0.0, 1.0)
        T = self.tables
        lo = (1 - wy) * T[:, i, j] + wy * T[:, i, j1]
        hi = (1 - wy) * T[:, i + 1, j] + wy * T[:, i + 1, j1]
        return (1 - ws) * lo + ws * hi


def simulate_flow(u, model, sim, t_anchor=0.0):
    """Sample the Y-equation residual of ``u`` along Euler paths from (t_anchor, x0)."""
    g = u.grid
    it = int(np.argmin(np.abs(g.t_nodes - t_anchor)))
    if abs(g.t_nodes[it] - t_anchor) > 1e-9 * max(1.0, g.T):
        raise ConfigError(f"t_anchor={t_anchor} is not a grid node")
    if it == g.n_s - 1:
        raise ConfigError("t_anchor must lie before T")
    ix = int(np.argmin(np.abs(g.x_nodes - sim.x0)))
    t0, x0 = float(g.t_nodes[it]), float(g.x_nodes[ix])
    vals = model.sign * u.values
    w = vals[it, :, ix, :]                       # u(t0, s, x0, y)
    h, cl = g.dy, g.closure
    local = _Slab(g, [w, diff_state(w, h, 1, cl), diff_state(w, h, 2, cl)])
    j = np.arange(g.n_s)
    on_diag = vals[j, j]                         # (s, x, y)
    diag = _Slab(g, [slice_diagonal(diff_state(on_diag, h, k, cl)) for k in (0, 1, 2)])

    n = int(sim.n_steps)
    dt = (g.T - t0) / n
    dW = brownian_increments(sim, dt)
    m = dW.shape[1]
    X = np.full(m, x0)
    alive = np.ones(m, bool)
    stoch = np.zeros(m)
    drift_int = np.zeros(m)
    lo, hi = g.y_nodes[0], g.y_nodes[-1]
    for k in range(n):
        s = t0 + k * dt
        zl = tuple(local(s, X))
        zd = tuple(diag(s, X))
        a = None if model.control is None else model.control(s, X, zd)
        bb = np.broadcast_to(model.b(s, X, a), X.shape)
        sig = np.broadcast_to(model.sigma(s, X, a), X.shape)
        Fc = model.F(t0, s, x0, X, zl, zd, a) - 0.5 * sig ** 2 * zl[2] - bb * zl[1]
        drift_int += Fc * dt
        stoch += sig * zl[1] * dW[k]
        X = X + bb * dt + sig * dW[k]
        if g.closure == "periodic":
            X = lo + np.mod(X - lo, g.period)
        else:
            alive &= (X >= lo) & (X <= hi)
    n_bad = int(m - alive.sum())
    if n_bad > 0.1 * m:
        log.warning("%d of %d paths left the y-truncation and were discarded", n_bad, m)
    if not alive.any():
        raise ConfigError("every path left the y-truncation")
    Y0 = vals[it, it, ix, ix]
    Y_start = np.full(m, Y0)                     # Y(t, t) = u(t, t, x0, X_t), X_t = x0
    gT = np.asarray(model.g(t0, x0, X), float)
    R = (Y_start - gT - drift_int + stoch)[alive]
    fk = (gT + drift_int)[alive]
    absR = np.abs(R)
    used = int(alive.sum())
    return ResidualReport(
        bsde_residual_mean=float(np.sum(absR) / used),
        bsde_residual_max=float(absR.max()),
        bsde_residual_se=float(np.std(absR) / np.sqrt(used)),
        fk_identity_error=float(abs(np.sum(fk) / used - Y0)),
        # mean taken about Y0 so that identical extractions average exactly
        anchor_error=float(abs(Y0 + np.sum(Y_start[alive] - Y0) / used - Y0)),
        n_used=used, n_discarded=n_bad, x0_used=x0, t_anchor=t0)


def fit_rate(xs, ys):
    """Least-squares slope of log y against log x."""
    xs, ys = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(xs, ys, 1)[0])


def rate_study(u, model, sim, t_anchor=0.0, steps=(16, 64, 256), paths=(1024, 4096, 16384),
               n_seeds=8):
    """Fitted residual rates in n_steps (at sim.n_paths) and in n_paths (at sim.n_steps).

    The n_steps study uses the pathwise residual mean; the n_paths study the
    root mean square over seeds of the Feynman-Kac identity error, which is
    what shrinks with the sample size once the time step is fine.
    """
    by_steps = [simulate_flow(u, model, SimConfig(sim.n_paths, k, sim.seed, sim.x0,
                                                  sim.antithetic), t_anchor).bsde_residual_mean
                for k in steps]
    by_paths = []
    for m in paths:
        errs = [simulate_flow(u, model, SimConfig(m, sim.n_steps, sim.seed + 7919 * r, sim.x0,
                                                  sim.antithetic), t_anchor).fk_identity_error
                for r in range(n_seeds)]
        by_paths.append(float(np.sqrt(np.mean(np.square(errs)))))
    return {"n_steps": list(steps), "residual_mean": by_steps,
            "rate_steps": fit_rate(steps, by_steps),
            "n_paths": list(paths), "fk_rms": by_paths, "rate_paths": fit_rate(paths, by_paths)}
