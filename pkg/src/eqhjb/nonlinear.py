"""Nonlocal fully nonlinear problems  u_s = F(t, s, x, y, z_loc, z_diag).

``z_loc = (u, u_y, u_yy)`` at (t, s, x, y) and ``z_diag`` the same stack at
(s, s, y, y).  The solver freezes a linear operator at the data of the
current sub-interval, iterates

    Lambda(u) = solution of  L U = F(u) - L u  (source built from u),

and extends the solution interval by interval.  A quasilinear fast path
marches directly when only first-order terms are nonlinear.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (ConfigError, DivergenceError, Field4, InstabilityError, SolverError,
                   diff_state, diff_time, slice_diagonal)
from .linear import (CoefficientSet, MarchStats, StepperConfig, _System, _as_array4, _at_s,
                     _tri_coeffs, march_linear)

log = logging.getLogger(__name__)

ORDERS = (0, 1, 2)


def local_stack(U, h, closure):
    """(u, u_y, u_yy) of a (..., x, y) array."""
    return tuple(diff_state(U, h, k, closure) for k in ORDERS)


def diag_stack(W, h, closure):
    """(u, u_y, u_yy) at x = y of an (x, y) slice, as y-vectors."""
    return tuple(slice_diagonal(diff_state(W, h, k, closure)) for k in ORDERS)


@dataclass
class Nonlinearity:
    """F with optional analytic partials and a domain ball B(center, radius).

    ``eval(t, s, x, y, zl, zd)`` is vectorized; ``zl`` and ``zd`` are 3-tuples.
    ``partials`` returns ``(dF/dzl[k], dF/dzd[k])`` as two 3-tuples.  The ball
    uses the max norm over the six arguments.
    """

    eval: object
    partials: object = None
    domain_center: tuple = (0.0,) * 6
    domain_radius: float = np.inf
    holder_K: float = np.inf
    lipschitz_L: float = np.inf
    lambda_ell: float = 0.0

    def __call__(self, t, s, x, y, zl, zd):
        return self.eval(t, s, x, y, zl, zd)

    def grad(self, t, s, x, y, zl, zd):
        if self.partials is not None:
            return self.partials(t, s, x, y, zl, zd)
        return numeric_partials(self.eval, t, s, x, y, zl, zd)

    def distance(self, zl, zd):
        """Max-norm distance of the arguments from the domain center."""
        c = self.domain_center
        d = 0.0
        for k in ORDERS:
            d = max(d, float(np.max(np.abs(np.asarray(zl[k]) - c[k]))))
            d = max(d, float(np.max(np.abs(np.asarray(zd[k]) - c[3 + k]))))
        return d

    def check_ellipticity(self, t, s, x, y, zl, zd):
        """Sampled dF/du_yy >= lambda and dF/du_yy + dF/du_yy,diag >= lambda."""
        if self.lambda_ell <= 0:
            return
        dl, dd = self.grad(t, s, x, y, zl, zd)
        lam = self.lambda_ell
        if np.min(dl[2]) < lam or np.min(np.asarray(dl[2]) + dd[2]) < lam:
            raise ConfigError("nonlinearity is not uniformly elliptic on the sampled states")


def numeric_partials(fn, t, s, x, y, zl, zd):
    """Central differences with step 1e-6 (1 + |z|) in each of the six arguments."""
    zl = [np.asarray(z, float) for z in zl]
    zd = [np.asarray(z, float) for z in zd]
    out = []
    for which in (zl, zd):
        parts = []
        for k in ORDERS:
            z0 = which[k]
            h = 1e-6 * (1 + np.abs(z0))
            which[k] = z0 + h
            fp = fn(t, s, x, y, tuple(zl), tuple(zd))
            which[k] = z0 - h
            fm = fn(t, s, x, y, tuple(zl), tuple(zd))
            which[k] = z0
            parts.append((fp - fm) / (2 * h))
        out.append(tuple(parts))
    return out[0], out[1]


def _mesh3(grid):
    s, y = grid.s_nodes, grid.y_nodes
    return s[:, None, None], y[None, :, None], y[None, None, :]


def linearize_at_initial(F, g0, grid, j0=0):
    """Frozen coefficients A = dF/dzl, B = -dF/dzd at the data g0 = u(., s_j0, ., .)."""
    h, closure = grid.dy, grid.closure
    zl = local_stack(g0, h, closure)
    zd = diag_stack(g0[j0], h, closure)
    if F.distance(zl, zd) > F.domain_radius / 2:
        raise ConfigError("initial data outside nonlinearity domain")
    t, x, y = _mesh3(grid)
    s = grid.s_nodes[j0]
    zd_b = tuple(z[None, None, :] for z in zd)
    dl, dd = F.grad(t, s, x, y, zl, zd_b)
    shape = g0.shape
    A = {k: np.broadcast_to(np.asarray(dl[k], float), shape)[:, None] for k in ORDERS}
    B = {k: -np.broadcast_to(np.asarray(dd[k], float), shape)[:, None] for k in ORDERS}
    return CoefficientSet(A, B)


class _LambdaSource:
    """Per-step source F(u_k) - A d u_k + B d u_k,diag for a window iterate."""

    def __init__(self, F, uk, j0, grid, A, B):
        self.F, self.uk, self.j0, self.grid = F, uk, j0, grid
        self.A, self.B = A, B
        self.t, self.x, self.y = _mesh3(grid)
        self._cache = {}
        self.max_distance = 0.0

    def at(self, j):
        if j in self._cache:
            return self._cache[j]
        g = self.grid
        h, closure = g.dy, g.closure
        U = self.uk[:, j - self.j0]
        zl = local_stack(U, h, closure)
        zd = diag_stack(U[j], h, closure)
        self.max_distance = max(self.max_distance, self.F.distance(zl, zd))
        val = self.F(self.t, g.s_nodes[j], self.x, self.y, zl,
                     tuple(z[None, None, :] for z in zd))
        for k, a in self.A.items():
            val = val - _at_s(a, j) * zl[k]
        for k, b in self.B.items():
            val = val + _at_s(b, j) * zd[k][None, None, :]
        val = np.broadcast_to(val, U.shape)
        if len(self._cache) > 2:
            self._cache.clear()
        self._cache[j] = val
        return val


def picard_step(uk, F, frozen, grid, cfg=None, j0=0, j1=None, boundary=None):
    """One application of Lambda on the window [j0, j1]; uk holds the window iterate."""
    cfg = cfg or StepperConfig()
    j1 = grid.n_s - 1 if j1 is None else j1
    uk = uk.values if isinstance(uk, Field4) else uk
    if not np.all(np.isfinite(uk)):
        raise InstabilityError("non-finite Picard iterate")
    A, B = frozen.materialize(grid)
    src = _LambdaSource(F, uk, j0, grid, A, B)
    new = march_linear(frozen, src, uk[:, 0], grid, cfg, start=j0, stop=j1,
                       boundary=boundary, A=A, B=B)
    if src.max_distance > F.domain_radius:
        raise DomainExit(f"iterate left domain ball (distance {src.max_distance:.3g})")
    return new


class DomainExit(SolverError):
    pass


@dataclass
class PicardState:
    """Iteration record of the last sub-interval plus a per-interval summary."""

    iterate: object = None
    residual_history: list = field(default_factory=list)
    contraction_ratios: list = field(default_factory=list)
    delta: float = 0.0
    intervals: list = field(default_factory=list)

    def to_dict(self):
        return {"residual_history": self.residual_history,
                "contraction_ratios": self.contraction_ratios,
                "delta": self.delta, "intervals": self.intervals}


@dataclass
class ExtensionLog:
    intervals: list = field(default_factory=list)      # (s_start, s_end, status)
    blow_up_norm: float = np.inf
    epsilon_margin: float = 0.0
    tau: float | None = None
    restarts: list = field(default_factory=list)

    def to_dict(self):
        return {"intervals": [list(iv) for iv in self.intervals],
                "blow_up_norm": None if not np.isfinite(self.blow_up_norm) else self.blow_up_norm,
                "epsilon_margin": self.epsilon_margin, "tau": self.tau,
                "restarts": self.restarts}


@dataclass
class NonlinearConfig:
    delta_init: float | None = None     # sub-interval length; None means the whole horizon
    rho_target: float = 0.5
    max_outer: int = 60
    tol: float = 1e-8
    blow_up_norm: float = np.inf
    epsilon_margin: float = 0.0
    linear: StepperConfig = field(default_factory=StepperConfig)

    def __post_init__(self):
        if not 0 < self.rho_target < 1:
            raise ConfigError("rho_target must lie in (0, 1)")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.delta_init is not None and not self.delta_init > 0:
            raise ConfigError("delta_init must be positive")


class _Restart(Exception):
    pass


def _run_interval(F, g0, grid, cfg, j0, j1, boundary):
    """Picard iteration on one window; returns (window, residuals, ratios)."""
    frozen = linearize_at_initial(F, g0, grid, j0)
    uk = np.repeat(g0[:, None], j1 - j0 + 1, axis=1)
    res, ratios = [], []
    tol = cfg.tol
    for _ in range(int(cfg.max_outer)):
        try:
            new = picard_step(uk, F, frozen, grid, cfg.linear, j0, j1, boundary)
        except (InstabilityError, DivergenceError) as exc:
            raise _Restart(f"linear solve failed: {exc}")
        d = float(np.max(np.abs(new - uk)))
        uk = new
        if res:
            ratios.append(d / res[-1] if res[-1] > 0 else 0.0)
            if res[-1] > 10 * tol and ratios[-1] > cfg.rho_target and len(ratios) >= 2:
                raise _Restart(f"contraction ratio {ratios[-1]:.3g} > {cfg.rho_target}")
        res.append(d)
        if not np.isfinite(d):
            raise _Restart("non-finite Picard distance")
        if d < tol:
            return uk, res, ratios
    raise _Restart(f"no convergence in {cfg.max_outer} Picard iterations")


def solve_nonlinear(F, g, grid, cfg=None, boundary=None):
    """Interval-by-interval Picard construction; returns (Field4, PicardState, ExtensionLog).

    If the run stops early (domain exit or blow-up), ``meta['valid_until']``
    is the last solved time index and later levels repeat the last one.
    """
    cfg = cfg or NonlinearConfig()
    g0 = np.array(np.broadcast_to(np.asarray(g, float), (grid.n_s, grid.n_y, grid.n_y)))
    n = grid.n_s - 1
    steps = n if cfg.delta_init is None else max(1, int(round(cfg.delta_init / grid.ds)))
    steps = min(steps, n)
    out = np.empty(grid.shape4)
    out[:, 0] = g0
    state = PicardState()
    ext = ExtensionLog(blow_up_norm=cfg.blow_up_norm, epsilon_margin=cfg.epsilon_margin)
    j0 = 0
    s = grid.s_nodes
    while j0 < n:
        j1 = min(j0 + steps, n)
        try:
            window, res, ratios = _run_interval(F, out[:, j0], grid, cfg, j0, j1, boundary)
        except ConfigError as exc:
            if "outside nonlinearity domain" not in str(exc):
                raise
            ext.intervals.append((float(s[j0]), float(s[j0]), "domain-exit"))
            ext.tau = float(s[j0])
            break
        except DomainExit as exc:
            if steps == 1:
                ext.intervals.append((float(s[j0]), float(s[j0]), "domain-exit"))
                ext.tau = float(s[j0])
                ext.restarts.append({"s_start": float(s[j0]), "reason": str(exc)})
                break
            ext.restarts.append({"s_start": float(s[j0]), "steps": steps, "reason": str(exc)})
            steps //= 2
            continue
        except _Restart as exc:
            ext.restarts.append({"s_start": float(s[j0]), "steps": steps, "reason": str(exc)})
            log.info("halving sub-interval at s=%.4g: %s", s[j0], exc)
            steps //= 2
            if steps < 1:
                raise DivergenceError(
                    f"sub-interval length underflow at s={s[j0]:.6g}: {exc}",
                    [r["reason"] for r in ext.restarts])
            continue
        out[:, j0:j1 + 1] = window
        state.residual_history, state.contraction_ratios = res, ratios
        state.delta = float(s[j1] - s[j0])
        state.intervals.append({"s_start": float(s[j0]), "s_end": float(s[j1]),
                                "iterations": len(res), "ratios": ratios})
        if float(np.max(np.abs(window))) > cfg.blow_up_norm:
            ext.intervals.append((float(s[j0]), float(s[j1]), "max-interval-reached"))
            ext.tau = float(s[j1])
            j0 = j1
            break
        ext.intervals.append((float(s[j0]), float(s[j1]), "converged"))
        j0 = j1
    if j0 < n:
        out[:, j0 + 1:] = out[:, j0:j0 + 1]
    if ext.tau is None:
        ext.tau = float(s[j0])
    u = Field4(out, grid)
    u.meta["valid_until"] = j0
    state.iterate = u
    return u, state, ext


def pde_residual(F, u):
    """Apply-and-difference residual u_s - F(t, s, x, y, z_loc, z_diag) on every node.

    u_s is the second-order difference along s (one-sided at the ends), so
    the residual of a converged field is a truncation error, independent of
    how the field was produced.
    """
    g = u.grid
    h, closure = g.dy, g.closure
    v = u.values
    out = diff_time(v, g.s_nodes, axis=1)
    t, x, y = _mesh3(g)
    for j, s in enumerate(g.s_nodes):
        zl = local_stack(v[:, j], h, closure)
        zd = tuple(z[None, None, :] for z in diag_stack(v[j, j], h, closure))
        out[:, j] -= np.broadcast_to(F.eval(t, s, x, y, zl, zd), out[:, j].shape)
    return out


def quasilinear_solve(a2, Q, g, grid, cfg=None, tol=1e-10, max_iter=200):
    """u_s = a2 u_yy + Q(t, s, x, y, (u, u_y), (u, u_y)|diag) by a theta-scheme.

    a2 is implicit; Q enters as the theta-average of old and new levels with
    a Picard loop over all slices at each step.
    """
    cfg = cfg or StepperConfig()
    theta = cfg.theta
    h, closure = grid.dy, grid.closure
    a2 = _as_array4(a2, grid)
    U = np.array(np.broadcast_to(np.asarray(g, float), (grid.n_s, grid.n_y, grid.n_y)))
    out = np.empty(grid.shape4)
    out[:, 0] = U
    t, x, y = _mesh3(grid)
    bounds = (U[..., 0].copy(), U[..., -1].copy())
    iters = []

    def q_eval(V, j):
        zl = (V, diff_state(V, h, 1, closure))
        W = V[j]
        zd = (slice_diagonal(W)[None, None, :],
              slice_diagonal(diff_state(W, h, 1, closure))[None, None, :])
        return np.broadcast_to(Q(t, grid.s_nodes[j], x, y, zl, zd), V.shape)

    for j in range(grid.n_s - 1):
        ds = grid.s_nodes[j + 1] - grid.s_nodes[j]
        A_old, A_new = {2: _at_s(a2, j)}, {2: _at_s(a2, j + 1)}
        q_old = q_eval(U, j)
        R = U + (1 - theta) * ds * q_old
        if theta < 1:
            R = R + (1 - theta) * ds * A_old[2] * diff_state(U, h, 2, closure)
        lo, di, up = _tri_coeffs(A_new, h, grid.n_y)
        system = _System(-theta * ds * lo, 1 - theta * ds * di, -theta * ds * up, closure,
                         grid.extrapolation_weights())
        V = U
        for it in range(1, max_iter + 1):
            V_new = system.solve(R + theta * ds * q_eval(V, j + 1), bounds)
            change = float(np.max(np.abs(V_new - V)))
            V = V_new
            if not np.isfinite(change):
                raise InstabilityError(f"non-finite iterate at s={grid.s_nodes[j + 1]:.6g}")
            if change <= tol * max(1.0, float(np.max(np.abs(V)))):
                break
        else:
            raise DivergenceError(f"quasilinear step did not converge at s={grid.s_nodes[j + 1]:.6g}")
        iters.append(it)
        U = V
        out[:, j + 1] = U
    u = Field4(out, grid)
    u.meta["inner_iterations"] = iters
    return u
