"""Nonlocal linear parabolic problems.

The operator is

    L u = u_s - sum_k A^k d_y^k u(t, s, x, y) + sum_k B^k d_y^k u(s, s, x, y)|_{x=y}

for k = 0, 1, 2.  ``solve_linear`` marches L u = f in s.  Local terms are
implicit (one tridiagonal system in y per (t, x) slice); the diagonal terms
stay on the right-hand side and are resolved at each new level by a Picard
loop over the leading slice t = s_new.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .core import (ConfigError, DivergenceError, Field4, InstabilityError,
                   diff_state, derivative, holder_norms, slice_diagonal)
from .tridiag import TridiagFactor

ORDERS = (0, 1, 2)


def _as_array4(value, grid):
    """Evaluate a scalar, array or callable(t, s, x, y) to a 4-D broadcastable array."""
    if callable(value):
        value = value(*grid.open_mesh())
    arr = np.asarray(value, float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    if arr.ndim != 4:
        raise ConfigError("coefficients must be scalars, 4-D arrays or callables")
    try:
        np.broadcast_shapes(arr.shape, grid.shape4)
    except ValueError:
        raise ConfigError(f"coefficient shape {arr.shape} incompatible with {grid.shape4}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("non-finite coefficient values")
    return arr


def _at_s(arr, j):
    """(t, x, y) slice of a 4-D broadcastable array at time index j."""
    return arr[:, 0] if arr.shape[1] == 1 else arr[:, j]


def _lead(arr, i):
    """(x, y) slice at t index i of a (t, x, y) broadcastable array."""
    return arr[0] if arr.shape[0] == 1 else arr[i]


@dataclass
class CoefficientSet:
    """Local coefficients A[k] and diagonal coefficients B[k], k = |I| in {0, 1, 2}.

    Entries are scalars, arrays broadcastable to the (t, s, x, y) grid, or
    callables evaluated on the open mesh.  ``lambda_ell`` is the claimed
    ellipticity constant; it is sampled on the grid when positive.
    """

    A: dict = field(default_factory=dict)
    B: dict = field(default_factory=dict)
    lambda_ell: float = 0.0

    def materialize(self, grid):
        for k in list(self.A) + list(self.B):
            if k not in ORDERS:
                raise ConfigError(f"multi-index order {k} not in {ORDERS}")
        A = {k: _as_array4(v, grid) for k, v in self.A.items()}
        B = {k: _as_array4(v, grid) for k, v in self.B.items()}
        A = {k: v for k, v in A.items() if np.any(v != 0)}
        B = {k: v for k, v in B.items() if np.any(v != 0)}
        return A, B

    def check_ellipticity(self, grid, A=None, B=None):
        """Sampled check of A2 >= lambda and A2 - B2 >= lambda (see module doc)."""
        if self.lambda_ell <= 0:
            return
        if A is None:
            A, B = self.materialize(grid)
        a2 = A.get(2, np.zeros((1, 1, 1, 1)))
        b2 = B.get(2, np.zeros((1, 1, 1, 1)))
        lam = self.lambda_ell
        if np.min(a2) < lam:
            raise ConfigError(f"ellipticity violated: min A2 = {np.min(a2):.3g} < {lam}")
        combined = np.min(a2 - b2)
        if combined < lam:
            raise ConfigError(
                f"ellipticity violated: min(A2 - B2) = {combined:.3g} < {lam}")


@dataclass
class LinearProblem:
    """L u = f with data g at s = 0 (forward) or at s = T (backward).

    A backward problem reads -u_s = sum A^k d^k u - sum B^k d^k u_diag + f.
    ``boundary`` is an optional callable ``(t, s, x) -> (lower, upper)`` giving
    Dirichlet values; without it Dirichlet values are held at g.
    """

    coeffs: CoefficientSet
    f: object
    g: object
    grid: object
    direction: str = "forward"
    boundary: object = None

    def initial_values(self):
        g = self.g
        grid = self.grid
        if callable(g):
            s, y = grid.s_nodes, grid.y_nodes
            g = g(s[:, None, None], y[None, :, None], y[None, None, :])
        g = np.asarray(g, float)
        shape = (grid.n_s, grid.n_y, grid.n_y)
        try:
            g = np.array(np.broadcast_to(g, shape))
        except ValueError:
            raise ConfigError(f"initial data shape {g.shape} incompatible with {shape}")
        if not np.all(np.isfinite(g)):
            raise ConfigError("non-finite initial data")
        return g


@dataclass
class StepperConfig:
    scheme: str = "crank-nicolson"
    inner_picard_tol: float = 1e-10
    inner_picard_max: int = 200
    lag_diagonal: bool = False

    def __post_init__(self):
        if self.scheme not in ("crank-nicolson", "backward-euler"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if not self.inner_picard_tol > 0:
            raise ConfigError("inner_picard_tol must be positive")
        if int(self.inner_picard_max) < 1:
            raise ConfigError("inner_picard_max must be at least 1")

    @property
    def theta(self):
        return 0.5 if self.scheme == "crank-nicolson" else 1.0


# ----------------------------------------------------------------------------
# operator and integral representation

def diag_derivatives(slice_tsxy, h, closure, orders=ORDERS):
    """d_y^k w(x, y)|_{x=y} for a slice w indexed (..., x, y)."""
    return {k: slice_diagonal(diff_state(slice_tsxy, h, k, closure)) for k in orders}


def apply_operator(u, coeffs):
    """L u on the grid, diagonal terms broadcast over (t, x)."""
    g = u.grid
    A, B = coeffs.materialize(g)
    out = derivative(u, "s").values
    ders = {0: u.values}
    for k in set(A) | set(B):
        if k not in ders:
            ders[k] = diff_state(u.values, g.dy, k, g.closure)
    for k, a in A.items():
        out -= a * ders[k]
    j = np.arange(g.n_s)
    for k, b in B.items():
        tr = slice_diagonal(ders[k][j, j])        # (s, y)
        out += b * tr[None, :, None, :]
    return Field4(out, g)


def integral_rep(u_t, u_x, I, path="space-first"):
    """The field I^I with  d_I u(t,s,x,y) - d_I u(s,s,x,y)|_{x=y} = -I^I.

    ``u_t`` and ``u_x`` are the first derivatives of u in t and x.  The
    default path runs from (s, y) along x at t = s, then along t at fixed x;
    ``path="time-first"`` runs along t at x = y first.  Composite trapezoid
    quadrature on the grid nodes.
    """
    g = u_t.grid
    if not g.same_as(u_x.grid):
        raise ConfigError("u_t and u_x must share a grid")
    h = g.dy
    P = diff_state(u_t.values, h, I, g.closure)
    Q = diff_state(u_x.values, h, I, g.closure)
    s, y = g.s_nodes, g.y_nodes
    j = np.arange(g.n_s)
    l = np.arange(g.n_y)
    if path == "space-first":
        C = cumulative_trapezoid(P, s, axis=0, initial=0.0)
        time_part = C - C[j, j][None]                        # C[i,j,k,l] - C[j,j,k,l]
        Qd = Q[j, j]                                         # (s, x, y) at t = s
        D = cumulative_trapezoid(Qd, y, axis=1, initial=0.0)
        space_part = D - D[:, l, l][:, None, :]              # D[j,k,l] - D[j,l,l]
        total = time_part + space_part[None]
    elif path == "time-first":
        Pd = P[:, :, l, l]                                   # (t, s, y) at x = y
        C = cumulative_trapezoid(Pd, s, axis=0, initial=0.0)
        time_part = C - C[j, j][None]                        # (t, s, y)
        D = cumulative_trapezoid(Q, y, axis=2, initial=0.0)
        space_part = D - D[:, :, l, l][:, :, None, :]
        total = time_part[:, :, None, :] + space_part
    else:
        raise ConfigError(f"unknown path {path!r}")
    return Field4(-total, g)


# ----------------------------------------------------------------------------
# time marching

class _System:
    """Implicit y-systems for a batch of slices under a given closure."""

    def __init__(self, lo, di, up, closure, weights=None):
        if closure == "power":
            closure = "linear"
        self.closure = closure
        self.weights = weights or ((2.0, -1.0), (2.0, -1.0))
        n = di.shape[-1]
        shape = np.broadcast_shapes(lo.shape, di.shape, up.shape)
        lo, di, up = (np.array(np.broadcast_to(a, shape)) for a in (lo, di, up))
        if closure == "periodic":
            self.factor = TridiagFactor(lo, di, up, cyclic=True)
            self.lo1 = self.upm = self.f_lo = self.f_hi = None
            return
        if n < 4 and closure == "linear" or n < 5 and closure == "quadratic":
            raise ConfigError(f"{closure} closure needs more state nodes")
        lo_i, di_i, up_i = lo[..., 1:-1].copy(), di[..., 1:-1].copy(), up[..., 1:-1].copy()
        self.lo1 = self.upm = self.f_lo = self.f_hi = None
        if closure == "dirichlet":
            self.lo1 = lo_i[..., 0].copy()
            self.upm = up_i[..., -1].copy()
        elif closure == "linear":
            # u_0 = w1 u_1 + w2 u_2 and likewise at the upper end
            (a1, a2), (b1, b2) = self.weights
            di_i[..., 0] += a1 * lo_i[..., 0]
            up_i[..., 0] += a2 * lo_i[..., 0]
            di_i[..., -1] += b1 * up_i[..., -1]
            lo_i[..., -1] += b2 * up_i[..., -1]
        else:
            # u_0 = 3 u_1 - 3 u_2 + u_3; the u_3 entry of the first row is
            # eliminated with the second row (same at the upper end)
            e0 = lo_i[..., 0].copy()
            di_i[..., 0] += 3 * e0
            up_i[..., 0] -= 3 * e0
            with np.errstate(divide="ignore", invalid="ignore"):
                f0 = e0 / up_i[..., 1]
            di_i[..., 0] -= f0 * lo_i[..., 1]
            up_i[..., 0] -= f0 * di_i[..., 1]
            e1 = up_i[..., -1].copy()
            di_i[..., -1] += 3 * e1
            lo_i[..., -1] -= 3 * e1
            with np.errstate(divide="ignore", invalid="ignore"):
                f1 = e1 / lo_i[..., -2]
            lo_i[..., -1] -= f1 * di_i[..., -2]
            di_i[..., -1] -= f1 * up_i[..., -2]
            if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(f1))):
                raise ConfigError("quadratic closure needs nonzero off-diagonals next to the boundary")
            self.f_lo, self.f_hi = f0, f1
        lo_i[..., 0] = 0.0
        up_i[..., -1] = 0.0
        self.factor = TridiagFactor(lo_i, di_i, up_i)

    def select(self, i):
        out = object.__new__(_System)
        out.closure = self.closure
        out.weights = self.weights
        out.factor = self.factor.select(i)
        for name in ("lo1", "upm", "f_lo", "f_hi"):
            val = getattr(self, name)
            setattr(out, name, None if val is None else _lead(val, i))
        return out

    def solve(self, rhs, bounds=None):
        if self.closure == "periodic":
            return self.factor.solve(rhs)
        r = np.array(rhs[..., 1:-1])
        if self.closure == "dirichlet":
            lower, upper = bounds
            r[..., 0] -= self.lo1 * lower
            r[..., -1] -= self.upm * upper
        elif self.closure == "quadratic":
            r0, r1 = r[..., 1].copy(), r[..., -2].copy()
            r[..., 0] -= self.f_lo * r0
            r[..., -1] -= self.f_hi * r1
        x = self.factor.solve(r)
        out = np.empty(np.broadcast_shapes(rhs.shape, x.shape[:-1] + (x.shape[-1] + 2,)))
        out[..., 1:-1] = x
        if self.closure == "dirichlet":
            out[..., 0] = lower
            out[..., -1] = upper
        elif self.closure == "linear":
            (a1, a2), (b1, b2) = self.weights
            out[..., 0] = a1 * x[..., 0] + a2 * x[..., 1]
            out[..., -1] = b1 * x[..., -1] + b2 * x[..., -2]
        else:
            out[..., 0] = 3 * x[..., 0] - 3 * x[..., 1] + x[..., 2]
            out[..., -1] = 3 * x[..., -1] - 3 * x[..., -2] + x[..., -3]
        return out


def _tri_coeffs(A, h, ny):
    z = np.zeros((1, 1, 1))
    a0, a1, a2 = (A.get(k, z) for k in ORDERS)
    lower = a2 / (h * h) - a1 / (2 * h)
    diag = a0 - 2 * a2 / (h * h)
    upper = a2 / (h * h) + a1 / (2 * h)
    shape = np.broadcast_shapes(lower.shape, diag.shape, upper.shape)
    shape = shape[:-1] + (ny,)
    return (np.broadcast_to(lower, shape), np.broadcast_to(diag, shape),
            np.broadcast_to(upper, shape))


def _apply_local(A, U, h, closure):
    out = np.zeros_like(U)
    for k, a in A.items():
        out += a * (U if k == 0 else diff_state(U, h, k, closure))
    return out


class _Source:
    """f at a time index, from a scalar, array, callable or ``.at(j)`` provider."""

    def __init__(self, f, grid):
        self.grid = grid
        if f is None:
            self.kind, self.arr = "zero", None
        elif hasattr(f, "at"):
            self.kind, self.obj = "provider", f
        elif callable(f):
            self.kind, self.fn = "callable", f
        else:
            self.kind, self.arr = "array", _as_array4(f, grid)

    def at(self, j):
        if self.kind == "zero":
            return 0.0
        if self.kind == "provider":
            return self.obj.at(j)
        if self.kind == "array":
            return _at_s(self.arr, j)
        t, _, x, y = self.grid.open_mesh()
        s = self.grid.s_nodes[j]
        val = np.asarray(self.fn(t, np.full((1, 1, 1, 1), s), x, y), float)
        return val[:, 0] if val.ndim == 4 else val


class MarchStats:
    def __init__(self):
        self.inner_iterations = []
        self.inner_residuals = []


def march_linear(coeffs, f, g0, grid, cfg, start=0, stop=None, direction="forward",
                 boundary=None, A=None, B=None, stats=None):
    """March the linear problem between time indices ``start`` and ``stop``.

    ``g0`` holds the (t, x, y) data at the first level of the march (index
    ``start`` forward, ``stop`` backward).  Returns the (t, m+1, x, y) block
    in increasing time order.
    """
    stop = grid.n_s - 1 if stop is None else stop
    if not 0 <= start < stop <= grid.n_s - 1:
        raise ConfigError("invalid time window")
    if A is None:
        A, B = coeffs.materialize(grid)
    stats = stats if stats is not None else MarchStats()
    order = list(range(start, stop + 1))
    if direction == "backward":
        order = order[::-1]
    elif direction != "forward":
        raise ConfigError(f"unknown direction {direction!r}")
    h, closure, ny = grid.dy, grid.closure, grid.n_y
    theta = cfg.theta
    src = f if isinstance(f, _Source) else _Source(f, grid)
    out = np.empty((grid.n_s, stop - start + 1, ny, ny))
    U = np.array(g0, float)
    out[:, order[0] - start] = U
    bounds_held = (U[..., 0].copy(), U[..., -1].copy())
    b_orders = sorted(B)

    def diag_term(j, traces, lead=None):
        total = 0.0
        for k in b_orders:
            b = _at_s(B[k], j)
            if lead is not None:
                b = _lead(b, lead)
                total = total + b * traces[k][None, :]
            else:
                total = total + b * traces[k][None, None, :]
        return total

    for jo, jn in zip(order[:-1], order[1:]):
        ds = abs(grid.s_nodes[jn] - grid.s_nodes[jo])
        A_old = {k: _at_s(a, jo) for k, a in A.items()}
        A_new = {k: _at_s(a, jn) for k, a in A.items()}
        f_old, f_new = src.at(jo), src.at(jn)
        R = U + theta * ds * f_new
        if theta < 1:
            expl = _apply_local(A_old, U, h, closure) + f_old
            if b_orders:
                expl = expl - diag_term(jo, diag_derivatives(U[jo], h, closure, b_orders))
            R = R + (1 - theta) * ds * expl
        lo, di, up = _tri_coeffs(A_new, h, ny)
        system = _System(-theta * ds * lo, 1 - theta * ds * di, -theta * ds * up, closure,
                         grid.extrapolation_weights())
        if boundary is not None:
            lower, upper = boundary(grid.t_nodes[:, None], grid.s_nodes[jn], grid.x_nodes[None, :])
            bounds = (np.broadcast_to(lower, U.shape[:2]), np.broadcast_to(upper, U.shape[:2]))
        else:
            bounds = bounds_held
        R = np.broadcast_to(R, U.shape)
        if b_orders and not cfg.lag_diagonal:
            lead = jn
            lead_sys = system.select(lead)
            lead_bounds = (bounds[0][lead], bounds[1][lead])
            W = U[lead]
            log = []
            for it in range(1, int(cfg.inner_picard_max) + 1):
                tr = diag_derivatives(W, h, closure, b_orders)
                W_new = lead_sys.solve(R[lead] - theta * ds * diag_term(jn, tr, lead), lead_bounds)
                change = float(np.max(np.abs(W_new - W)))
                log.append(change)
                W = W_new
                if not np.isfinite(change):
                    raise InstabilityError(f"non-finite inner iterate at s={grid.s_nodes[jn]:.6g}", log)
                if change <= cfg.inner_picard_tol * max(1.0, float(np.max(np.abs(W)))):
                    break
            else:
                raise DivergenceError(
                    f"inner Picard did not converge at s={grid.s_nodes[jn]:.6g} "
                    f"after {cfg.inner_picard_max} iterations", log)
            stats.inner_iterations.append(it)
            stats.inner_residuals.append(log[-1])
            D_new = diag_term(jn, diag_derivatives(W, h, closure, b_orders))
            U = system.solve(R - theta * ds * D_new, bounds)
            U[lead] = W
        elif b_orders:
            D_new = diag_term(jn, diag_derivatives(U[jn], h, closure, b_orders))
            stats.inner_iterations.append(0)
            U = system.solve(R - theta * ds * D_new, bounds)
        else:
            stats.inner_iterations.append(0)
            U = system.solve(R, bounds)
        if not np.all(np.isfinite(U)):
            raise InstabilityError(f"non-finite solution at s={grid.s_nodes[jn]:.6g}")
        out[:, jn - start] = U
    return out


def solve_linear(problem, cfg=None):
    """Solve L u = f (or its backward form) on the whole grid."""
    cfg = cfg or StepperConfig()
    grid = problem.grid
    A, B = problem.coeffs.materialize(grid)
    problem.coeffs.check_ellipticity(grid, A, B)
    g0 = problem.initial_values()
    stats = MarchStats()
    vals = march_linear(problem.coeffs, problem.f, g0, grid, cfg, direction=problem.direction,
                        boundary=problem.boundary, A=A, B=B, stats=stats)
    u = Field4(vals, grid)
    u.meta["inner_iterations"] = stats.inner_iterations
    u.meta["inner_residuals"] = stats.inner_residuals
    return u


def solve_local(problem, cfg=None):
    """The purely local stepper: the same march with the diagonal terms dropped."""
    local = replace(problem, coeffs=CoefficientSet(dict(problem.coeffs.A), {},
                                                   problem.coeffs.lambda_ell))
    return solve_linear(local, cfg)


# ----------------------------------------------------------------------------
# stability probe

@dataclass
class SchauderReport:
    ratio: float
    response_norm: float
    data_norm: float
    zero_perturbation: bool


def _norm4(values, grid, alpha):
    return holder_norms(Field4(np.array(np.broadcast_to(values, grid.shape4)), grid), alpha).total


def schauder_stability_probe(problem, cfg=None, perturbation_scale=1e-2, df=None, dg=None,
                             alpha=0.5):
    """Response ratio N(u_hat - u) / (N(df) + N(dg)) with N the Hölder surrogate.

    Defaults: df = 0 and dg = scale * sin(y).  Both solves run at the
    configured tolerance; by linearity the ratio does not depend on (f, g).
    """
    cfg = cfg or StepperConfig()
    grid = problem.grid
    eps = perturbation_scale
    if dg is None:
        dg = eps * np.sin(grid.y_nodes)[None, None, :] * np.ones((grid.n_s, grid.n_y, 1))
    else:
        dg = eps * np.asarray(dg, float)
    g0 = problem.initial_values()
    dg = np.broadcast_to(dg, g0.shape)
    df = None if df is None else _as_array4(eps * np.asarray(df, float), grid)
    n_f = _norm4(df, grid, alpha) if df is not None and np.any(df) else 0.0
    n_g = _norm4(dg[:, None], grid, alpha) if np.any(dg) else 0.0
    if n_f == 0 and n_g == 0:
        return SchauderReport(float("nan"), 0.0, 0.0, True)
    base = solve_linear(problem, cfg)
    f_hat = problem.f
    if n_f > 0:
        if hasattr(f_hat, "at"):
            raise ConfigError("source perturbation needs an array or callable source")
        f_hat = df if f_hat is None else _as_array4(f_hat, grid) + df
    pert = solve_linear(replace(problem, f=f_hat, g=g0 + dg), cfg)
    n_u = _norm4(pert.values - base.values, grid, alpha)
    return SchauderReport(n_u / (n_f + n_g), n_u, n_f + n_g, False)
