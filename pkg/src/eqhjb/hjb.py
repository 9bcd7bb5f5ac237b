"""Equilibrium HJB problems built from control data.

State dynamics dX = b(s, X, a) ds + sigma(s, X, a) dW, running generator
h(t, s, x, y, a, u, z) and terminal data g(t, x, y).  The Hamiltonian is

    H(t, s, x, y, a, u, p, q) = q sigma^2 / 2 + p b + h(t, s, x, y, a, u, p sigma).

Controls are tuples of component arrays.  Specs may be cost minimizations
(``sense="min"``) or utility maximizations (``sense="max"``); the latter are
negated to a cost form before solving (u -> -u, h -> -h(-u, -z), g -> -g).
Equations are solved in forward time s' = T - s.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ConfigError, Field2, Field4, SolverError, diff_state, slice_diagonal
from .linear import CoefficientSet, LinearProblem, StepperConfig, _System, _tri_coeffs
from .nonlinear import NonlinearConfig, Nonlinearity, quasilinear_solve, solve_nonlinear

log = logging.getLogger(__name__)

SENTINEL = 1e8


@dataclass
class HamiltonianSpec:
    """Control problem data.  ``closed_form_argmin`` returns the optimizer in the
    model's own sense (argmax for ``sense="max"``) or ``None`` where it does not
    apply; ``regularize(u, p, q)`` maps states before a numeric search."""

    b: object
    sigma: object
    h: object
    g: object
    control_lo: tuple
    control_hi: tuple
    closed_form_argmin: object = None
    sense: str = "min"
    diffusion_controlled: bool = True
    regularize: object = None
    name: str = "custom"
    params: object = None

    def __post_init__(self):
        if self.sense not in ("min", "max"):
            raise ConfigError("sense must be 'min' or 'max'")
        lo = tuple(float(v) for v in self.control_lo)
        hi = tuple(float(v) for v in self.control_hi)
        if len(lo) != len(hi) or not lo:
            raise ConfigError("control bounds must be non-empty and of equal length")
        if any(a > b for a, b in zip(lo, hi)):
            raise ConfigError("control_lo must not exceed control_hi")
        self.control_lo, self.control_hi = lo, hi

    @property
    def n_controls(self):
        return len(self.control_lo)

    def sample_controls(self, n=7):
        out = []
        for lo, hi in zip(self.control_lo, self.control_hi):
            lo_f = lo if np.isfinite(lo) else -2.0 if not np.isfinite(hi) else hi - 4.0
            hi_f = hi if np.isfinite(hi) else lo_f + 4.0
            out.append(np.linspace(lo_f, hi_f, n))
        return tuple(out)

    def check(self, s_nodes, y_nodes):
        """Sampled sigma >= 0."""
        ctrl = self.sample_controls()
        for a in zip(*ctrl):
            sig = np.asarray(self.sigma(s_nodes[:, None], y_nodes[None, :], a), float)
            if np.any(sig < 0):
                raise ConfigError("sigma must be non-negative")


def hamiltonian_eval(spec, t, s, x, y, a, u, p, q, check_bounds=True):
    """q sigma^2 / 2 + p b + h(t, s, x, y, a, u, p sigma) in the model's own sense."""
    if check_bounds:
        for k, (lo, hi) in enumerate(zip(spec.control_lo, spec.control_hi)):
            ak = np.asarray(a[k])
            if np.any(ak < lo) or np.any(ak > hi):
                raise ConfigError(f"control component {k} outside [{lo}, {hi}]")
    sig = spec.sigma(s, y, a)
    return 0.5 * q * sig ** 2 + p * spec.b(s, y, a) + spec.h(t, s, x, y, a, u, p * sig)


def cost_form(spec):
    """The equivalent minimization spec (identity for cost specs)."""
    if spec.sense == "min":
        return spec
    h, g, cf = spec.h, spec.g, spec.closed_form_argmin
    reg = spec.regularize
    return replace(
        spec, sense="min",
        h=lambda t, s, x, y, a, u, z: -h(t, s, x, y, a, -u, -z),
        g=lambda t, x, y: -g(t, x, y),
        closed_form_argmin=None if cf is None else (
            lambda t, s, x, y, u, p, q: cf(t, s, x, y, -u, -p, -q)),
        regularize=None if reg is None else (
            lambda u, p, q: tuple(-v for v in reg(-u, -p, -q))),
    )


def _scan_box(lo, hi, width):
    lo_f = lo if np.isfinite(lo) else (-width if not np.isfinite(hi) else hi - 2 * width)
    hi_f = hi if np.isfinite(hi) else (width if not np.isfinite(lo) else lo + 2 * width)
    return lo_f, hi_f


def _numeric_argmin(fn, lo, hi, shape, n_grid=41, n_golden=80, sweeps=3):
    """Minimize fn(controls) -> values over a box, vectorized over states.

    Grid scan then coordinate golden section.  Infinite sides are expanded
    geometrically while the scan minimizer sits on them, until SENTINEL.
    Ties go to the smallest control (first grid index).
    """
    m = len(lo)
    width = 1.0
    while True:
        box = [_scan_box(l, h, width) for l, h in zip(lo, hi)]
        axes = [np.linspace(b0, b1, n_grid if m == 1 else max(9, int(n_grid ** (2 / m))))
                for b0, b1 in box]
        mesh = np.meshgrid(*axes, indexing="ij")
        cand = [c.ravel() for c in mesh]
        vals = fn(tuple(c.reshape((1,) * len(shape) + (-1,)) for c in cand), extra_axis=True)
        vals = np.where(np.isfinite(vals), vals, np.inf)
        best = np.argmin(vals, axis=-1)
        a = [cand[k][best] for k in range(m)]
        edge = False
        for k in range(m):
            step = axes[k][1] - axes[k][0]
            if not np.isfinite(lo[k]) and np.any(a[k] <= box[k][0] + 0.5 * step):
                edge = True
            if not np.isfinite(hi[k]) and np.any(a[k] >= box[k][1] - 0.5 * step):
                edge = True
        if not edge:
            break
        width *= 4.0
        if width > SENTINEL:
            raise SolverError("optimizer diverged: minimizer escapes to the control-box sentinel")
    steps = [ax[1] - ax[0] for ax in axes]
    gr = (np.sqrt(5) - 1) / 2
    for _ in range(sweeps):
        for k in range(m):
            l_k = np.maximum(a[k] - steps[k], box[k][0] if np.isfinite(lo[k]) else -np.inf)
            h_k = np.minimum(a[k] + steps[k], box[k][1] if np.isfinite(hi[k]) else np.inf)
            l_k = np.maximum(l_k, lo[k])
            h_k = np.minimum(h_k, hi[k])

            def f1(val, k=k):
                trial = list(a)
                trial[k] = val
                return fn(tuple(trial), extra_axis=False)

            c = h_k - gr * (h_k - l_k)
            d = l_k + gr * (h_k - l_k)
            fc, fd = f1(c), f1(d)
            for _ in range(n_golden):
                left = fc <= fd
                h_k = np.where(left, d, h_k)
                l_k = np.where(left, l_k, c)
                c_new = h_k - gr * (h_k - l_k)
                d_new = l_k + gr * (h_k - l_k)
                c, d = c_new, d_new
                fc, fd = f1(c), f1(d)
            cand_k = 0.5 * (l_k + h_k)
            f_new = f1(cand_k)
            f_old = f1(a[k])
            a[k] = np.where(f_new < f_old, cand_k, a[k])
    return tuple(a)


def _argmin_min(spec, t, s, x, y, u, p, q):
    """Minimizer of the cost-form Hamiltonian, broadcast over states."""
    shape = np.broadcast_shapes(*(np.shape(v) for v in (t, s, x, y, u, p, q)))
    if spec.closed_form_argmin is not None:
        a = spec.closed_form_argmin(t, s, x, y, u, p, q)
        if a is not None:
            a = tuple(np.broadcast_to(np.asarray(c, float), shape) for c in a)
            ok = np.all([np.isfinite(c) for c in a], axis=0)
            if np.all(ok):
                return tuple(np.array(c) for c in a)
        else:
            ok = np.zeros(shape, bool)
    else:
        a, ok = None, np.zeros(shape, bool)
    bad = ~ok
    args = [np.broadcast_to(np.asarray(v, float), shape)[bad] for v in (t, s, x, y, u, p, q)]
    if spec.regularize is not None:
        args[4:] = spec.regularize(*args[4:])
    t_, s_, x_, y_, u_, p_, q_ = (v[:, None] for v in args)

    def fn(ctrl, extra_axis):
        if extra_axis:
            return hamiltonian_eval(spec, t_, s_, x_, y_, ctrl, u_, p_, q_, check_bounds=False)
        return hamiltonian_eval(spec, t_[:, 0], s_[:, 0], x_[:, 0], y_[:, 0], ctrl,
                                u_[:, 0], p_[:, 0], q_[:, 0], check_bounds=False)

    found = _numeric_argmin(fn, spec.control_lo, spec.control_hi, (int(bad.sum()),))
    out = [np.zeros(shape) if a is None else np.array(a[k]) for k in range(spec.n_controls)]
    for k in range(spec.n_controls):
        out[k][bad] = found[k]
    return tuple(out)


def argmin_hamiltonian(spec, t, s, x, y, u, p, q):
    """Optimal control at the given states: argmin for cost specs, argmax for utility specs."""
    for v in (u, p, q):
        if not np.all(np.isfinite(v)):
            raise ConfigError("non-finite Hamiltonian arguments")
    if spec.sense == "max":
        return _argmin_min(cost_form(spec), t, s, x, y, -np.asarray(u), -np.asarray(p),
                           -np.asarray(q))
    return _argmin_min(spec, t, s, x, y, u, p, q)


class _DiagPolicy:
    """Memo of the diagonal policy for the current (s, z_diag)."""

    def __init__(self, spec):
        self.spec = spec
        self.key = None
        self.value = None

    def __call__(self, s, y, zd):
        zd = tuple(np.asarray(z, float) for z in zd)
        key = (float(s), tuple(z.tobytes() for z in zd), tuple(z.shape for z in zd))
        if key != self.key:
            self.value = _argmin_min(self.spec, s, s, y, y, *zd)
            self.key = key
        return self.value


def assemble_equilibrium_F(spec, T):
    """Forward-time equilibrium nonlinearity for a spec (cost form is applied).

    F(t', s', x, y, zl, zd) = H(T-t', T-s', x, y, Psi, zl) with
    Psi = argmin H(T-s', T-s', y, y, ., zd).
    """
    cspec = cost_form(spec)
    policy = _DiagPolicy(cspec)

    def F(t, s, x, y, zl, zd):
        tb, sb = T - np.asarray(t, float), T - np.asarray(s, float)
        a = policy(sb, y, zd)
        return hamiltonian_eval(cspec, tb, sb, x, y, a, *zl, check_bounds=False)

    nl = Nonlinearity(F)
    nl.policy = policy
    return nl


# ----------------------------------------------------------------------------
# forward/backward transform

class _Flipped:
    """c'(t, s, ...) = c(T - t, T - s, ...); flipping again returns the original."""

    def __init__(self, fn, T, n_time):
        self._origin, self.T, self.n_time = fn, T, n_time

    def __call__(self, *args):
        T = self.T
        head = [T - np.asarray(a, float) for a in args[:self.n_time]]
        return self._origin(*head, *args[self.n_time:])


def _flip_value(v, T, n_time, axes):
    if v is None or np.isscalar(v):
        return v
    if isinstance(v, _Flipped):
        return v._origin
    if callable(v) and not hasattr(v, "at"):
        return _Flipped(v, T, n_time)
    if hasattr(v, "at"):
        raise ConfigError("cannot transform a per-step source provider")
    arr = np.asarray(v)
    return np.flip(arr, axis=tuple(ax for ax in axes if ax < arr.ndim))


def forward_backward_transform(obj, T=None):
    """(t, s) -> (T - t, T - s) for fields (index flip) and linear problems."""
    if isinstance(obj, Field4):
        if not obj.grid.uniform_s:
            raise ConfigError("transform needs a uniform time grid")
        return Field4(obj.values[::-1, ::-1], obj.grid, dict(obj.meta))
    if isinstance(obj, Field2):
        if not obj.grid.uniform_s:
            raise ConfigError("transform needs a uniform time grid")
        return Field2(obj.values[::-1], obj.grid, dict(obj.meta))
    if isinstance(obj, LinearProblem):
        grid = obj.grid
        if not grid.uniform_s:
            raise ConfigError("transform needs a uniform time grid")
        origin = getattr(obj, "_transformed_from", None)
        if origin is not None:
            return origin
        T = grid.T
        c = obj.coeffs
        coeffs = CoefficientSet({k: _flip_value(v, T, 2, (0, 1)) for k, v in c.A.items()},
                                {k: _flip_value(v, T, 2, (0, 1)) for k, v in c.B.items()},
                                c.lambda_ell)
        out = LinearProblem(coeffs, _flip_value(obj.f, T, 2, (0, 1)),
                            _flip_value(obj.g, T, 1, (0,)), grid,
                            "backward" if obj.direction == "forward" else "forward",
                            _flip_value(obj.boundary, T, 2, ()))
        out._transformed_from = obj
        return out
    raise ConfigError(f"cannot transform {type(obj).__name__}")


# ----------------------------------------------------------------------------
# solvers

@dataclass
class HJBConfig:
    nonlinear: NonlinearConfig = field(default_factory=NonlinearConfig)
    naive_tol: float = 1e-8
    naive_max_sweeps: int = 50
    quasilinear_tol: float = 1e-11


@dataclass
class EquilibriumResult:
    u_full: Field4
    value: Field2
    policy: list
    naive_value: Field2 | None = None
    gap: Field2 | None = None
    meta: dict = field(default_factory=dict)


def terminal_data(spec, grid):
    """Forward-frame initial data g'(t', x, y) = g(T - t', x, y) by index flip."""
    s, y = grid.s_nodes, grid.y_nodes
    g = spec.g(s[:, None, None], y[None, :, None], y[None, None, :])
    g = np.broadcast_to(np.asarray(g, float), (grid.n_s, grid.n_y, grid.n_y))
    return np.array(g[::-1])


def diagonal_policy(spec, u_full):
    """Psi(s, y) from the diagonal derivatives of u in the model's own sense."""
    g = u_full.grid
    j = np.arange(g.n_s)
    zd = [slice_diagonal(diff_state(u_full.values[j, j], g.dy, k, g.closure)) for k in (0, 1, 2)]
    s = g.s_nodes[:, None]
    y = g.y_nodes[None, :]
    a = argmin_hamiltonian(spec, s, s, y, y, *zd)
    return [Field2(np.broadcast_to(c, g.shape2).copy(), g, {"component": k})
            for k, c in enumerate(a)]


def _quasilinear_parts(spec, T):
    cspec = cost_form(spec)
    policy = _DiagPolicy(cspec)
    ctrl0 = tuple(np.asarray(c[0]) for c in cspec.sample_controls(3))

    def a2(t, s, x, y):
        sig = cspec.sigma(T - s, y, ctrl0)
        return 0.5 * np.broadcast_to(sig, np.broadcast_shapes(np.shape(s), np.shape(y))) ** 2 + 0 * t

    def Q(t, s, x, y, zl, zd):
        tb, sb = T - np.asarray(t, float), T - np.asarray(s, float)
        a = policy(sb, y, (zd[0], zd[1], np.zeros_like(zd[1])))
        return hamiltonian_eval(cspec, tb, sb, x, y, a, zl[0], zl[1], 0.0, check_bounds=False)

    return a2, Q


def _check_control_free_sigma(spec, grid):
    s, y = grid.s_nodes[:, None], grid.y_nodes[None, :]
    vals = [np.asarray(spec.sigma(s, y, a), float) for a in zip(*spec.sample_controls())]
    if any(np.max(np.abs(v - vals[0])) > 1e-14 for v in vals):
        raise ConfigError("diffusion_controlled=False but sigma depends on the control")


def solve_equilibrium(spec, grid, cfg=None):
    """Sophisticated value and policy: assemble, transform, solve, transform back."""
    cfg = cfg or HJBConfig()
    spec.check(grid.s_nodes, grid.y_nodes)
    if not grid.uniform_s:
        raise ConfigError("equilibrium solves need a uniform time grid")
    cspec = cost_form(spec)
    g_fwd = terminal_data(cspec, grid)
    T = grid.T
    meta = {"sense": spec.sense, "spec": spec.name}
    if not spec.diffusion_controlled:
        _check_control_free_sigma(spec, grid)
        a2, Q = _quasilinear_parts(spec, T)
        u_fwd = quasilinear_solve(a2, Q, g_fwd, grid, cfg.nonlinear.linear, tol=cfg.quasilinear_tol)
        meta["path"] = "quasilinear"
    else:
        F = assemble_equilibrium_F(spec, T)
        u_fwd, state, ext = solve_nonlinear(F, g_fwd, grid, cfg.nonlinear)
        meta.update(path="picard", picard=state.to_dict(), extension=ext.to_dict())
        if ext.tau is not None and ext.tau < T - 1e-12:
            raise SolverError(f"solution stopped at s'={ext.tau:.6g} ({ext.intervals[-1][2]})")
    u = forward_backward_transform(u_fwd)
    if spec.sense == "max":
        u = Field4(-u.values, grid, dict(u.meta))
    u.meta.update(meta)
    V = u.trace()
    V.meta.update(meta)
    return EquilibriumResult(u, V, diagonal_policy(spec, u), meta=meta)


def hjb_step(cspec, U_old, t_obj, x_obj, s_old, s_new, grid, bounds, cfg,
             a_old=None, a_new=None):
    """One Crank-Nicolson step of the local HJB  U_s + min_a H = 0  backward in s.

    Rows of ``U_old`` (rows, y) are independent problems with objectives
    frozen at ``(t_obj, x_obj)`` (each (rows, 1)).  Without ``a_new`` the
    new-level control comes from policy iteration; with it the step is a
    policy evaluation.  Each sweep freezes the control, linearizes h in
    (u, z) at the current iterate and solves; rows stop once converged,
    so the result does not depend on how rows are batched.
    Returns (U_new, a_new, sweeps).
    """
    h, closure, ny = grid.dy, grid.closure, grid.n_y
    y = grid.y_nodes[None, :]
    ds = abs(s_new - s_old)
    shape = U_old.shape
    t_obj = np.broadcast_to(t_obj, shape)
    x_obj = np.broadcast_to(x_obj, shape)
    Y = np.broadcast_to(y, shape)
    u0, p0, q0 = (U_old, diff_state(U_old, h, 1, closure), diff_state(U_old, h, 2, closure))
    if a_old is None:
        a_old = _argmin_min(cspec, t_obj, s_old, x_obj, Y, u0, p0, q0)
    R = U_old + 0.5 * ds * hamiltonian_eval(cspec, t_obj, s_old, x_obj, Y, a_old, u0, p0, q0,
                                            check_bounds=False)
    weights = grid.extrapolation_weights()
    V = U_old.copy()
    a_cur = [np.zeros(shape) for _ in cspec.control_lo] if a_new is None else \
        [np.array(np.broadcast_to(c, shape)) for c in a_new]
    done = np.zeros(shape[0], bool)
    for sweep in range(1, cfg.naive_max_sweeps + 1):
        todo = np.flatnonzero(~done)
        Vt = V[todo]
        tt, xx, yy = t_obj[todo], x_obj[todo], Y[todo]
        if a_new is None:
            a = _argmin_min(cspec, tt, s_new, xx, yy, Vt, diff_state(Vt, h, 1, closure),
                            diff_state(Vt, h, 2, closure))
            for k in range(len(a_cur)):
                a_cur[k][todo] = a[k]
        a = tuple(c[todo] for c in a_cur)
        A, src = _frozen_rows(cspec, a, Vt, s_new, tt, xx, yy, h, closure)
        lo, di, up = _tri_coeffs(A, h, ny)
        system = _System(-0.5 * ds * lo, 1 - 0.5 * ds * di, -0.5 * ds * up, closure, weights)
        bnd = None if bounds is None else (bounds[0][todo], bounds[1][todo])
        Vn = system.solve(R[todo] + 0.5 * ds * src, bnd)
        change = np.max(np.abs(Vn - Vt), axis=-1)
        V[todo] = Vn
        conv = change <= cfg.naive_tol * np.maximum(1.0, np.max(np.abs(Vn), axis=-1))
        done[todo[conv]] = True
        if done.all():
            break
    else:
        raise SolverError(f"policy iteration did not converge at s={s_new:.6g} "
                          f"within {cfg.naive_max_sweeps} sweeps")
    if not np.all(np.isfinite(V)):
        raise SolverError(f"non-finite local HJB iterate at s={s_new:.6g}")
    return V, tuple(a_cur), sweep


def naive_solve(spec, grid, cfg=None):
    """Naive value V^n(s, y) = u^n(s, s, y, y) from per-(t, x) local HJB solves.

    Every (t, x) slice is a classical HJB with its objective frozen at
    (t, x), marched backward from s = T by ``hjb_step``.  Slice t is dropped
    once s passes t, since only its diagonal at s = t is kept.
    """
    cfg = cfg or HJBConfig()
    spec.check(grid.s_nodes, grid.y_nodes)
    cspec = cost_form(spec)
    s, yn = grid.s_nodes, grid.y_nodes
    n, ny = grid.n_s, grid.n_y
    t_obj = np.repeat(s, ny)[:, None]              # rows ordered (t, x)
    x_obj = np.tile(yn, n)[:, None]
    U = np.asarray(cspec.g(t_obj, x_obj, yn[None, :]), float)
    U = np.array(np.broadcast_to(U, (n * ny, ny)))
    bounds = (U[:, 0].copy(), U[:, -1].copy())
    diag = np.empty((n, ny))
    diag[n - 1] = slice_diagonal(U[(n - 1) * ny:].reshape(ny, ny))
    sweeps_log = []
    for j in range(n - 1, 0, -1):
        rows = slice(0, j * ny)                    # slices t_i <= s_{j-1}
        U_new, _, sweeps = hjb_step(cspec, U[rows], t_obj[rows], x_obj[rows], s[j], s[j - 1],
                                    grid, (bounds[0][rows], bounds[1][rows]), cfg)
        U[rows] = U_new
        sweeps_log.append(sweeps)
        diag[j - 1] = slice_diagonal(U[(j - 1) * ny:j * ny])
    Vn = -diag if spec.sense == "max" else diag
    return Field2(Vn, grid, {"sense": spec.sense, "sweeps": sweeps_log})


def _frozen_rows(cspec, a, V, sb, t, x, y, h, closure):
    """Coefficients (A0, A1, A2) and source of the control-frozen, h-linearized H.

    All arrays are indexed (rows, y)."""
    u0 = V
    p0 = diff_state(V, h, 1, closure)
    sig = cspec.sigma(sb, y, a)
    bb = cspec.b(sb, y, a)
    z0 = p0 * sig
    hu = 1e-6 * (1 + np.abs(u0))
    hz = 1e-6 * (1 + np.abs(z0))

    def fh(uu, zz):
        return cspec.h(t, sb, x, y, a, uu, zz)

    h0 = fh(u0, z0)
    du = (fh(u0 + hu, z0) - fh(u0 - hu, z0)) / (2 * hu)
    dz = (fh(u0, z0 + hz) - fh(u0, z0 - hz)) / (2 * hz)
    shape = V.shape
    A = {2: np.broadcast_to(0.5 * sig ** 2, shape), 1: np.broadcast_to(bb + dz * sig, shape),
         0: np.broadcast_to(du, shape)}
    return A, np.broadcast_to(h0 - du * u0 - dz * z0, shape)


@dataclass
class GapReport:
    gap: Field2
    max_gap: float
    min_gap: float
    fitted_exponent: float | None
    n_fit: int

    def to_dict(self):
        return {"max_gap": self.max_gap, "min_gap": self.min_gap,
                "fitted_exponent": self.fitted_exponent, "n_fit": self.n_fit}


def gap_report(V, V_naive, T=None, sense=None, fit_fraction=0.5, y_window=None, floor=0.0):
    """Gap V - V^n in cost terms and a log-log fit of max_y gap(s) against T - s.

    ``sense`` defaults to the fields' metadata; for utility values the cost
    gap is V^n - V.  The fit uses 0 < T - s <= fit_fraction T and gaps above
    ``floor``; the exponent is None when fewer than 3 points qualify.
    """
    g = V.grid
    if not g.same_as(V_naive.grid):
        raise ConfigError("V and V_naive must share a grid")
    T = g.T if T is None else T
    sense = sense or V.meta.get("sense", "min")
    gap = V.values - V_naive.values
    if sense == "max":
        gap = -gap
    cols = slice(None) if y_window is None else y_window
    prof = gap[:, cols].max(axis=1)
    tau = T - g.s_nodes
    mask = (tau > 1e-12) & (tau <= fit_fraction * T + 1e-12) & (prof > floor)
    exponent = None
    if mask.sum() >= 3:
        exponent = float(np.polyfit(np.log(tau[mask]), np.log(prof[mask]), 1)[0])
    return GapReport(Field2(gap, g, {"sense": "min"}), float(gap.max()), float(gap.min()),
                     exponent, int(mask.sum()))


def policy_consistency(spec, result, n_probe=7):
    """max over diagonal nodes of H(Psi) - min over probed controls of H (cost sense)."""
    u = result.u_full
    g = u.grid
    j = np.arange(g.n_s)
    zd = [slice_diagonal(diff_state(u.values[j, j], g.dy, k, g.closure)) for k in (0, 1, 2)]
    s = g.s_nodes[:, None]
    y = g.y_nodes[None, :]
    sign = 1.0 if spec.sense == "min" else -1.0
    psi = tuple(p.values for p in result.policy)
    H_psi = sign * hamiltonian_eval(spec, s, s, y, y, psi, *zd, check_bounds=False)
    worst = -np.inf
    for a in zip(*spec.sample_controls(n_probe)):
        a = tuple(np.full(g.shape2, c) for c in a)
        H_a = sign * hamiltonian_eval(spec, s, s, y, y, a, *zd, check_bounds=False)
        worst = max(worst, float(np.max(H_psi - H_a)))
    return worst
