"""Grids, four-index fields, diagonal traces, finite differences, Hölder norms.

The unknown ``u(t, s, x, y)`` lives on a rectangular grid where the parameter
axes ``(t, x)`` reuse the nodes of the running axes ``(s, y)``.  That makes
the diagonal ``u(s, s, y, y)`` an exact index extraction.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

CLOSURES = ("periodic", "dirichlet", "linear", "quadratic", "power")
AXES = {"t": 0, "s": 1, "x": 2, "y": 3}


class ConfigError(ValueError):
    """Invalid grid, coefficients or run configuration."""


class SolverError(RuntimeError):
    """Base class for numerical failures."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = list(log or [])


class DivergenceError(SolverError):
    pass


class InstabilityError(SolverError):
    pass


@dataclass(frozen=True, eq=False)
class SpaceTimeGrid:
    """Nodes for (t, s) in [0, T]^2 and (x, y) in [y_min, y_max]^2.

    ``closure`` is the boundary treatment of the state axes: ``periodic``
    (right endpoint excluded), ``dirichlet`` (boundary values prescribed,
    by default held at the initial data), ``linear`` (zero second
    difference at the boundary, a far-field closure for data that grow
    at most linearly), ``quadratic`` (zero third difference, which keeps
    the curvature at the boundary) or ``power`` (boundary values extrapolated
    exactly for a + b y^p with p = ``closure_exponent``, a far-field closure
    for power-law growth; ``linear`` is the case p = 1).
    """

    s_nodes: np.ndarray
    y_nodes: np.ndarray
    closure: str = "dirichlet"
    period: float | None = None
    closure_exponent: float | None = None

    def __post_init__(self):
        s = np.asarray(self.s_nodes, float)
        y = np.asarray(self.y_nodes, float)
        object.__setattr__(self, "s_nodes", s)
        object.__setattr__(self, "y_nodes", y)
        if self.closure not in CLOSURES:
            raise ConfigError(f"unknown closure {self.closure!r}")
        if s.ndim != 1 or s.size < 2:
            raise ConfigError("too few time nodes")
        if np.any(np.diff(s) <= 0):
            raise ConfigError("time nodes must be strictly increasing")
        if s[0] != 0.0 or s[-1] <= 0:
            raise ConfigError("time nodes must start at 0 and end at T > 0")
        if y.ndim != 1 or y.size < 3:
            raise ConfigError("too few state nodes")
        dy = np.diff(y)
        if np.any(dy <= 0):
            raise ConfigError("state nodes must be strictly increasing")
        if np.max(np.abs(dy - dy.mean())) > 1e-12 * abs(dy.mean()) * max(1.0, y.size):
            raise ConfigError("state nodes must be uniformly spaced")
        if self.closure == "power":
            if self.closure_exponent is None or self.closure_exponent == 0:
                raise ConfigError("power closure needs a nonzero closure_exponent")
            if self.closure_exponent != int(self.closure_exponent) and y[0] <= 0:
                raise ConfigError("power closure with a fractional exponent needs y_min > 0")
        if self.closure == "periodic" and self.period is None:
            object.__setattr__(self, "period", float(y.size * dy.mean()))

    @property
    def t_nodes(self):
        return self.s_nodes

    @property
    def x_nodes(self):
        return self.y_nodes

    @property
    def T(self):
        return float(self.s_nodes[-1])

    @property
    def n_s(self):
        return self.s_nodes.size

    @property
    def n_y(self):
        return self.y_nodes.size

    @property
    def ds(self):
        """Time step (the mean step if the time grid is not uniform)."""
        return float(self.T / (self.n_s - 1))

    @property
    def dy(self):
        if self.closure == "periodic":
            return float(self.period / self.n_y)
        return float((self.y_nodes[-1] - self.y_nodes[0]) / (self.n_y - 1))

    @property
    def uniform_s(self):
        h = np.diff(self.s_nodes)
        return bool(np.max(np.abs(h - h.mean())) <= 1e-12 * h.mean() * self.n_s)

    @property
    def shape4(self):
        return (self.n_s, self.n_s, self.n_y, self.n_y)

    @property
    def shape2(self):
        return (self.n_s, self.n_y)

    def open_mesh(self):
        """Broadcastable (t, s, x, y) coordinate arrays."""
        s, y = self.s_nodes, self.y_nodes
        return (s[:, None, None, None], s[None, :, None, None],
                y[None, None, :, None], y[None, None, None, :])

    def extrapolation_weights(self):
        """(w1, w2) per end with u_end = w1 u_next + w2 u_next2, for linear/power closures."""
        if self.closure not in ("linear", "power"):
            return None
        p = 1.0 if self.closure == "linear" else float(self.closure_exponent)
        y = self.y_nodes

        def weights(e, n1, n2):
            f = y[[e, n1, n2]] ** p
            w1 = (f[0] - f[2]) / (f[1] - f[2])
            return w1, 1.0 - w1

        if self.closure == "linear":
            return (2.0, -1.0), (2.0, -1.0)
        return weights(0, 1, 2), weights(-1, -2, -3)

    def same_as(self, other):
        return (self.closure == other.closure
                and self.closure_exponent == other.closure_exponent
                and np.array_equal(self.s_nodes, other.s_nodes)
                and np.array_equal(self.y_nodes, other.y_nodes))


def make_grid(T, n_s, y_min, y_max, n_y, closure="dirichlet", closure_exponent=None):
    """Uniform grid; periodic grids exclude the right endpoint."""
    if not T > 0:
        raise ConfigError("T must be positive")
    if int(n_s) < 2:
        raise ConfigError("too few time nodes")
    if int(n_y) < 3:
        raise ConfigError("too few state nodes")
    if not y_min < y_max:
        raise ConfigError("y_min must be below y_max")
    s = np.linspace(0.0, T, int(n_s))
    if closure == "periodic":
        L = y_max - y_min
        y = y_min + L * np.arange(int(n_y)) / int(n_y)
        return SpaceTimeGrid(s, y, closure, period=float(L))
    return SpaceTimeGrid(s, np.linspace(y_min, y_max, int(n_y)), closure,
                         closure_exponent=closure_exponent)


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise InstabilityError(f"non-finite values in {what}")


@dataclass(eq=False)
class Field4:
    """Values of a function of (t, s, x, y) on a grid."""

    values: np.ndarray
    grid: SpaceTimeGrid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape != self.grid.shape4:
            raise ConfigError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape4}")
        _check_finite(self.values, "Field4")

    @classmethod
    def from_function(cls, grid, fn):
        t, s, x, y = grid.open_mesh()
        vals = np.broadcast_to(np.asarray(fn(t, s, x, y), float), grid.shape4)
        return cls(np.array(vals), grid)

    def derivative(self, which):
        return derivative(self, which)

    def trace(self):
        return diagonal_trace(self)


@dataclass(eq=False)
class Field2:
    """Values of a function of (s, y); houses values, policies and traces."""

    values: np.ndarray
    grid: SpaceTimeGrid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape != self.grid.shape2:
            raise ConfigError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape2}")
        _check_finite(self.values, "Field2")


def trace_values(arr):
    """arr[j, j, l, l] for a (n_s, n_s, n_y, n_y) array."""
    ns, ny = arr.shape[1], arr.shape[3]
    j = np.arange(ns)[:, None]
    l = np.arange(ny)[None, :]
    return arr[j, j, l, l]


def diagonal_trace(u):
    """v(s, y) = u(s, s, y, y) by index extraction."""
    return Field2(trace_values(u.values), u.grid)


def slice_diagonal(arr):
    """arr[..., l, l] for the last two axes (x, y) of a slice."""
    n = arr.shape[-1]
    idx = np.arange(n)
    return arr[..., idx, idx]


# ----------------------------------------------------------------------------
# finite differences

def diff_state(arr, h, order, closure, axis=-1):
    """First or second derivative along a uniform state axis.

    Central differences inside; second-order one-sided stencils at the ends
    unless the axis is periodic.
    """
    arr = np.asarray(arr, float)
    if order == 0:
        return arr.copy()
    a = np.moveaxis(arr, axis, -1)
    n = a.shape[-1]
    if n < 3:
        raise ConfigError("axis too short for differencing")
    out = np.empty_like(a)
    if closure == "periodic":
        up = np.roll(a, -1, axis=-1)
        dn = np.roll(a, 1, axis=-1)
        if order == 1:
            out[...] = (up - dn) / (2 * h)
        else:
            out[...] = (up - 2 * a + dn) / (h * h)
        return np.moveaxis(out, -1, axis)
    if order == 1:
        out[..., 1:-1] = (a[..., 2:] - a[..., :-2]) / (2 * h)
        out[..., 0] = (-3 * a[..., 0] + 4 * a[..., 1] - a[..., 2]) / (2 * h)
        out[..., -1] = (3 * a[..., -1] - 4 * a[..., -2] + a[..., -3]) / (2 * h)
    elif order == 2:
        out[..., 1:-1] = (a[..., 2:] - 2 * a[..., 1:-1] + a[..., :-2]) / (h * h)
        if n >= 4:
            out[..., 0] = (2 * a[..., 0] - 5 * a[..., 1] + 4 * a[..., 2] - a[..., 3]) / (h * h)
            out[..., -1] = (2 * a[..., -1] - 5 * a[..., -2] + 4 * a[..., -3] - a[..., -4]) / (h * h)
        else:
            out[..., 0] = out[..., 1]
            out[..., -1] = out[..., 1]
    else:
        raise ValueError("order must be 0, 1 or 2")
    return np.moveaxis(out, -1, axis)


def diff_time(arr, nodes, axis):
    """First derivative along a (possibly non-uniform) time axis."""
    if np.asarray(arr).shape[axis] < 3:
        raise ConfigError("axis too short for differencing")
    return np.gradient(np.asarray(arr, float), nodes, axis=axis, edge_order=2)


_WHICH = {
    "y": ("y", 1), "yy": ("y", 2), "x": ("x", 1), "xx": ("x", 2),
    "t": ("t", 1), "s": ("s", 1),
}


def derivative(u, which):
    """Finite-difference derivative of a Field4: one of y, yy, x, xx, t, s."""
    key = which[2:] if which.startswith(("∂_", "d_")) else which
    if key not in _WHICH:
        raise ConfigError(f"unknown derivative {which!r}")
    axis_name, order = _WHICH[key]
    g = u.grid
    axis = AXES[axis_name]
    if axis_name in ("x", "y"):
        vals = diff_state(u.values, g.dy, order, g.closure, axis=axis)
    else:
        vals = diff_time(u.values, g.s_nodes, axis)
    return Field4(vals, g)


# ----------------------------------------------------------------------------
# Hölder norms

@dataclass
class HolderReport:
    """Discrete parabolic Hölder norm of the stack (phi, phi_t, phi_x, phi_xx).

    Each component is the supremum over the (t, x) slices of the sum over the
    stack; ``per_slice_norms[i, k]`` is the full slice norm
    ``sum_m |phi^m|_0 + <phi^m>_y + <phi^m>_s`` at (t_i, x_k).
    """

    sup_norm: float
    seminorm_y_alpha: float
    seminorm_s_halfalpha: float
    alpha: float
    per_slice_norms: np.ndarray

    @property
    def total(self):
        return float(self.per_slice_norms.max())


def _seminorm_y(phi, y_nodes, alpha, closure, period):
    """max over |y - y'| <= 1 of |phi(y) - phi(y')| / |y - y'|^alpha, per slice."""
    n = phi.shape[-1]
    h = y_nodes[1] - y_nodes[0]
    best = np.zeros((phi.shape[0], phi.shape[2]))
    tol = 1e-12
    for d in range(1, n):
        if closure == "periodic":
            dist = min(d * h, period - d * h)
            if dist > 1 + tol or dist <= 0:
                continue
            diff = np.abs(np.roll(phi, -d, axis=-1) - phi)
        else:
            dist = y_nodes[d] - y_nodes[0]
            if dist > 1 + tol:
                break
            diff = np.abs(phi[..., d:] - phi[..., :-d])
        q = diff.max(axis=(1, 3)) / dist ** alpha
        np.maximum(best, q, out=best)
    return best


def _seminorm_s(phi, s_nodes, beta):
    """max over s < s' of |phi(s) - phi(s')| / |s - s'|^beta, per slice."""
    n = phi.shape[1]
    best = np.zeros((phi.shape[0], phi.shape[2]))
    for d in range(1, n):
        dist = (s_nodes[d:] - s_nodes[:-d])[None, :, None, None]
        q = (np.abs(phi[:, d:] - phi[:, :-d]) / dist ** beta).max(axis=(1, 3))
        np.maximum(best, q, out=best)
    return best


def holder_norms(u, alpha, window=None):
    """Hölder report of a Field4.

    ``window`` optionally restricts the node set: a dict mapping any of
    ``t, s, x, y`` to a ``slice``.  Derivatives are taken on the full grid
    before restriction, so a window never reports more than the full grid.
    """
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    g = u.grid
    stack = [u.values, derivative(u, "t").values, derivative(u, "x").values,
             derivative(u, "xx").values]
    win = [slice(None)] * 4
    for name, sl in (window or {}).items():
        win[AXES[name]] = sl
    win = tuple(win)
    s_nodes = g.s_nodes[win[1]]
    y_nodes = g.y_nodes[win[3]]
    restricted_y = win[3] != slice(None)
    closure = "dirichlet" if restricted_y and g.closure == "periodic" else g.closure
    sup = sem_y = sem_s = 0.0
    for phi in stack:
        phi = phi[win]
        sup_m = np.abs(phi).max(axis=(1, 3))
        y_m = _seminorm_y(phi, y_nodes, alpha, closure, g.period)
        s_m = _seminorm_s(phi, s_nodes, alpha / 2)
        sup = sup + sup_m
        sem_y = sem_y + y_m
        sem_s = sem_s + s_m
    per_slice = sup + sem_y + sem_s
    return HolderReport(float(np.max(sup)), float(np.max(sem_y)), float(np.max(sem_s)),
                        float(alpha), per_slice)


# ----------------------------------------------------------------------------
# serialization

_MAGIC = b"TIC4"


def _atomic_write_bytes(path, payload):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_t4b(path, values):
    """Write a 4-index (or 2-index, as (1, s, 1, y)) array in the TIC4 layout."""
    arr = np.asarray(values.values if hasattr(values, "values") else values, float)
    if arr.ndim == 2:
        arr = arr[None, :, None, :]
    if arr.ndim != 4:
        raise ConfigError("t4b fields are 4-index arrays")
    header = _MAGIC + struct.pack("<4I", *arr.shape)
    header += b"\0" * (32 - len(header))
    _atomic_write_bytes(path, header + np.ascontiguousarray(arr, "<f8").tobytes())


def read_t4b(path):
    with open(path, "rb") as fh:
        header = fh.read(32)
        if len(header) != 32 or header[:4] != _MAGIC:
            raise ConfigError(f"{path}: not a TIC4 file")
        shape = struct.unpack("<4I", header[4:20])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise ConfigError(f"{path}: truncated payload")
    return data.reshape(shape).astype(float)


def write_csv(path, columns):
    """Write named equal-length columns (dict name -> 1-D array)."""
    names = list(columns)
    cols = [np.asarray(columns[k]).ravel() for k in names]
    n = cols[0].size
    if any(c.size != n for c in cols):
        raise ConfigError("csv columns must have equal length")
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".csv")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([repr(float(c[i])) for c in cols])
    os.replace(tmp, path)


def field2_columns(f2, name="value"):
    """Long-format columns (s, y, name) for a Field2."""
    s, y = np.meshgrid(f2.grid.s_nodes, f2.grid.y_nodes, indexing="ij")
    return {"s": s.ravel(), "y": y.ravel(), name: f2.values.ravel()}
