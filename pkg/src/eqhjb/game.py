"""Finite-player partition game approximating the sophisticated equilibrium.

A partition 0 = t_0 < ... < t_N = T assigns player k the interval
[t_{k-1}, t_k).  Player k starts at state xi = X(t_{k-1}) and optimizes the
objective frozen at (t_{k-1}, xi).  Its terminal cost at t_k is what the
later players' strategies actually cost under that same frozen objective;
those strategies depend on the state each later player starts from, so
the continuation cost is a batched policy evaluation over pairs
(objective state, starting state of the later player).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, Field2, diff_state, slice_diagonal
from .hjb import HJBConfig, _argmin_min, cost_form, hjb_step, solve_equilibrium


@dataclass(frozen=True)
class Partition:
    knots: tuple

    def __post_init__(self):
        k = np.asarray(self.knots, float)
        if k.ndim != 1 or k.size < 2:
            raise ConfigError("a partition needs at least the two knots 0 and T")
        if k[0] != 0.0 or np.any(np.diff(k) <= 0):
            raise ConfigError("partition knots must start at 0 and increase strictly")
        object.__setattr__(self, "knots", tuple(float(v) for v in k))

    @classmethod
    def uniform(cls, T, n):
        if int(n) < 1:
            raise ConfigError("a partition needs at least one interval")
        return cls(tuple(np.linspace(0.0, T, int(n) + 1)))

    @classmethod
    def parse(cls, text, T):
        """Accept "uniform:N" or a comma separated knot list."""
        text = str(text).strip()
        if text.startswith("uniform:"):
            return cls.uniform(T, int(text.split(":", 1)[1]))
        return cls(tuple(float(v) for v in text.split(",")))

    @property
    def T(self):
        return self.knots[-1]

    @property
    def n(self):
        return len(self.knots) - 1

    @property
    def mesh(self):
        return float(np.max(np.diff(self.knots)))


def _knot_indices(partition, grid):
    s = grid.s_nodes
    if abs(partition.T - grid.T) > 1e-12 * max(1.0, grid.T):
        raise ConfigError(f"partition ends at {partition.T} but the grid ends at {grid.T}")
    idx = []
    for t in partition.knots:
        j = int(np.argmin(np.abs(s - t)))
        if abs(s[j] - t) > 1e-9 * max(1.0, grid.T):
            raise ConfigError(f"partition knot {t} is not a grid node")
        idx.append(j)
    return idx


def _march(cspec, U, t_obj, x_obj, grid, j_hi, j_lo, cfg, controls=None):
    """Step rows of U from s_{j_hi} down to s_{j_lo}.

    With ``controls`` (a list indexed by level, each a tuple of (rows, y)
    arrays) the march is a policy evaluation.  Returns the value at every
    level and the controls used, both indexed by level j - j_lo.
    """
    s = grid.s_nodes
    bounds = (U[:, 0].copy(), U[:, -1].copy())
    n_lvl = j_hi - j_lo + 1
    values, used = [None] * n_lvl, [None] * n_lvl
    values[-1] = U
    if controls is None:
        shp = U.shape
        used[-1] = _argmin_min(cspec, np.broadcast_to(t_obj, shp), s[j_hi],
                               np.broadcast_to(x_obj, shp), np.broadcast_to(grid.y_nodes, shp),
                               U, diff_state(U, grid.dy, 1, grid.closure),
                               diff_state(U, grid.dy, 2, grid.closure))
    else:
        used = list(controls)
    for j in range(j_hi, j_lo, -1):
        a_new = None if controls is None else used[j - 1 - j_lo]
        U, a, _ = hjb_step(cspec, U, t_obj, x_obj, s[j], s[j - 1], grid, bounds, cfg,
                           a_old=used[j - j_lo], a_new=a_new)
        values[j - 1 - j_lo] = U
        used[j - 1 - j_lo] = a
    return values, used


def partition_solve(spec, partition, grid, cfg=None):
    """Stitched value V^P(s, y) and policy of the N-player partition game.

    At the knots V^P(t_{k-1}, y) is player k's value at its own start state.
    Between knots the table holds u^k(s, y; xi = y), player k's value with
    the objective frozen at the current state; the row at T belongs to the
    last player.
    """
    cfg = cfg or HJBConfig()
    spec.check(grid.s_nodes, grid.y_nodes)
    cspec = cost_form(spec)
    idx = _knot_indices(partition, grid)
    s, y = grid.s_nodes, grid.y_nodes
    ny, m = grid.n_y, len(cspec.control_lo)
    xi = y[:, None]
    V = np.full(grid.shape2, np.nan)
    pol = [np.full(grid.shape2, np.nan) for _ in range(m)]
    strategies = {}            # player -> controls per level, rows indexed by start state
    starts = {}                # player -> its value at its own start state
    for k in range(partition.n, 0, -1):
        i0, i1 = idx[k - 1], idx[k]
        t_k = s[i0]
        g_obj = np.broadcast_to(np.asarray(cspec.g(t_k, xi, y[None, :]), float), (ny, ny))
        # continuation cost of players k+1..N under the objective frozen at (t_k, xi)
        C = np.array(g_obj)
        if k < partition.n:
            t_pair = np.full((ny * ny, 1), t_k)
            x_pair = np.repeat(y, ny)[:, None]            # rows ordered (xi, xi_j)
            E = np.repeat(g_obj, ny, axis=0)
            for j in range(partition.n, k, -1):
                ctrl = [tuple(np.tile(c, (ny, 1)) for c in lvl) for lvl in strategies[j]]
                vals, _ = _march(cspec, E, t_pair, x_pair, grid, idx[j], idx[j - 1], cfg,
                                 controls=ctrl)
                # the later player starts where the state is: xi_j = y
                start = vals[0].reshape(ny, ny, ny)[:, np.arange(ny), np.arange(ny)]
                E = np.repeat(start, ny, axis=0)
            C = start
        vals, used = _march(cspec, C, np.full((ny, 1), t_k), xi, grid, i1, i0, cfg)
        strategies[k] = used
        starts[k] = slice_diagonal(vals[0])
        for lvl, j in enumerate(range(i0, i1 + (k == partition.n))):
            V[j] = slice_diagonal(vals[lvl])
            for c in range(m):
                pol[c][j] = slice_diagonal(used[lvl][c])
    if np.isnan(V).any():
        raise RuntimeError("partition table has unfilled entries")
    # stitching: each knot row holds the value of the player starting there
    for k in range(1, partition.n + 1):
        assert np.array_equal(V[idx[k - 1]], starts[k]), "stitching mismatch at a knot"
    if spec.sense == "max":
        V = -V
    meta = {"sense": spec.sense, "knots": list(partition.knots), "mesh": partition.mesh}
    return Field2(V, grid, meta), [Field2(p, grid, {"component": c}) for c, p in enumerate(pol)]


def refine_study(spec, grid, n_list=(4, 8, 16), cfg=None, reference=None):
    """Sup distance between the partition value and the equilibrium value.

    Returns one row per partition size with the distance at the knots and
    over the whole table.
    """
    cfg = cfg or HJBConfig()
    if reference is None:
        reference = solve_equilibrium(spec, grid, cfg).value
    rows = []
    for n in n_list:
        P = Partition.uniform(grid.T, n)
        VP, _ = partition_solve(spec, P, grid, cfg)
        knots = _knot_indices(P, grid)
        diff = np.abs(VP.values - reference.values)
        rows.append({"n": int(n), "mesh": P.mesh,
                     "sup_diff_knots": float(diff[knots].max()),
                     "sup_diff": float(diff.max())})
    return rows
