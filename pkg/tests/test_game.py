import numpy as np
import pytest

from eqhjb.core import ConfigError, make_grid
from eqhjb.game import Partition, partition_solve
from eqhjb.hjb import HamiltonianSpec, naive_solve, solve_equilibrium
from eqhjb.registry import heat_control_spec

GRID = dict(y_min=0.0, y_max=2 * np.pi, closure="periodic")


def frozen_spec():
    """No drift, no noise, no running cost: the state never moves."""
    return HamiltonianSpec(lambda s, y, a: 0 * a[0] + 0 * y, lambda s, y, a: 0 * y,
                           lambda t, s, x, y, a, u, z: 0 * y,
                           lambda t, x, y: t * np.cos(x) + np.sin(y), (-1.0,), (1.0,))


def test_partition_parse_and_validate():
    P = Partition.parse("uniform:4", 1.0)
    assert P.knots == (0.0, 0.25, 0.5, 0.75, 1.0) and P.n == 4 and P.mesh == 0.25
    assert Partition.parse("0, 0.5, 1", 1.0).knots == (0.0, 0.5, 1.0)
    for bad in ((0.0,), (0.1, 1.0), (0.0, 0.5, 0.5, 1.0)):
        with pytest.raises(ConfigError):
            Partition(bad)
    with pytest.raises(ConfigError):
        Partition.uniform(1.0, 0)
    g = make_grid(1.0, 9, n_y=8, **GRID)
    with pytest.raises(ConfigError, match="not a grid node"):
        partition_solve(frozen_spec(), Partition((0.0, 0.3, 1.0)), g)
    with pytest.raises(ConfigError, match="ends at"):
        partition_solve(frozen_spec(), Partition.uniform(2.0, 2), g)


def test_frozen_state_closed_form():
    g = make_grid(1.0, 9, n_y=8, **GRID)
    P = Partition.uniform(1.0, 4)
    V, _ = partition_solve(frozen_spec(), P, g)
    y = g.y_nodes
    # each player pays g(t_{k-1}, y, y); the row at T belongs to the last player
    start = np.floor(g.s_nodes * 4 + 1e-12) / 4
    start[-1] = 0.75
    exact = start[:, None] * np.cos(y) + np.sin(y)
    assert np.max(np.abs(V.values - exact)) < 1e-13
    eq = solve_equilibrium(frozen_spec(), g).value.values
    assert np.max(np.abs(eq - (g.s_nodes[:, None] * np.cos(y) + np.sin(y)))) < 1e-12


def test_single_player_matches_naive_at_start():
    g = make_grid(1.0, 9, n_y=16, **GRID)
    spec = heat_control_spec(discount=0.5, pull=1.0)
    V, pol = partition_solve(spec, Partition.uniform(1.0, 1), g)
    Vn = naive_solve(spec, g)
    assert np.max(np.abs(V.values[0] - Vn.values[0])) < 1e-9
    assert len(pol) == 1 and np.all(np.isfinite(pol[0].values))


def test_time_consistent_independent_of_partition():
    g = make_grid(1.0, 17, n_y=16, **GRID)
    spec = heat_control_spec()
    Vs = [partition_solve(spec, Partition.uniform(1.0, n), g)[0].values for n in (1, 4, 8)]
    for v in Vs[1:]:
        assert np.max(np.abs(v - Vs[0])) < 1e-8
    eq = solve_equilibrium(spec, g).value.values
    assert np.max(np.abs(Vs[0] - eq)) < 1e-8


def test_deterministic():
    g = make_grid(1.0, 9, n_y=8, **GRID)
    spec = heat_control_spec(discount=0.5, pull=1.0)
    a, _ = partition_solve(spec, Partition.uniform(1.0, 4), g)
    b, _ = partition_solve(spec, Partition.uniform(1.0, 4), g)
    assert np.array_equal(a.values, b.values)
    assert a.meta["knots"] == [0.0, 0.25, 0.5, 0.75, 1.0]
