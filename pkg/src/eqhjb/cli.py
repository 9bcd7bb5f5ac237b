"""Config-driven runs: ``eqhjb run config.yaml`` and ``eqhjb list``.

Exit status: 0 when every enabled check passes, 1 on a failed check or a
solver failure, 2 on a config schema error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import registry
from .core import ConfigError, SolverError, make_grid, write_csv, write_t4b

log = logging.getLogger("eqhjb")

EXPERIMENTS = ("linear-verify", "nonlinear-verify", "merton-crossval", "gap-study",
               "game-refine", "fbsde-check")
TOP_KEYS = {"experiment", "grid", "solver", "model", "study", "checks", "output_dir", "seed"}
GRID_KEYS = {"T": float, "n_s": int, "y_min": float, "y_max": float, "n_y": int,
             "closure": str, "closure_exponent": float}
SOLVER_KEYS = {"scheme": str, "inner_picard_tol": float, "tol": float, "delta_init": float,
               "rho_target": float, "max_outer": int, "naive_tol": float,
               "naive_max_sweeps": int}
POSITIVE = {"inner_picard_tol", "tol", "delta_init", "naive_tol", "T", "closure_exponent"}

MERTON_GRID = {"T": 1.0, "n_s": 21, "y_min": 0.5, "y_max": 4.5, "n_y": 41, "closure": "power",
               "closure_exponent": 0.5}
PERIODIC = {"T": 1.0, "y_min": 0.0, "y_max": 2 * np.pi, "closure": "periodic"}
DEFAULTS = {
    "linear-verify": ({**PERIODIC, "n_s": 101, "n_y": 32}, "nonlocal-ode"),
    "nonlinear-verify": ({**PERIODIC, "n_s": 21, "n_y": 32}, "quadratic-toy"),
    "merton-crossval": (MERTON_GRID, "merton"),
    "gap-study": (MERTON_GRID, "merton"),
    "game-refine": ({**MERTON_GRID, "n_s": 33}, "merton"),
    "fbsde-check": ({**PERIODIC, "n_s": 65, "n_y": 128}, "heat"),
}


class SchemaError(ConfigError):
    def __init__(self, key, msg):
        super().__init__(f"config error at '{key}': {msg}")
        self.key = key


def _typed(block, name, spec, where):
    out = {}
    if not isinstance(block, dict):
        raise SchemaError(where, "must be a mapping")
    for k, v in block.items():
        if k not in spec:
            raise SchemaError(f"{where}.{k}", "unknown key")
        typ = spec[k]
        if typ is int and (isinstance(v, bool) or not isinstance(v, int)):
            raise SchemaError(f"{where}.{k}", "must be an integer")
        if typ is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise SchemaError(f"{where}.{k}", "must be a number")
        if typ is str and not isinstance(v, str):
            raise SchemaError(f"{where}.{k}", "must be a string")
        if k in POSITIVE and not v > 0:
            raise SchemaError(f"{where}.{k}", "must be positive")
        out[k] = typ(v)
    return out


def validate(raw):
    """Check a parsed config and fill defaults; raises SchemaError naming the key."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise SchemaError("<root>", "config must be a mapping")
    for k in raw:
        if k not in TOP_KEYS:
            raise SchemaError(k, "unknown key")
    if "experiment" not in raw:
        raise SchemaError("experiment", "missing required key 'experiment'")
    exp = raw["experiment"]
    if exp not in EXPERIMENTS:
        raise SchemaError("experiment", f"unknown experiment {exp!r}; one of {', '.join(EXPERIMENTS)}")
    grid_default, model_default = DEFAULTS[exp]
    cfg = {"experiment": exp}
    cfg["grid"] = {**grid_default, **_typed(raw.get("grid", {}), "grid", GRID_KEYS, "grid")}
    for k in ("n_s", "n_y"):
        if cfg["grid"][k] < 3:
            raise SchemaError(f"grid.{k}", "must be at least 3")
    cfg["solver"] = _typed(raw.get("solver", {}), "solver", SOLVER_KEYS, "solver")
    model = raw.get("model", {})
    if not isinstance(model, dict):
        raise SchemaError("model", "must be a mapping")
    for k in model:
        if k not in ("name", "params"):
            raise SchemaError(f"model.{k}", "unknown key")
    name = model.get("name", model_default)
    params = model.get("params", {}) or {}
    if not isinstance(params, dict):
        raise SchemaError("model.params", "must be a mapping")
    table = {"linear-verify": registry.COEFFICIENTS, "nonlinear-verify": registry.NONLINEARITIES,
             "fbsde-check": {"heat": None}}.get(exp, {**registry.MODELS, **registry._CUSTOM})
    if name not in table:
        raise SchemaError("model.name", f"unknown name {name!r} for {exp}")
    cfg["model"] = {"name": name, "params": params}
    for k in ("study", "checks"):
        if not isinstance(raw.get(k, {}), dict):
            raise SchemaError(k, "must be a mapping")
        cfg[k] = dict(raw.get(k, {}) or {})
    for k, v in cfg["checks"].items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError(f"checks.{k}", "must be a number")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise SchemaError("seed", "must be a non-negative integer")
    cfg["seed"] = seed
    out = raw.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise SchemaError("output_dir", "must be a path string")
    cfg["output_dir"] = out
    return cfg


def _grid(cfg):
    g = cfg["grid"]
    try:
        return make_grid(g["T"], g["n_s"], g["y_min"], g["y_max"], g["n_y"], g["closure"],
                         closure_exponent=g.get("closure_exponent"))
    except ConfigError as exc:
        raise SchemaError("grid", str(exc)) from None


def _configs(cfg):
    from .hjb import HJBConfig
    from .linear import StepperConfig
    from .nonlinear import NonlinearConfig
    s = cfg["solver"]
    lin = StepperConfig(**{k: s[k] for k in ("scheme", "inner_picard_tol") if k in s})
    nl = NonlinearConfig(linear=lin, **{k: s[k] for k in ("tol", "delta_init", "rho_target",
                                                           "max_outer") if k in s})
    hj = HJBConfig(nonlinear=nl, **{k: s[k] for k in ("naive_tol", "naive_max_sweeps") if k in s})
    return lin, nl, hj


def _check(checks, name, value, threshold, op):
    ok = bool(value <= threshold) if op == "<=" else bool(value >= threshold)
    checks[name] = {"value": float(value), "threshold": float(threshold), "op": op, "pass": ok}


# ----------------------------------------------------------------------------
# experiments; each returns (results, checks) and writes files into ``out``

def _linear_verify(cfg, grid, out):
    from .linear import LinearProblem, solve_linear
    lin, _, _ = _configs(cfg)
    name, params = cfg["model"]["name"], cfg["model"]["params"]
    coeffs = registry.get_coefficients(name, **params)
    a2 = float(coeffs.A.get(2, 0.0))
    b0 = float(coeffs.B.get(0, 0.0))
    if set(coeffs.A) - {2} or set(coeffs.B) - {0}:
        raise SchemaError("model.name", "linear-verify needs a heat / nonlocal-ode coefficient set")
    g = (lambda t, x, y: np.sin(y)) if a2 else (lambda t, x, y: 1.0 + 0 * y)
    u = solve_linear(LinearProblem(coeffs, None, g, grid), lin)
    _, s, _, y = grid.open_mesh()
    # the diagonal of sin / constant data decays like the plain ODE or heat mode
    exact = np.exp(-(a2 + b0) * s) * (np.sin(y) if a2 else 1.0)
    err = float(np.max(np.abs(u.values - exact)))
    write_t4b(out / "u.t4b", u)
    write_csv(out / "trace.csv", _surface(grid, u_diag=u.trace().values))
    checks = {}
    _check(checks, "max_error", err, cfg["checks"].get("max_error", 1e-3), "<=")
    return {"max_error": err, "inner_iterations_max": int(max(u.meta["inner_iterations"] or [0]))}, checks


def _nonlinear_verify(cfg, grid, out):
    from .nonlinear import solve_nonlinear
    _, nl, _ = _configs(cfg)
    name, params = cfg["model"]["name"], dict(cfg["model"]["params"])
    amp = float(cfg["study"].get("amplitude", 0.5))
    if name == "merton-equilibrium":
        from .hjb import cost_form, terminal_data
        from .merton import MertonParams, merton_spec
        g0 = terminal_data(cost_form(merton_spec(MertonParams(T=grid.T, **params))), grid)
        F = registry.get_nonlinearity(name, T=grid.T, **params)
    else:
        F = registry.get_nonlinearity(name, **params)
        g0 = amp * (1 + np.cos(grid.y_nodes))[None, None, :] + np.zeros(grid.shape4[1:])
    u, state, ext = solve_nonlinear(F, g0, grid, nl)
    last = state.contraction_ratios[-min(2, len(state.contraction_ratios)):] or [0.0]
    write_t4b(out / "u.t4b", u)
    res = {"picard": state.to_dict(), "extension": ext.to_dict()}
    checks = {}
    _check(checks, "final_contraction_ratio", max(last), nl.rho_target, "<=")
    _check(checks, "final_residual", state.residual_history[-1] if state.residual_history else 0.0,
           nl.tol, "<=")
    return res, checks


def _merton_crossval(cfg, grid, out):
    from .hjb import solve_equilibrium
    from .merton import MertonParams, equilibrium_closed_form, oracle_columns
    _, _, hj = _configs(cfg)
    P = MertonParams(T=grid.T, **cfg["model"]["params"])
    spec = registry.get_model("merton", T=grid.T, **cfg["model"]["params"])
    res = solve_equilibrium(spec, grid, hj)
    ex = equilibrium_closed_form(P, grid)
    mask = _interior(grid)
    rel = np.abs(res.value.values - ex.V.values) / np.abs(ex.V.values)
    ratio = res.policy[0].values / grid.y_nodes[None, :]
    pol_err = np.abs(ratio / P.risky_ratio - 1)
    write_csv(out / "surface.csv", _surface(grid, V=res.value.values, V_ansatz=ex.V.values,
                                            a_over_y=ratio,
                                            c_over_y=res.policy[1].values / grid.y_nodes[None, :]))
    write_csv(out / "oracle.csv", oracle_columns(P, grid, ex))
    checks = {}
    _check(checks, "rel_err", float(rel[mask].max()), cfg["checks"].get("rel_err", 0.02), "<=")
    _check(checks, "policy_err", float(pol_err[mask].max()), cfg["checks"].get("policy_err", 0.02), "<=")
    return {"rel_err": float(rel[mask].max()), "policy_err": float(pol_err[mask].max()),
            "solver": res.meta}, checks


def _interior(grid):
    y = grid.y_nodes
    q = (y.max() - y.min()) / 4
    ym = (y >= y.min() + q - 1e-12) & (y <= y.max() - q + 1e-12)
    sm = grid.s_nodes <= 0.9 * grid.T + 1e-12
    return sm[:, None] & ym[None, :]


def _gap_study(cfg, grid, out):
    from .hjb import gap_report, naive_solve, solve_equilibrium
    _, _, hj = _configs(cfg)
    spec = registry.get_model(cfg["model"]["name"], T=grid.T, **cfg["model"]["params"])
    res = solve_equilibrium(spec, grid, hj)
    Vn = naive_solve(spec, grid, hj)
    y_window = None
    if grid.closure != "periodic":
        n = grid.n_y
        y_window = slice(n // 4, 3 * n // 4 + 1)
    rep = gap_report(res.value, Vn, y_window=y_window)
    write_csv(out / "surface.csv", _surface(grid, V=res.value.values, V_naive=Vn.values,
                                            gap=rep.gap.values,
                                            **{f"policy_{k}": p.values
                                               for k, p in enumerate(res.policy)}))
    checks = {}
    tol = hj.naive_tol
    _check(checks, "min_gap", rep.min_gap, -10 * tol, ">=")
    if "min_exponent" in cfg["checks"] or spec.name == "merton":
        _check(checks, "fitted_exponent", rep.fitted_exponent,
               cfg["checks"].get("min_exponent", 1.4), ">=")
    if "max_gap" in cfg["checks"]:
        _check(checks, "max_gap", rep.max_gap, cfg["checks"]["max_gap"], "<=")
    return rep.to_dict(), checks


def _game_refine(cfg, grid, out):
    from .game import Partition, partition_solve, refine_study
    from .hjb import solve_equilibrium
    _, _, hj = _configs(cfg)
    spec = registry.get_model(cfg["model"]["name"], T=grid.T, **cfg["model"]["params"])
    ns = [int(n) for n in cfg["study"].get("partitions", [4, 8, 16])]
    ref = solve_equilibrium(spec, grid, hj).value
    rows = refine_study(spec, grid, ns, hj, reference=ref)
    VP, _ = partition_solve(spec, Partition.uniform(grid.T, ns[-1]), grid, hj)
    write_csv(out / "surface.csv", _surface(grid, V=ref.values, V_partition=VP.values))
    write_csv(out / "refine.csv", {k: [r[k] for r in rows] for k in rows[0]})
    d = [r["sup_diff_knots"] for r in rows]
    checks = {"sup_diff_decreasing": {"value": d, "pass": bool(all(b < a for a, b in zip(d, d[1:])))}}
    return {"rows": rows}, checks


def _fbsde_check(cfg, grid, out):
    from .fbsde import FlowModel, SimConfig, heat_field, rate_study, simulate_flow
    p = {"sigma": 0.5, "drift": 0.3, **cfg["model"]["params"]}
    st = cfg["study"]
    u = heat_field(grid, p["sigma"], p["drift"])
    model = FlowModel.heat(p["sigma"], p["drift"])
    sim = SimConfig(int(st.get("n_paths", 16384)), int(st.get("n_steps", 128)), cfg["seed"],
                    float(st.get("x0", 1.0)), bool(st.get("antithetic", False)))
    base = simulate_flow(u, model, sim, float(st.get("t_anchor", 0.0)))
    rates = rate_study(u, model, sim, base.t_anchor, tuple(st.get("steps", (16, 64, 256))),
                       tuple(st.get("paths", (256, 1024, 4096, 16384))), int(st.get("n_seeds", 16)))
    base.rates = rates
    checks = {}
    _check(checks, "anchor_error", base.anchor_error, 0.0, "<=")
    checks["rate_steps"] = {"value": rates["rate_steps"], "band": [-0.8, -0.2],
                            "pass": bool(abs(rates["rate_steps"] + 0.5) <= 0.3)}
    checks["rate_paths"] = {"value": rates["rate_paths"], "band": [-0.7, -0.3],
                            "pass": bool(abs(rates["rate_paths"] + 0.5) <= 0.2)}
    return base.to_dict(), checks


RUNNERS = {"linear-verify": _linear_verify, "nonlinear-verify": _nonlinear_verify,
           "merton-crossval": _merton_crossval, "gap-study": _gap_study,
           "game-refine": _game_refine, "fbsde-check": _fbsde_check}


def _surface(grid, **tables):
    """Long-format (s, y, ...) columns for (s, y) tables."""
    s, y = np.meshgrid(grid.s_nodes, grid.y_nodes, indexing="ij")
    return {"s": s.ravel(), "y": y.ravel(), **{k: np.asarray(v).ravel() for k, v in tables.items()}}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def run(config_path, output_dir=None, threads=None):
    """Run one experiment; returns the exit status."""
    try:
        with open(config_path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    except yaml.YAMLError as exc:
        print(f"config error at '<root>': not valid YAML: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = validate(raw)
        grid = _grid(cfg)
        _configs(cfg)
    except ConfigError as exc:
        print(str(exc) if isinstance(exc, SchemaError) else f"config error at 'solver': {exc}",
              file=sys.stderr)
        return 2
    target = Path(output_dir or cfg["output_dir"] or f"results/{cfg['experiment']}")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        results, checks = RUNNERS[cfg["experiment"]](cfg, grid, tmp)
    except ConfigError as exc:
        # bad model parameters surface here, after the structural checks
        shutil.rmtree(tmp, ignore_errors=True)
        print(str(exc) if isinstance(exc, SchemaError) else f"config error at 'model': {exc}",
              file=sys.stderr)
        return 2
    except BaseException as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        if not isinstance(exc, (SolverError, FloatingPointError,
                                np.linalg.LinAlgError, AssertionError)):
            raise
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        log_ = getattr(exc, "log", None)
        if log_ is not None:
            print(json.dumps(_jsonable(log_.to_dict() if hasattr(log_, "to_dict") else log_)),
                  file=sys.stderr)
        return 1
    passed = all(c["pass"] for c in checks.values())
    doc = {"experiment": cfg["experiment"], "config": cfg, "threads": threads,
           "results": results, "checks": checks, "pass": passed,
           "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    with open(tmp / "results.json", "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    old = None
    if target.exists():
        old = target.with_name(f".{target.name}.old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(target, old)
    os.replace(tmp, target)
    if old is not None:
        shutil.rmtree(old)
    for name, c in checks.items():
        log.info("%s: %s", name, "pass" if c["pass"] else "FAIL")
    print(f"{cfg['experiment']}: {'pass' if passed else 'FAIL'} -> {target}")
    return 0 if passed else 1


def _flags(parser, default):
    parser.add_argument("--threads", type=int, default=default, help="cap on worker threads")
    parser.add_argument("--output-dir", default=default, help="override the config output_dir")
    parser.add_argument("--verbose", action="store_true", default=default)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="eqhjb", description=__doc__.splitlines()[0])
    _flags(ap, None)
    common = argparse.ArgumentParser(add_help=False)
    _flags(common, argparse.SUPPRESS)        # flags are accepted after the command too
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config", parents=[common])
    p_run.add_argument("config")
    sub.add_parser("list", help="list built-in models, coefficients and nonlinearities",
                   parents=[common])
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    if args.command == "list":
        sys.stdout.write(registry.list_registry())
        return 0
    return run(args.config, args.output_dir, args.threads)


if __name__ == "__main__":
    sys.exit(main())
