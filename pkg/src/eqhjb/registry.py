"""Named built-in control problems, coefficient sets and nonlinearities."""

from __future__ import annotations

import numpy as np

from .core import ConfigError
from .hjb import HamiltonianSpec, assemble_equilibrium_F
from .linear import CoefficientSet
from .merton import MertonParams, merton_spec
from .nonlinear import Nonlinearity


def heat_control_spec(sigma=0.5, level=0.5, discount=0.0, pull=0.0, T=1.0):
    """Periodic LQ problem: dY = a ds + sigma dW, running cost
    D(t, s) (a^2/2 + level cos(y - pull x)), terminal cost D(t, T) sin(y - pull x),
    with D = exp(-discount (s - t)).  Time consistent when discount = pull = 0.
    """
    if sigma <= 0:
        raise ConfigError("heat-control sigma must be positive")

    def D(t, s):
        return np.exp(-discount * (np.asarray(s, float) - np.asarray(t, float)))

    def b(s, y, a):
        return a[0]

    def vol(s, y, a):
        return sigma + 0 * np.asarray(a[0], float)

    def h(t, s, x, y, a, u, z):
        return D(t, s) * (0.5 * a[0] ** 2 + level * np.cos(y - pull * x))

    def g(t, x, y):
        return D(t, T) * np.sin(y - pull * x)

    def argmin(t, s, x, y, u, p, q):
        return (-np.asarray(p, float) / D(t, s),)

    spec = HamiltonianSpec(b, vol, h, g, (-np.inf,), (np.inf,), closed_form_argmin=argmin,
                           diffusion_controlled=False,
                           name="heat-control" if discount == 0 and pull == 0 else "heat-control-tic",
                           params={"sigma": sigma, "level": level, "discount": discount,
                                   "pull": pull, "T": T})
    return spec


def heat_coefficients(a2=1.0, b0=0.0):
    """u_s = a2 u_yy - b0 u(s, s, y, y): the heat and nonlocal-ODE cases."""
    B = {0: b0} if b0 else {}
    return CoefficientSet({2: a2} if a2 else {}, B, lambda_ell=a2)


def quadratic_toy(c=1.0, kappa=0.5):
    """u_s = u_yy + kappa u_yy(s,s,y,y) + c u^2: blows up for large data."""

    def F(t, s, x, y, zl, zd):
        return zl[2] + kappa * zd[2] + c * zl[0] ** 2

    def partials(t, s, x, y, zl, zd):
        zero = np.zeros_like(np.asarray(zl[0], float))
        one = np.ones_like(zero)
        return (2 * c * zl[0], zero, one), (zero, zero, kappa * one)

    return Nonlinearity(F, partials=partials, domain_radius=200.0, lambda_ell=1.0)


MODELS = {
    "heat-control": lambda **kw: heat_control_spec(**kw),
    "heat-control-tic": lambda **kw: heat_control_spec(**{"discount": 0.5, "pull": 1.0, **kw}),
    "merton": lambda **kw: merton_spec(MertonParams(**kw)),
}
COEFFICIENTS = {
    "heat": lambda **kw: heat_coefficients(**kw),
    "nonlocal-ode": lambda **kw: heat_coefficients(**{"a2": 0.0, "b0": 1.0, **kw}),
}
NONLINEARITIES = {
    "quadratic-toy": lambda **kw: quadratic_toy(**kw),
    "merton-equilibrium": lambda T=1.0, **kw: assemble_equilibrium_F(merton_spec(MertonParams(T=T, **kw)), T),
}
_CUSTOM = {}


def register(name, builder):
    """Register a custom model builder (keyword parameters -> HamiltonianSpec)."""
    if name in MODELS:
        raise ConfigError(f"model {name!r} is built in")
    _CUSTOM[name] = builder


def get_model(name, **params):
    table = {**MODELS, **_CUSTOM}
    if name == "custom" and not _CUSTOM:
        raise ConfigError("no custom model registered; use eqhjb.registry.register")
    if name not in table:
        raise ConfigError(f"unknown model {name!r}; known: {', '.join(sorted(table))}")
    try:
        return table[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for model {name!r}: {exc}") from None


def get_coefficients(name, **params):
    if name not in COEFFICIENTS:
        raise ConfigError(f"unknown coefficient set {name!r}")
    return COEFFICIENTS[name](**params)


def get_nonlinearity(name, **params):
    if name not in NONLINEARITIES:
        raise ConfigError(f"unknown nonlinearity {name!r}")
    return NONLINEARITIES[name](**params)


def list_registry():
    lines = ["models:"]
    lines += [f"  {k}" for k in sorted(MODELS)] + ["  custom (user registered)"]
    lines += [f"  {k} (custom)" for k in sorted(_CUSTOM)]
    lines += ["coefficients:"] + [f"  {k}" for k in sorted(COEFFICIENTS)]
    lines += ["nonlinearities:"] + [f"  {k}" for k in sorted(NONLINEARITIES)]
    return "\n".join(lines) + "\n"
