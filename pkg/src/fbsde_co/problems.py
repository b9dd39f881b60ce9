"""Control problems driven by forward-backward SDEs.

Coefficient callbacks receive tape nodes and return tape nodes:

* ``b(t, x, y, z, u)`` -> (M, n), ``sigma(t, x, y, z, u)`` -> (M, n, d)
* ``l(t, x, y, z, u)`` -> (M, m), ``g(x)`` -> (M, m)
* ``f(t, x, y, z, u)``, ``h(x)``, ``gamma(y)`` -> (M,)

``x`` is (M, n), ``y`` is (M, m), ``z`` is (M, m, d) and ``u`` is the
concatenation of the leader network outputs, (M, k).  Problems without a
backward component have ``m == 0`` and receive ``y = z = None``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError


@dataclass(frozen=True)
class ControlSpec:
    role: str
    dim: int
    output_map: str = "identity"


@dataclass(frozen=True)
class FBSDEControlProblem:
    name: str
    n: int
    m: int
    d: int
    T: float
    a: np.ndarray
    b: Callable
    sigma: Callable
    l: Callable | None = None
    g: Callable | None = None
    f: Callable | None = None
    h: Callable | None = None
    gamma: Callable | None = None
    controls: tuple = ()
    hidden_widths: tuple | None = None
    state_scale: float = 1.0
    # reported value of the leader objective is objective_sign * J_leader
    objective_sign: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64).reshape(self.n))
        if self.hidden_widths is None:
            object.__setattr__(self, "hidden_widths", (self.n + 10,) * 3)
        if self.m and (self.l is None or self.g is None):
            raise ValueError("a backward component needs both l and g")

    @property
    def k(self):
        return sum(c.dim for c in self.controls)

    @property
    def leader_roles(self):
        return tuple(c.role for c in self.controls)

    @property
    def follower_roles(self):
        return ("y0", "z") if self.m else ()


def _zeros(x, *shape):
    return x.tape.constant(np.zeros((x.shape[0], *shape)))


# ---------------------------------------------------------------- market

@dataclass(frozen=True)
class MarketParams:
    n: int = 10
    r: float = 0.03
    mu: float | tuple = 0.05
    sigma: float | tuple = 0.1
    x0: float = 100.0
    beta: float = 0.05
    nu: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if not self.x0 > 0:
            raise ValueError("initial wealth must be positive")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")

    @property
    def mu_vec(self):
        return np.broadcast_to(np.asarray(self.mu, dtype=np.float64), (self.n,)).copy()

    @property
    def sigma_mat(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        return s * np.eye(self.n) if s.ndim == 0 else s.reshape(self.n, self.n)


def paper_market(n=10, T=1.0, case="linear") -> MarketParams:
    """r=0.03, mu=0.05, sigma=0.1 I, x0=100, beta=0.05; nu=10 for the nonlinear case."""
    return MarketParams(n=n, T=T, nu=10.0 if case == "nonlinear" else 0.0)


def consumption_utility(c):
    return c - c * c


def _sumsq(z):
    if isinstance(z, dc.Node):
        return dc.sum(dc.square(z), axis=-1)
    return np.sum(np.square(z), axis=-1)


def driver_l(params: MarketParams, c, y, z, case="linear"):
    """-beta y - w(z) + u(c) with w = 0 (linear) or nu/2 |z|^2 (nonlinear).

    Works on floats, arrays or tape nodes.  ``z`` is summed over its last axis.
    """
    out = -params.beta * y + consumption_utility(c)
    if case == "nonlinear":
        if isinstance(z, dc.Node):
            out = out - _sumsq(z) * (0.5 * params.nu)
        else:
            out = out - 0.5 * params.nu * _sumsq(np.asarray(z, dtype=np.float64))
    elif case != "linear":
        raise ValueError(f"unknown driver case {case!r}")
    return out


def wealth_drift(params: MarketParams, x, pi, c):
    """x r + sum_i x pi^i (mu^i - r) - c, with ``pi`` the (M, n+1) simplex weights."""
    excess = pi[:, 1:] @ (params.mu_vec - params.r)
    if isinstance(excess, dc.Node):
        excess = dc.reshape(excess, (excess.shape[0], 1))
    else:
        excess = excess.reshape(-1, 1)
    return x * params.r + x * excess - c


def wealth_diffusion(params: MarketParams, x, pi):
    """Row x sum_i pi^i sigma^i, shaped (M, 1, n)."""
    row = x * (pi[:, 1:] @ params.sigma_mat)
    if isinstance(row, dc.Node):
        return dc.reshape(row, (row.shape[0], 1, params.n))
    return row.reshape(row.shape[0], 1, params.n)


def _split_controls(u, n):
    return u[:, : n + 1], u[:, n + 1: n + 2]


def market_controls(n):
    return (ControlSpec("pi", n + 1, "softmax"), ControlSpec("c", 1, "nonneg"))


def recursive_utility(params: MarketParams, case="linear") -> FBSDEControlProblem:
    """Investment-consumption with recursive utility as a leader/follower problem.

    The leader maximizes the integral form E[sum l dt + g(x_T)], encoded as
    the minimization of f = -l, h = -g with gamma = 0.
    """
    n = params.n

    def b(t, x, y, z, u):
        pi, c = _split_controls(u, n)
        return wealth_drift(params, x, pi, c)

    def sigma(t, x, y, z, u):
        pi, _ = _split_controls(u, n)
        return wealth_diffusion(params, x, pi)

    def l(t, x, y, z, u):
        _, c = _split_controls(u, n)
        return driver_l(params, c, y, z, case)

    def g(x):
        return dc.exp(-x)

    def f(t, x, y, z, u):
        return dc.reshape(-l(t, x, y, z, u), (x.shape[0],))

    def h(x):
        return dc.reshape(-g(x), (x.shape[0],))

    return FBSDEControlProblem(
        name=f"paper-market-{case}", n=1, m=1, d=n, T=params.T, a=[params.x0],
        b=b, sigma=sigma, l=l, g=g, f=f, h=h, gamma=None,
        controls=market_controls(n), hidden_widths=(100, 100, 100),
        state_scale=params.x0, objective_sign=-1.0,
        metadata={"market": params, "case": case})


def recursive_utility_linear(params: MarketParams) -> FBSDEControlProblem:
    return recursive_utility(params, "linear")


def recursive_utility_nonlinear(params: MarketParams) -> FBSDEControlProblem:
    return recursive_utility(params, "nonlinear")


def classical_equivalent(params: MarketParams, time_points=25, discount="euler") -> FBSDEControlProblem:
    """Forward-only problem maximizing discounted consumption utility plus terminal utility.

    ``discount="euler"`` weighs step i by (1 + beta dt)^-(i+1) and the
    terminal term by (1 + beta dt)^-N, which is exactly what the explicit
    Euler recursion for the linear driver produces; ``"exponential"`` uses
    e^{-beta t_i} and e^{-beta T}.  Both agree as dt -> 0.
    """
    if params.nu != 0:
        raise ContractError("the classical equivalent only exists for the linear driver (nu == 0)")
    if discount not in ("euler", "exponential"):
        raise ValueError(f"unknown discount {discount!r}")
    n, beta, T = params.n, params.beta, params.T
    dt = T / time_points

    def weight(t):
        if discount == "exponential":
            return math.exp(-beta * t)
        i = int(round(t / dt))
        return (1.0 + beta * dt) ** -(i + 1)

    terminal = math.exp(-beta * T) if discount == "exponential" else (1.0 + beta * dt) ** -time_points

    def b(t, x, y, z, u):
        pi, c = _split_controls(u, n)
        return wealth_drift(params, x, pi, c)

    def sigma(t, x, y, z, u):
        pi, _ = _split_controls(u, n)
        return wealth_diffusion(params, x, pi)

    def f(t, x, y, z, u):
        _, c = _split_controls(u, n)
        return dc.reshape(consumption_utility(c) * (-weight(t)), (x.shape[0],))

    def h(x):
        return dc.reshape(dc.exp(-x) * (-terminal), (x.shape[0],))

    return FBSDEControlProblem(
        name="paper-market-classical", n=1, m=0, d=n, T=T, a=[params.x0],
        b=b, sigma=sigma, f=f, h=h, controls=market_controls(n),
        hidden_widths=(100, 100, 100), state_scale=params.x0, objective_sign=-1.0,
        metadata={"market": params, "time_points": time_points, "discount": discount})


def negative_wealth_paths(x_paths) -> int:
    """Number of sample paths whose wealth goes negative at any grid point."""
    x = np.asarray(x_paths)
    return int(np.sum(np.any(x.reshape(x.shape[0], -1) < 0, axis=1)))


# ---------------------------------------------------------------- oracles

@dataclass(frozen=True)
class AnalyticSolution:
    y0: float
    z: np.ndarray  # (m, d) row, constant in time
    discrete_y0: Callable  # N -> exact value of the Euler recursion


def analytic_followonly_problem(n=2, T=1.0, beta=None):
    """Follower-only problem with known solution; u is frozen (no leader).

    Default: b = 0, sigma = I, l = 0, g(x) = sum_j x_j, a = 0, so y(0) = 0
    and z = (1, ..., 1).  With ``beta`` set: l = -beta y and g = 1, so
    y(0) = exp(-beta T), z = 0, and the Euler recursion gives
    (1 + beta dt)^-N.
    """
    def b(t, x, y, z, u):
        return _zeros(x, n)

    def sigma(t, x, y, z, u):
        return x.tape.constant(np.broadcast_to(np.eye(n), (x.shape[0], n, n)))

    if beta is None:
        def l(t, x, y, z, u):
            return _zeros(x, 1)

        def g(x):
            return dc.sum(x, axis=1, keepdims=True)

        solution = AnalyticSolution(0.0, np.ones((1, n)), lambda N: 0.0)
        name = "analytic-followonly"
    else:
        def l(t, x, y, z, u):
            return y * (-beta)

        def g(x):
            return x.tape.constant(np.ones((x.shape[0], 1)))

        solution = AnalyticSolution(math.exp(-beta * T), np.zeros((1, n)),
                                    lambda N: (1.0 + beta * T / N) ** -N)
        name = "analytic-decay"
    problem = FBSDEControlProblem(name=name, n=n, m=1, d=n, T=T, a=np.zeros(n),
                                  b=b, sigma=sigma, l=l, g=g,
                                  metadata={"solution": solution})
    return problem, solution


PRESETS = {
    "paper-market-linear": lambda n, T: recursive_utility(paper_market(n, T, "linear"), "linear"),
    "paper-market-nonlinear": lambda n, T: recursive_utility(paper_market(n, T, "nonlinear"), "nonlinear"),
    "analytic-followonly": lambda n, T: analytic_followonly_problem(n, T)[0],
    "analytic-decay": lambda n, T: analytic_followonly_problem(n, T, beta=0.05)[0],
}


def get_preset(name: str, n=10, T=1.0) -> FBSDEControlProblem:
    try:
        return PRESETS[name](n, T)
    except KeyError:
        raise KeyError(f"unknown problem preset {name!r}; choose from {sorted(PRESETS)}") from None
