"""Euler-Maruyama simulation of the forward system and the discrete costs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import diffcore as dc
from .nets import bind

STREAMS = {"train": 0, "test": 1}


class SimulationBlowupError(FloatingPointError):
    def __init__(self, sample, step):
        super().__init__(f"non-finite state in sample {sample} at step {step}")
        self.sample = sample
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0 or self.N < 1:
            raise ValueError("need T > 0 and N >= 1")

    @cached_property
    def dt(self) -> np.ndarray:
        """Uniform steps; the last one absorbs rounding so that the correctly
        rounded sum ``math.fsum(dt)`` equals T exactly."""
        dt = np.full(self.N, self.T / self.N)
        last = self.T - math.fsum(dt[:-1])
        up = down = last
        for _ in range(16):
            for candidate in (up, down):
                dt[-1] = candidate
                if math.fsum(dt) == self.T:
                    return dt
            up, down = np.nextafter(up, np.inf), np.nextafter(down, -np.inf)
        dt[-1] = last
        return dt

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.concatenate([[0.0], np.cumsum(self.dt)])
        t[-1] = self.T
        return t


@dataclass
class BrownianBatch:
    increments: np.ndarray  # (M, N, d)
    seed: int | None = None
    stream: str | None = None

    @property
    def M(self):
        return self.increments.shape[0]


def brownian_rng(seed: int, stream: str = "train") -> np.random.Generator:
    """Generator for one named stream; train and test streams never overlap."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), STREAMS[stream]])))


def sample_brownian(M: int, grid: TimeGrid, d: int, seed=0, stream="train", rng=None,
                    dtype=np.float64) -> BrownianBatch:
    if M < 1:
        raise ValueError("need M >= 1")
    if rng is None:
        rng = brownian_rng(seed, stream)
    dB = rng.standard_normal((M, grid.N, d)) * np.sqrt(grid.dt)[None, :, None]
    return BrownianBatch(dB.astype(dtype, copy=False), seed, stream)


@dataclass
class TrajectoryBatch:
    x: list = field(default_factory=list)  # N+1 nodes of (M, n)
    y: list = field(default_factory=list)  # N+1 nodes of (M, m)
    z: list = field(default_factory=list)  # N nodes of (M, m, d)
    u: list = field(default_factory=list)  # N nodes of (M, k)
    l: list = field(default_factory=list)  # N nodes of (M, m), driver values
    bindings: dict = field(default_factory=dict)  # role -> {param name: node}

    def arrays(self) -> dict:
        def stack(nodes):
            return np.stack([n.value for n in nodes], axis=1) if nodes else None
        return {"x": stack(self.x), "y": stack(self.y), "z": stack(self.z), "u": stack(self.u)}


def _net_input(tape, net, t_frac, x_scaled, M, cache):
    if not net.config.time_input:
        return x_scaled
    if "tx" not in cache:
        cache["tx"] = dc.concat([tape.constant(np.full((M, 1), t_frac)), x_scaled], axis=1)
    return cache["tx"]


def simulate(problem, nets: dict, brownian: BrownianBatch, grid: TimeGrid, tape: dc.Tape,
             mode="train", trainable=None, y0=None) -> TrajectoryBatch:
    """Unroll the controlled forward system on ``tape``.

    ``trainable`` is the set of network roles whose parameters are
    registered for differentiation (default: all).  ``y0`` overrides the
    y0-network with a fixed array.
    """
    M, N, d = brownian.increments.shape
    if N != grid.N or d != problem.d:
        raise dc.ShapeError(f"brownian batch {brownian.increments.shape} does not match grid N={grid.N}, d={problem.d}")
    trainable = set(nets) if trainable is None else set(trainable)
    saved_modes = {role: net.params.mode for role, net in nets.items()}
    for net in nets.values():
        net.params.mode = mode
    try:
        traj = TrajectoryBatch()
        for role, net in nets.items():
            traj.bindings[role] = bind(net.params, tape, trainable=role in trainable, prefix=f"{role}/")
        scale = problem.state_scale
        x = dc.broadcast(tape.constant(problem.a), (M, problem.n))
        traj.x.append(x)
        y = None
        if problem.m:
            if y0 is not None:
                y = dc.broadcast(tape.constant(np.reshape(y0, (1, problem.m))), (M, problem.m))
            else:
                ynet = nets["y0"]
                x0 = tape.constant(np.reshape(problem.a / scale, (1, problem.n)))
                y = dc.broadcast(ynet(x0, tape, traj.bindings["y0"]), (M, problem.m))
            traj.y.append(y)
        dB_all = brownian.increments
        for i in range(N):
            t, dt = float(grid.nodes[i]), float(grid.dt[i])
            t_frac = t / grid.T
            x_scaled = x if scale == 1.0 else x * (1.0 / scale)
            u = None
            inputs = {}
            if problem.controls:
                outs = []
                for spec in problem.controls:
                    net = nets[spec.role]
                    outs.append(net(_net_input(tape, net, t_frac, x_scaled, M, inputs), tape, traj.bindings[spec.role]))
                u = outs[0] if len(outs) == 1 else dc.concat(outs, axis=1)
                traj.u.append(u)
            z = None
            if problem.m:
                znet = nets["z"]
                z = dc.reshape(znet(_net_input(tape, znet, t_frac, x_scaled, M, inputs), tape, traj.bindings["z"]),
                               (M, problem.m, problem.d))
                traj.z.append(z)
            dB = tape.constant(dB_all[:, i, :])
            drift = problem.b(t, x, y, z, u)
            diffusion = problem.sigma(t, x, y, z, u)
            x_next = x + drift * dt + dc.bmv(diffusion, dB)
            if problem.m:
                l = problem.l(t, x, y, z, u)
                traj.l.append(l)
                y = y - l * dt + dc.bmv(z, dB)
                traj.y.append(y)
                _check_finite(y.value, i + 1)
            x = x_next
            _check_finite(x.value, i + 1)
            traj.x.append(x)
        return traj
    finally:
        for role, net in nets.items():
            net.params.mode = saved_modes[role]


def _check_finite(values, step):
    finite = np.isfinite(values)
    if not finite.all():
        bad = np.argwhere(~finite.reshape(finite.shape[0], -1).all(axis=1))
        raise SimulationBlowupError(int(bad[0, 0]), step)


def leader_cost(traj: TrajectoryBatch, problem, grid: TimeGrid) -> dc.Node:
    """Monte Carlo mean of sum_i f dt_i + h(x_N) + gamma(y_0)."""
    x_last = traj.x[-1]
    tape = x_last.tape
    M = x_last.shape[0]
    total = None
    if problem.f is not None:
        for i in range(grid.N):
            y_i = traj.y[i] if traj.y else None
            z_i = traj.z[i] if traj.z else None
            u_i = traj.u[i] if traj.u else None
            term = problem.f(float(grid.nodes[i]), traj.x[i], y_i, z_i, u_i) * float(grid.dt[i])
            total = term if total is None else total + term
    if problem.h is not None:
        term = problem.h(x_last)
        total = term if total is None else total + term
    if problem.gamma is not None and traj.y:
        term = problem.gamma(traj.y[0])
        total = term if total is None else total + term
    if total is None:
        total = tape.constant(np.zeros(M))
    return dc.mean(total)


def follower_cost(traj: TrajectoryBatch, problem) -> dc.Node:
    """Monte Carlo mean of |y_N - g(x_N)|^2."""
    residual = traj.y[-1] - problem.g(traj.x[-1])
    return dc.mean(dc.sum(dc.square(residual), axis=1))


def integral_y0(traj: TrajectoryBatch, problem, grid: TimeGrid) -> float:
    """Monte Carlo estimate of E[sum_i l_i dt_i + g(x_N)] (first component)."""
    acc = problem.g(traj.x[-1]).value.copy()
    for i, l in enumerate(traj.l):
        acc += l.value * grid.dt[i]
    return float(np.mean(acc[:, 0]))


def trajectories_csv(traj: TrajectoryBatch, grid: TimeGrid, samples=None) -> str:
    """Rows ``sample,step,t,x..,y..,z..,u..``; z and u are blank at the last step."""
    arr = traj.arrays()
    x, y, z, u = arr["x"], arr["y"], arr["z"], arr["u"]
    M, n = x.shape[0], x.shape[2]
    samples = range(M) if samples is None else samples
    cols = ["sample", "step", "t"] + [f"x{j}" for j in range(n)]
    if y is not None:
        cols += [f"y{j}" for j in range(y.shape[2])]
    if z is not None:
        cols += [f"z{a}_{b}" for a in range(z.shape[2]) for b in range(z.shape[3])]
    if u is not None:
        cols += [f"u{j}" for j in range(u.shape[2])]
    lines = [",".join(cols)]
    for s in samples:
        for i in range(grid.N + 1):
            row = [str(s), str(i), repr(float(grid.nodes[i]))]
            row += [repr(float(v)) for v in x[s, i]]
            if y is not None:
                row += [repr(float(v)) for v in y[s, i]]
            for extra in (z, u):
                if extra is None:
                    continue
                width = int(np.prod(extra.shape[2:]))
                row += [repr(float(v)) for v in extra[s, i].ravel()] if i < grid.N else [""] * width
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def shooting_y0(problem, nets: dict, brownian: BrownianBatch, grid: TimeGrid, mode="batch") -> np.ndarray:
    """Per-path y0 that makes y_N = g(x_N) hold exactly, for a scalar y.

    The Euler recursion is affine in y0 whenever the driver is affine in y
    (true for both market drivers), so two forward passes with y0 = 0 and
    y0 = 1 pin it down.  Networks run without gradient and without touching
    running statistics unless ``mode == "train"``.
    """
    if problem.m != 1:
        raise dc.ContractError("shooting_y0 needs a scalar backward component (m == 1)")
    ends = []
    for start in (0.0, 1.0):
        tape = dc.Tape(dtype=brownian.increments.dtype, grad=False)
        traj = simulate(problem, nets, brownian, grid, tape, mode=mode, y0=np.array([start]))
        ends.append(traj.y[-1].value[:, 0])
    target = problem.g(traj.x[-1]).value[:, 0]
    slope = ends[1] - ends[0]
    return (target - ends[0]) / slope
