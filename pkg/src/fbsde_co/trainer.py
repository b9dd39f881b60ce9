"""Cross-optimization training, the penalty and classical baselines, evaluation
and the kappa sweep."""
from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import diffcore as dc
from . import optim
from .nets import MLPConfig, Network, init_params
from .optim import DivergenceError, OptimizerConfig, OptimizerState
from .problems import MarketParams, classical_equivalent
from .sde import (TimeGrid, brownian_rng, follower_cost, integral_y0, leader_cost,
                  sample_brownian, simulate)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "J_leader", "J_follower", "inte_y0", "para_y0", "distance", "wall_s")
SWEEP_METRICS = ("inte_y0", "para_y0", "distance")


class ConfigError(ValueError):
    pass


def parse_kappa(value) -> Fraction:
    try:
        kappa = Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"kappa must be a positive rational, got {value!r}") from None
    if kappa <= 0:
        raise ConfigError(f"kappa must be a positive rational, got {value!r}")
    return kappa


@dataclass(frozen=True)
class TrainingConfig:
    kappa: Fraction = Fraction(19)
    maxstep: int = 18000
    m_train: int = 64
    m_test: int = 512
    time_points: int = 25
    leader_opt: OptimizerConfig = OptimizerConfig(lr=5e-3)
    follower_opt: OptimizerConfig = OptimizerConfig(lr=1e-2)
    penalty_opt: OptimizerConfig = OptimizerConfig(lr=5e-3)
    seed: int = 0
    eval_interval: int = 20
    precision: str = "f64"
    leader_first: bool = True
    batchnorm: bool = True
    # normalization used when evaluating: "batch" (test-batch statistics) or "eval" (running)
    eval_bn: str = "batch"

    def __post_init__(self):
        object.__setattr__(self, "kappa", parse_kappa(self.kappa))
        if self.maxstep < 0 or self.m_train < 1 or self.m_test < 1 or self.time_points < 1:
            raise ConfigError("maxstep >= 0, m_train >= 1, m_test >= 1 and time_points >= 1 required")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.eval_bn not in ("batch", "eval"):
            raise ConfigError("eval_bn must be 'batch' or 'eval'")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def cycle_length(self):
        return self.kappa.numerator + self.kappa.denominator

    @property
    def update_counts(self):
        """(leader updates, follower updates) over the whole run."""
        leader = self.maxstep // self.cycle_length * self.kappa.denominator
        return leader, self.maxstep - leader

    def with_decay(self, factor, stages):
        """Step decay: each optimizer's rate is multiplied by ``factor`` ``stages - 1``
        times, at evenly spaced points of its own update count."""
        if factor is None or stages is None or stages <= 1:
            return self
        n_leader, n_follower = self.update_counts

        def decayed(opt, n):
            return replace(opt, decay_factor=float(factor), decay_interval=max(1, -(-n // stages)))

        return replace(self, leader_opt=decayed(self.leader_opt, n_leader),
                       follower_opt=decayed(self.follower_opt, n_follower),
                       penalty_opt=decayed(self.penalty_opt, self.maxstep))


@dataclass
class TrainingRecord:
    iteration: int
    J_leader: float
    J_follower: float
    inte_y0: float
    para_y0: float
    distance: float
    wall_s: float = 0.0


def update_schedule(kappa, maxstep: int, leader_first=True) -> str:
    """One character per iteration: ``L`` (leader update) or ``F`` (follower).

    For kappa = p/q a cycle is q leader updates and p follower updates, so an
    integer kappa puts the leader on every iteration with l mod (kappa+1) == 0.
    """
    kappa = parse_kappa(kappa)
    p, q = kappa.numerator, kappa.denominator
    if maxstep % (p + q):
        raise ConfigError(f"maxstep={maxstep} is not a multiple of the cycle length {p + q} for kappa={kappa}")
    cycle = "L" * q + "F" * p if leader_first else "F" * p + "L" * q
    return cycle * (maxstep // (p + q))


def build_networks(problem, seed=0, dtype=np.float64, batchnorm=True) -> dict:
    """Fresh network bundle for ``problem`` (leader roles, then y0 and z)."""
    nets = {}
    widths = problem.hidden_widths
    ss = np.random.SeedSequence(int(seed))
    role_seeds = iter(int(s.generate_state(1)[0]) for s in ss.spawn(len(problem.controls) + 2))
    for spec in problem.controls:
        cfg = MLPConfig(problem.n + 1, widths, spec.dim, output_map=spec.output_map, batchnorm=batchnorm)
        nets[spec.role] = Network(cfg, init_params(cfg, next(role_seeds), dtype))
    if problem.m:
        # the y0 input is the constant initial state: batch statistics would be degenerate
        cfg = MLPConfig(problem.n, widths, problem.m, batchnorm=False, time_input=False)
        nets["y0"] = Network(cfg, init_params(cfg, next(role_seeds), dtype))
        cfg = MLPConfig(problem.n + 1, widths, problem.m * problem.d, batchnorm=batchnorm)
        nets["z"] = Network(cfg, init_params(cfg, next(role_seeds), dtype))
    return nets


def make_test_batch(problem, config: TrainingConfig):
    grid = TimeGrid(problem.T, config.time_points)
    return grid, sample_brownian(config.m_test, grid, problem.d, config.seed, "test", dtype=config.dtype)


def evaluate(nets: dict, problem, brownian, grid: TimeGrid, iteration=0, wall_s=0.0,
             bn_mode="batch") -> TrainingRecord:
    """Metrics on a fixed Brownian batch, without touching any parameter.

    ``bn_mode="batch"`` normalizes each time step with the test batch's own
    statistics, the same per-step normalization the networks are trained
    with; ``"eval"`` uses the running statistics instead.
    """
    dtype = next(iter(next(iter(nets.values())).params.trainable.values())).dtype
    tape = dc.Tape(dtype=dtype, grad=False)
    traj = simulate(problem, nets, brownian, grid, tape, mode=bn_mode)
    j_leader = float(leader_cost(traj, problem, grid).value)
    if problem.m:
        j_follower = float(follower_cost(traj, problem).value)
        inte = integral_y0(traj, problem, grid)
        para = float(traj.y[0].value[0, 0])
        dist = abs(inte - para)
    else:
        j_follower = para = dist = float("nan")
        inte = problem.objective_sign * j_leader
    return TrainingRecord(iteration, j_leader, j_follower, inte, para, dist, wall_s)


def _gather(nets, roles, grads, traj):
    params, flat_grads = {}, {}
    for role in roles:
        for name, node in traj.bindings[role].items():
            key = f"{role}/{name}"
            params[key] = nets[role].params.trainable[name]
            flat_grads[key] = grads[node.id]
    return params, flat_grads


def _scatter(nets, new_params):
    for key, value in new_params.items():
        role, name = key.split("/", 1)
        nets[role].params.trainable[name] = value


def _train_loop(problem, config: TrainingConfig, nets, schedule, objective, opts, callback=None,
                label="co"):
    """Shared iteration loop.  ``schedule`` maps iteration -> group key of ``opts``.

    ``opts[key]`` is ``(roles, OptimizerConfig)``; ``objective(key, traj, grid)``
    returns the scalar node to differentiate.
    """
    dtype = config.dtype
    grid, test_bm = make_test_batch(problem, config)
    rng = brownian_rng(config.seed, "train")
    states = {key: OptimizerState() for key in opts}
    history = []
    start = time.perf_counter()

    def record(iteration):
        rec = evaluate(nets, problem, test_bm, grid, iteration, time.perf_counter() - start,
                       config.eval_bn)
        if not np.isfinite(rec.J_leader) or (problem.m and not np.isfinite(rec.J_follower)):
            raise DivergenceError(f"non-finite cost at iteration {iteration}")
        history.append(rec)
        return rec

    record(0)
    for it in range(config.maxstep):
        key = schedule[it]
        roles, opt_cfg = opts[key]
        bm = sample_brownian(config.m_train, grid, problem.d, rng=rng, dtype=dtype)
        tape = dc.Tape(dtype=dtype)
        traj = simulate(problem, nets, bm, grid, tape, mode="train", trainable=roles)
        root = objective(key, traj, grid)
        if not np.isfinite(root.value):
            raise DivergenceError(f"non-finite {label} cost at iteration {it}")
        grads = dc.backward(tape, root)
        params, flat_grads = _gather(nets, roles, grads, traj)
        try:
            new_params, states[key] = optim.step(params, flat_grads, states[key], opt_cfg)
        except DivergenceError as exc:
            raise DivergenceError(f"iteration {it}: {exc}") from None
        _scatter(nets, new_params)
        if callback is not None:
            callback(it, key, nets)
        if (it + 1) % config.eval_interval == 0 or it + 1 == config.maxstep:
            rec = record(it + 1)
            log.debug("%s it=%d J_L=%.6g J_F=%.6g inte=%.6g para=%.6g", label, it + 1,
                      rec.J_leader, rec.J_follower, rec.inte_y0, rec.para_y0)
    return history


def co_train(problem, config: TrainingConfig, nets=None, callback=None):
    """Cross-optimization: alternate leader and follower updates per the kappa schedule.

    Returns ``(networks, history)``.  ``callback(iteration, kind, nets)`` is
    called after each update with ``kind`` in ``{"L", "F"}``.
    """
    schedule = update_schedule(config.kappa, config.maxstep, config.leader_first)
    if nets is None:
        nets = build_networks(problem, config.seed, config.dtype, config.batchnorm)
    opts = {"L": (problem.leader_roles, config.leader_opt),
            "F": (problem.follower_roles, config.follower_opt)}
    if not problem.leader_roles:
        schedule = schedule.replace("L", "F") if problem.m else schedule
    if not problem.follower_roles:
        schedule = schedule.replace("F", "L")

    def objective(key, traj, grid):
        return leader_cost(traj, problem, grid) if key == "L" else follower_cost(traj, problem)

    history = _train_loop(problem, config, nets, schedule, objective, opts, callback, "co")
    return nets, history


def penalty_train(problem, config: TrainingConfig, mu: float, nets=None, callback=None):
    """Minimize J_leader + mu * J_follower jointly with one optimizer."""
    if mu < 0:
        raise ConfigError("penalty parameter must be nonnegative")
    if nets is None:
        nets = build_networks(problem, config.seed, config.dtype, config.batchnorm)
    roles = problem.leader_roles + problem.follower_roles
    opts = {"P": (roles, config.penalty_opt)}

    def objective(key, traj, grid):
        cost = leader_cost(traj, problem, grid)
        if problem.m and mu:
            cost = cost + follower_cost(traj, problem) * float(mu)
        return cost

    history = _train_loop(problem, config, nets, "P" * config.maxstep, objective, opts, callback, "penalty")
    return nets, history


def classical_train(params: MarketParams, config: TrainingConfig, discount="euler", nets=None, callback=None):
    """Train (pi, c) directly on the discounted classical objective (linear driver only)."""
    problem = classical_equivalent(params, config.time_points, discount)
    if nets is None:
        nets = build_networks(problem, config.seed, config.dtype, config.batchnorm)
    opts = {"L": (problem.leader_roles, config.leader_opt)}

    def objective(key, traj, grid):
        return leader_cost(traj, problem, grid)

    history = _train_loop(problem, config, nets, "L" * config.maxstep, objective, opts, callback, "classical")
    return nets, history


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepResult:
    # kappa string -> metric -> {"mean", "var", "runs", "values"}
    table: dict = field(default_factory=dict)

    def rows(self):
        for kappa, metrics in self.table.items():
            for metric in SWEEP_METRICS:
                agg = metrics[metric]
                yield kappa, metric, agg["mean"], agg["var"], agg["runs"]


def aggregate(values):
    values = [float(v) for v in values]
    var = float(np.var(values, ddof=1)) if len(values) >= 2 else None
    return {"mean": float(np.mean(values)), "var": var, "runs": len(values), "values": values}


def _sweep_job(args):
    problem_factory, config = args
    _, history = co_train(problem_factory(), config)
    final = history[-1]
    return final.inte_y0, final.para_y0, final.distance


def kappa_sweep(problem_factory, base_config: TrainingConfig, kappas, runs=3, n_jobs=None,
                decay=None) -> SweepResult:
    """Train ``runs`` seeds per kappa and aggregate the terminal metrics.

    ``problem_factory`` is a zero-argument picklable callable returning the
    problem (problem instances hold closures and cannot cross processes).
    Seeds are ``base_config.seed + r`` for ``r in range(runs)``.  ``decay``
    is an optional ``(factor, stages)`` pair applied per kappa, since the
    decay points depend on each optimizer's own update count.
    """
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    kappas = dedupe_kappas(kappas)
    factor, stages = decay if decay is not None else (None, None)
    jobs = [(problem_factory, replace(base_config, kappa=k, seed=base_config.seed + r).with_decay(factor, stages))
            for k in kappas for r in range(runs)]
    n_jobs = n_jobs or max_workers()
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(job) for job in jobs]
    out = SweepResult()
    for i, k in enumerate(kappas):
        chunk = results[i * runs:(i + 1) * runs]
        out.table[str(k)] = {metric: aggregate([r[j] for r in chunk]) for j, metric in enumerate(SWEEP_METRICS)}
    return out


def dedupe_kappas(kappas):
    seen, out = set(), []
    for k in kappas:
        k = parse_kappa(k)
        if k not in seen:
            seen.add(k)
            out.append(k)
    if not out:
        raise ConfigError("empty kappa list")
    return out


def max_workers():
    try:
        return max(1, int(os.environ.get("FBSDE_CO_THREADS", "0")) or (os.cpu_count() or 1))
    except ValueError:
        return 1


# ---------------------------------------------------------------- CSV

def _fmt(value):
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def history_csv(history, timing=True) -> str:
    """CSV text of a history; ``timing=False`` blanks ``wall_s`` for byte comparisons."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for rec in history:
        row = asdict(rec)
        if not timing:
            row["wall_s"] = None
        writer.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])
    return buf.getvalue()


def read_history_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [TrainingRecord(int(r["iteration"]), *(float(r[c]) if r[c] != "" else float("nan")
                                                  for c in HISTORY_COLUMNS[1:])) for r in rows]


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("kappa", "metric", "mean", "var", "runs"))
    for kappa, metric, mean, var, runs in result.rows():
        writer.writerow((kappa, metric, _fmt(mean), _fmt(var), runs))
    return buf.getvalue()
