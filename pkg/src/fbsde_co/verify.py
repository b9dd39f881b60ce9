"""Fast self-checks behind ``fbsde-co verify``.

Every check returns ``(status, detail)`` with status PASS, FAIL or SKIP;
exceptions inside a check are reported as FAIL rather than raised.
"""
from __future__ import annotations

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .nets import CheckpointFormatError, MLPConfig, Network, init_params, load_checkpoint, save_checkpoint
from .problems import MarketParams, analytic_followonly_problem, classical_equivalent, get_preset, recursive_utility
from .sde import TimeGrid, follower_cost, leader_cost, sample_brownian, shooting_y0, simulate
from .trainer import TrainingConfig, build_networks, co_train, history_csv, update_schedule


def tiny_market(n_assets=2, T=0.25, case="linear"):
    """Small market instance for gradient checks: width-4 hidden layers."""
    problem = recursive_utility(MarketParams(n=n_assets, T=T, nu=10.0 if case == "nonlinear" else 0.0), case)
    return replace(problem, hidden_widths=(4, 4, 4))


def objective_gradient_errors(problem, nets, brownian, grid, which="leader", step=1e-6):
    """Relative error ||analytic - central difference|| / max(norms) per parameter tensor.

    Both objectives are differentiated with respect to every network
    parameter.  Networks must not use batch normalization (train-mode
    statistics would make the objective depend on running-stat updates).
    """
    def cost(tape):
        traj = simulate(problem, nets, brownian, grid, tape, mode="eval")
        return (leader_cost(traj, problem, grid) if which == "leader" else follower_cost(traj, problem)), traj

    tape = dc.Tape()
    root, traj = cost(tape)
    grads = dc.backward(tape, root)
    analytic = {f"{role}/{name}": grads[node.id]
                for role, nodes in traj.bindings.items() for name, node in nodes.items()}
    errors = {}
    for key, a in analytic.items():
        role, name = key.split("/", 1)
        arr = nets[role].params.trainable[name]
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            vals = []
            for sign in (1.0, -1.0):
                arr[idx] = orig + sign * step
                vals.append(float(cost(dc.Tape(grad=False))[0].value))
            arr[idx] = orig
            numeric[idx] = (vals[0] - vals[1]) / (2 * step)
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        errors[key] = 0.0 if scale < 1e-14 else float(np.linalg.norm(a - numeric) / scale)
    return errors


def check_gradients(precision="f64"):
    if precision != "f64":
        return "SKIP", "gradient checks need 64-bit mode"
    worst = 0.0
    for case in ("linear", "nonlinear"):
        problem = tiny_market(case=case)
        grid = TimeGrid(problem.T, 4)
        nets = build_networks(problem, seed=3, batchnorm=False)
        bm = sample_brownian(2, grid, problem.d, seed=5)
        for which in ("leader", "follower"):
            worst = max(worst, max(objective_gradient_errors(problem, nets, bm, grid, which).values()))
    status = "PASS" if worst < 1e-4 else "FAIL"
    return status, f"max relative error {worst:.2e} (n=2, N=4, M=2, width 4)"


def check_recursion_oracle(precision="f64"):
    """Forced z = 0, y0 = 1, l = -beta y: y_T must equal (1 + beta dt)^N."""
    beta, T, N = 0.05, 1.0, 25
    problem, _ = analytic_followonly_problem(n=2, T=T, beta=beta)
    grid = TimeGrid(T, N)
    nets = build_networks(problem, seed=0)
    for key in nets["z"].params.trainable:
        nets["z"].params.trainable[key] = np.zeros_like(nets["z"].params.trainable[key])
    bm = sample_brownian(8, grid, problem.d, seed=0)
    traj = simulate(problem, nets, bm, grid, dc.Tape(grad=False), mode="batch", y0=np.array([1.0]))
    expected = 1.0
    for _ in range(N):
        expected = expected + beta * expected * (T / N)
    got = traj.y[-1].value
    err = float(np.max(np.abs(got - expected)))
    return ("PASS" if err < 1e-12 else "FAIL"), f"y_T={got[0, 0]:.9f} vs {expected:.9f}"


def check_followonly_training(precision="f64", maxstep=600):
    problem, solution = analytic_followonly_problem(n=2, T=1.0)
    config = TrainingConfig(maxstep=maxstep, eval_interval=maxstep, precision=precision, seed=1)
    _, history = co_train(problem, config)
    first, last = history[0], history[-1]
    ok = last.J_follower < first.J_follower and abs(last.para_y0 - solution.y0) < 0.1
    return ("PASS" if ok else "FAIL"), (f"follower cost {first.J_follower:.3g} -> {last.J_follower:.3g}, "
                                        f"y0 {last.para_y0:.4f} (exact {solution.y0})")


def isolation_violations(problem, config, nets=None):
    """Iterations at which an update touched the group it should have left alone."""
    nets = nets if nets is not None else build_networks(problem, config.seed, config.dtype)
    prev = {}

    def snapshot(nets_):
        return {(r, k): v.copy() for r, net in nets_.items() for k, v in net.params.trainable.items()}

    prev.update(snapshot(nets))
    violations = []

    def callback(it, kind, nets_):
        frozen = problem.follower_roles if kind == "L" else problem.leader_roles
        now = snapshot(nets_)
        if any(not np.array_equal(prev[key], now[key]) for key in now if key[0] in frozen):
            violations.append(it)
        prev.clear()
        prev.update(now)

    co_train(problem, config, nets=nets, callback=callback)
    return violations


def check_schedule(precision="f64"):
    sched = update_schedule(19, 18000)
    counts = (sched.count("L"), sched.count("F"))
    if counts != (900, 17100):
        return "FAIL", f"kappa=19 gave {counts}"
    config = TrainingConfig(kappa=3, maxstep=40, m_train=8, m_test=16, time_points=4,
                            eval_interval=40, precision=precision)
    violations = isolation_violations(tiny_market(), config)
    if violations:
        return "FAIL", f"frozen parameters changed at iterations {violations[:5]}"
    return "PASS", "900 L / 17100 F at kappa=19; isolation held on a 40-iteration run"


def check_simplex(precision="f64", samples=100_000):
    problem = get_preset("paper-market-linear", 10, 0.25)
    nets = build_networks(problem, seed=0)
    rng = np.random.default_rng(0)
    x = np.hstack([rng.uniform(0, 1, (samples, 1)), rng.normal(1.0, 2.0, (samples, 1))])
    worst_sum, worst_neg = 0.0, 0.0
    for mode in ("eval", "batch"):
        pi = _predict(nets["pi"], x, mode)
        c = _predict(nets["c"], x, mode)
        worst_sum = max(worst_sum, float(np.max(np.abs(pi.sum(axis=1) - 1.0))))
        worst_neg = min(worst_neg, float(pi.min()), float(c.min()))
    ok = worst_sum <= 1e-12 and worst_neg >= 0.0
    return ("PASS" if ok else "FAIL"), f"max |sum pi - 1| = {worst_sum:.1e}, min output = {worst_neg:.1e}"


def _predict(net, x, mode):
    saved = net.params.mode
    net.params.mode = mode
    try:
        tape = dc.Tape(grad=False)
        return net(tape.constant(x), tape).value
    finally:
        net.params.mode = saved


def check_determinism(precision="f64"):
    if precision != "f64":
        return "SKIP", "bit-identical histories are only promised in 64-bit mode"
    problem = tiny_market()
    config = TrainingConfig(kappa=4, maxstep=50, m_train=16, m_test=32, time_points=5, eval_interval=10)
    texts = [history_csv(co_train(problem, config)[1], timing=False) for _ in range(2)]
    return ("PASS" if texts[0] == texts[1] else "FAIL"), "two identical runs compared byte for byte"


def frozen_market_controls(problem, seed=0, consumption=0.3):
    """Networks without batch normalization: consumption near ``consumption``, z identically 0."""
    nets = build_networks(problem, seed=seed, batchnorm=False)
    for key, value in nets["z"].params.trainable.items():
        nets["z"].params.trainable[key] = np.zeros_like(value)
    last = nets["c"].config.depth - 1
    nets["c"].params.trainable[f"w{last}"] *= 1e-3
    nets["c"].params.trainable[f"b{last}"][:] = consumption
    return nets


def check_discrete_equivalence(precision="f64"):
    """sigma = 0, one step: classical objective equals the shooting y0."""
    params = MarketParams(n=3, sigma=0.0, T=0.5, x0=1.0)
    grid = TimeGrid(params.T, 1)
    problem = recursive_utility(params, "linear")
    classical = classical_equivalent(params, time_points=1)
    nets = frozen_market_controls(problem, seed=7)
    bm = sample_brownian(4, grid, problem.d, seed=7)
    y0 = float(np.mean(shooting_y0(problem, nets, bm, grid)))
    leader_nets = {role: nets[role] for role in classical.leader_roles}
    traj = simulate(classical, leader_nets, bm, grid, dc.Tape(grad=False), mode="batch")
    clas = -float(leader_cost(traj, classical, grid).value)
    rel = abs(clas - y0) / max(abs(clas), abs(y0))
    return ("PASS" if rel < 1e-10 else "FAIL"), f"classical {clas:.12g} vs recursive {y0:.12g} (rel {rel:.1e})"


def check_checkpoint(precision="f64", path=None):
    if path is not None:
        try:
            load_checkpoint(path)
        except CheckpointFormatError as exc:
            return "FAIL", f"format error: {exc}"
        except OSError as exc:
            return "FAIL", f"cannot read checkpoint: {exc}"
        return "PASS", f"{path} loads cleanly"
    cfg = MLPConfig(3, (5, 5), 2)
    bundle = {"pi": Network(cfg, init_params(cfg, 0))}
    with tempfile.TemporaryDirectory() as tmp:
        file = Path(tmp) / "net.ckpt"
        save_checkpoint(file, bundle)
        loaded = load_checkpoint(file)
        same = all(np.array_equal(loaded["pi"].params.trainable[k], v)
                   for k, v in bundle["pi"].params.trainable.items())
        file.write_bytes(file.read_bytes()[:-9])
        try:
            load_checkpoint(file)
            caught = False
        except CheckpointFormatError:
            caught = True
    ok = same and caught
    return ("PASS" if ok else "FAIL"), "round trip exact, truncation rejected"


CHECKS = (
    ("gradient-check", check_gradients),
    ("recursion-oracle", check_recursion_oracle),
    ("follower-only-training", check_followonly_training),
    ("schedule-and-isolation", check_schedule),
    ("simplex-and-nonneg", check_simplex),
    ("determinism", check_determinism),
    ("discrete-equivalence", check_discrete_equivalence),
)


def run_checks(precision="f64", checkpoint=None, out=print) -> int:
    failed = 0
    checks = list(CHECKS) + [("checkpoint", lambda precision: check_checkpoint(precision, checkpoint))]
    for name, fn in checks:
        try:
            status, detail = fn(precision)
        except Exception as exc:  # reported, not raised
            status, detail = "FAIL", f"{type(exc).__name__}: {exc}"
        failed += status == "FAIL"
        out(f"{status} {name}: {detail}")
    return 1 if failed else 0
