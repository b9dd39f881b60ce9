"""Command-line experiment runner.

Subcommands::

    fbsde-co run    --problem paper-market-linear --n 10 --T 0.25 --seeds 1,2,3 --out runs/t1
    fbsde-co sweep  --kappa 49,19,9,1,1/9 --n 10 --T 0.5 --out runs/k
    fbsde-co verify

``--config file.json`` supplies any flag (keys use underscores, e.g.
``"m_train"``); flags given on the command line win.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

from . import __version__
from . import diffcore as dc
from .nets import save_checkpoint
from .optim import DivergenceError, OptimizerConfig
from .problems import PRESETS, classical_equivalent, get_preset, paper_market
from .sde import simulate, trajectories_csv
from .trainer import (SWEEP_METRICS, ConfigError, SweepResult, TrainingConfig, aggregate,
                      classical_train, co_train, dedupe_kappas, history_csv, make_test_batch,
                      max_workers, parse_kappa, penalty_train, sweep_csv)

log = logging.getLogger("fbsde_co")

DEFAULTS = {
    "problem": "paper-market-linear", "n": [10], "T": [0.25], "kappa": ["19"], "maxstep": 18000,
    "seeds": [0], "m_train": 64, "m_test": 512, "time_points": 25, "lr_leader": 5e-3,
    "lr_follower": 1e-2, "lr_decay": None, "lr_decay_stages": None, "baseline": "none",
    "penalty_mu": 1.0, "out": "fbsde_co_out", "precision": "f64", "eval_interval": 20,
    "eval_bn": "batch", "dump_paths": 0, "checkpoints": False,
}


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    problem: str = "paper-market-linear"
    n: list = field(default_factory=lambda: [10])
    T: list = field(default_factory=lambda: [0.25])
    kappa: list = field(default_factory=lambda: ["19"])
    maxstep: int = 18000
    seeds: list = field(default_factory=lambda: [0])
    m_train: int = 64
    m_test: int = 512
    time_points: int = 25
    lr_leader: float = 5e-3
    lr_follower: float = 1e-2
    lr_decay: float | None = None
    lr_decay_stages: int | None = None
    baseline: str = "none"
    penalty_mu: float = 1.0
    out: str = "fbsde_co_out"
    precision: str = "f64"
    eval_interval: int = 20
    eval_bn: str = "batch"
    dump_paths: int = 0
    checkpoints: bool = False

    def validate(self):
        if self.problem not in PRESETS:
            raise UsageError(f"--problem: unknown preset {self.problem!r}; choose from {sorted(PRESETS)}")
        if self.baseline not in ("none", "classical", "penalty"):
            raise UsageError("--baseline must be none, classical or penalty")
        if self.baseline == "classical" and self.problem != "paper-market-linear":
            raise UsageError("--baseline classical needs --problem paper-market-linear")
        if not self.seeds:
            raise UsageError("--seeds: need at least one seed")
        if any(n < 1 for n in self.n):
            raise UsageError("--n must be >= 1")
        if any(not t > 0 for t in self.T):
            raise UsageError("--T must be > 0")
        try:
            dedupe_kappas(self.kappa)
        except ConfigError as exc:
            raise UsageError(f"--kappa: {exc}") from None
        for n in self.n:
            for T in self.T:
                for k in self.kappa:
                    try:
                        self.training_config(k, self.seeds[0])
                    except (ConfigError, ValueError) as exc:
                        raise UsageError(f"invalid training settings (n={n}, T={T}, kappa={k}): {exc}") from None
        return self

    def training_config(self, kappa, seed) -> TrainingConfig:
        config = TrainingConfig(
            kappa=parse_kappa(kappa), maxstep=self.maxstep, m_train=self.m_train, m_test=self.m_test,
            time_points=self.time_points, leader_opt=OptimizerConfig(lr=self.lr_leader),
            follower_opt=OptimizerConfig(lr=self.lr_follower), penalty_opt=OptimizerConfig(lr=self.lr_leader),
            seed=int(seed), eval_interval=self.eval_interval, precision=self.precision, eval_bn=self.eval_bn)
        if config.maxstep % config.cycle_length:
            raise ConfigError(f"maxstep={self.maxstep} is not a multiple of the cycle length "
                              f"{config.cycle_length} for kappa={kappa}")
        return config.with_decay(self.lr_decay, self.lr_decay_stages)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)


# ---------------------------------------------------------------- parsing

def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _kappas(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _listify(key, value):
    if key in ("n", "seeds"):
        return [int(v) for v in value] if isinstance(value, list) else _ints(value)
    if key == "T":
        return [float(v) for v in value] if isinstance(value, list) else _floats(value)
    if key == "kappa":
        return [str(v) for v in value] if isinstance(value, list) else _kappas(value)
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="fbsde-co", description="Cross-optimization FBSDE control experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default values for any flag")
        p.add_argument("--problem", help=f"preset, one of {sorted(PRESETS)}")
        p.add_argument("--n", help="dimension(s), comma separated")
        p.add_argument("--T", help="horizon(s), comma separated")
        p.add_argument("--kappa", help="kappa value(s) such as 19 or 1/9, comma separated")
        p.add_argument("--maxstep", type=int)
        p.add_argument("--seeds", help="comma separated seeds")
        p.add_argument("--m-train", dest="m_train", type=int)
        p.add_argument("--m-test", dest="m_test", type=int)
        p.add_argument("--time-points", dest="time_points", type=int)
        p.add_argument("--lr-leader", dest="lr_leader", type=float)
        p.add_argument("--lr-follower", dest="lr_follower", type=float)
        p.add_argument("--lr-decay", dest="lr_decay", type=float, help="step decay factor")
        p.add_argument("--lr-decay-stages", dest="lr_decay_stages", type=int,
                       help="number of constant-rate stages per optimizer")
        p.add_argument("--baseline", choices=("none", "classical", "penalty"))
        p.add_argument("--penalty-mu", dest="penalty_mu", type=float)
        p.add_argument("--out")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--eval-interval", dest="eval_interval", type=int)
        p.add_argument("--eval-bn", dest="eval_bn", choices=("batch", "eval"))
        p.add_argument("--dump-paths", dest="dump_paths", type=int, help="test paths to write per run")
        p.add_argument("--checkpoints", action="store_true", default=None, help="save final networks")

    common(sub.add_parser("run", help="train every (n, T, seed) combination and write a report"))
    common(sub.add_parser("sweep", help="train every kappa for every seed and write the kappa table"))
    verify = sub.add_parser("verify", help="run the fast property checks")
    verify.add_argument("--precision", choices=("f32", "f64"), default="f64")
    verify.add_argument("--checkpoint", help="also load-check this checkpoint file")
    return parser


def resolve_config(args) -> ExperimentConfig:
    values = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config: cannot read {args.config}: {exc}") from None
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"--config: unknown keys {sorted(unknown)}")
        values.update(loaded)
    for key in DEFAULTS:
        given = getattr(args, key, None)
        if given is not None:
            values[key] = given
    try:
        for key in ("n", "T", "kappa", "seeds"):
            values[key] = _listify(key, values[key])
    except ValueError as exc:
        raise UsageError(f"malformed list value: {exc}") from None
    return ExperimentConfig(**values).validate()


# ---------------------------------------------------------------- running

def _run_one(exp: ExperimentConfig, n, T, kappa, seed, method):
    config = exp.training_config(kappa, seed)
    if method == "classical":
        params = paper_market(n, T, "linear")
        nets, history = classical_train(params, config)
        problem = classical_equivalent(params, config.time_points)
    else:
        problem = get_preset(exp.problem, n, T)
        if method == "penalty":
            nets, history = penalty_train(problem, config, exp.penalty_mu)
        else:
            nets, history = co_train(problem, config)
    paths = None
    if exp.dump_paths:
        grid, batch = make_test_batch(problem, config)
        tape = dc.Tape(dtype=config.dtype, grad=False)
        traj = simulate(problem, nets, batch, grid, tape, mode=config.eval_bn)
        paths = trajectories_csv(traj, grid, range(min(exp.dump_paths, batch.M)))
    return history, nets, paths


def _job(exp, key):
    n, T, kappa, seed, method = key
    start = time.perf_counter()
    try:
        history, nets, paths = _run_one(exp, n, T, kappa, seed, method)
    except (DivergenceError, FloatingPointError) as exc:
        return key, None, None, None, f"{exc}"
    log.info("%s n=%s T=%s kappa=%s seed=%s done in %.1fs", method, n, T, kappa, seed, time.perf_counter() - start)
    return key, history, nets, paths, None


def _execute(exp: ExperimentConfig, keys):
    workers = min(max_workers(), len(keys))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(partial(_job, exp), keys))
    return [_job(exp, key) for key in keys]


def _tag(n, T, kappa, seed, method):
    return f"{method}_n{n}_T{T}_k{str(kappa).replace('/', 'over')}_s{seed}"


def _write_runs(out: Path, results, exp):
    files = {}
    for key, history, nets, paths, error in results:
        tag = _tag(*key)
        if error is not None:
            continue
        path = out / "histories" / f"{tag}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(history_csv(history), encoding="utf-8")
        files[tag] = path
        if paths is not None:
            (out / "paths").mkdir(exist_ok=True)
            (out / "paths" / f"{tag}.csv").write_text(paths, encoding="utf-8")
        if exp.checkpoints:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(out / "checkpoints" / f"{tag}.ckpt", nets)
    return files


def _fmt(value):
    return "" if value is None else repr(float(value))


def table_csv(cells: dict, ns, Ts) -> str:
    """Table layout: one row per (n, statistic), one column per T."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "stat"] + [f"T={T}" for T in Ts])
    stats = []
    for label in ("clas", "inte", "para", "distance"):
        if any(label in cells.get((n, T), {}) for n in ns for T in Ts):
            stats += [(label, "mean"), (label, "var")]
    for n in ns:
        for label, part in stats:
            row = [n, f"{label}_{part}"]
            for T in Ts:
                agg = cells.get((n, T), {}).get(label)
                row.append("" if agg is None else _fmt(agg[part]))
            writer.writerow(row)
    return buf.getvalue()


def _digest(paths):
    h = hashlib.sha256()
    for path in sorted(paths, key=str):
        h.update(Path(path).name.encode())
        h.update(b"\0")
        h.update(Path(path).read_bytes())
    return h.hexdigest()


def _manifest(out: Path, exp: ExperimentConfig, command, files, failures, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": json.loads(exp.to_json()),
        "outputs": {tag: str(p.relative_to(out)) for tag, p in sorted(files.items())},
        "failures": failures,
        "inputs_sha256": hashlib.sha256(exp.to_json().encode()).hexdigest(),
        "outputs_sha256": _digest(files.values()),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def cmd_run(exp: ExperimentConfig) -> int:
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(exp.to_json() + "\n", encoding="utf-8")
    kappa = exp.kappa[0]
    methods = ["co"] + ([exp.baseline] if exp.baseline != "none" else [])
    keys = [(n, T, kappa, seed, method) for n in exp.n for T in exp.T for seed in exp.seeds for method in methods]
    results = _execute(exp, keys)
    files = _write_runs(out, results, exp)
    failures = {_tag(*key): error for key, _, _, _, error in results if error is not None}
    cells = {}
    for (n, T, _, _, method), history, _, _, error in results:
        if error is not None:
            continue
        last = history[-1]
        bucket = cells.setdefault((n, T), {})
        if method == "classical":
            bucket.setdefault("clas", []).append(last.inte_y0)
        elif method == "co":
            bucket.setdefault("inte", []).append(last.inte_y0)
            bucket.setdefault("para", []).append(last.para_y0)
            bucket.setdefault("distance", []).append(last.distance)
        else:
            bucket.setdefault("penalty_inte", []).append(last.inte_y0)
    cells = {cell: {label: aggregate(vals) for label, vals in metrics.items()} for cell, metrics in cells.items()}
    table = out / "table.csv"
    table.write_text(table_csv(cells, exp.n, exp.T), encoding="utf-8")
    files["table"] = table
    _manifest(out, exp, "run", files, failures)
    for tag, error in failures.items():
        print(f"error: run {tag} diverged: {error}", file=sys.stderr)
    print(table.read_text(encoding="utf-8"), end="")
    return 1 if failures else 0


def cmd_sweep(exp: ExperimentConfig) -> int:
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(exp.to_json() + "\n", encoding="utf-8")
    files, failures = {}, {}
    for n in exp.n:
        for T in exp.T:
            kappas = [str(k) for k in dedupe_kappas(exp.kappa)]
            keys = [(n, T, k, seed, "co") for k in kappas for seed in exp.seeds]
            results = _execute(exp, keys)
            files.update(_write_runs(out, results, exp))
            failed = {_tag(*key): error for key, _, _, _, error in results if error is not None}
            failures.update(failed)
            if failed:
                continue
            result = SweepResult()
            for k in kappas:
                finals = [h[-1] for (key, h, _, _, _) in results if key[2] == k]
                result.table[k] = {m: aggregate([getattr(f, m) for f in finals]) for m in SWEEP_METRICS}
            path = out / f"sweep_n{n}_T{T}.csv"
            path.write_text(sweep_csv(result), encoding="utf-8")
            files[path.stem] = path
            print(f"# n={n} T={T}")
            print(path.read_text(encoding="utf-8"), end="")
    _manifest(out, exp, "sweep", files, failures)
    for tag, error in failures.items():
        print(f"error: run {tag} diverged: {error}", file=sys.stderr)
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        from .verify import run_checks
        return run_checks(precision=args.precision, checkpoint=args.checkpoint)
    try:
        exp = resolve_config(args)
    except UsageError as exc:
        parser.exit(2, f"fbsde-co {args.command}: error: {exc}\n")
    if args.command == "run":
        return cmd_run(exp)
    return cmd_sweep(exp)
