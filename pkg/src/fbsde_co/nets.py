"""Feed-forward control networks with batch normalization.

Every hidden layer is ``affine -> batchnorm -> activation``; the output
layer is affine followed by the output map (identity, softmax or a
nonnegative clamp).  One network is shared across all time points.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError

OUTPUT_MAPS = ("identity", "softmax", "nonneg")
CHECKPOINT_MAGIC = "FBSDECO-CKPT 1"
MODES = ("train", "eval", "batch")
BATCH_STAT_MODES = ("train", "batch")


class CheckpointFormatError(ValueError):
    """A checkpoint file is truncated, corrupted or inconsistent."""


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden_widths: tuple = (11, 11, 11)
    output_dim: int = 1
    activation: str = "relu"
    output_map: str = "identity"
    batchnorm: tuple = True
    time_input: bool = True
    momentum: float = 0.99
    eps: float = 1e-6

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        bn = self.batchnorm
        if isinstance(bn, (bool, np.bool_)):
            bn = (bool(bn),) * len(widths)
        bn = tuple(bool(b) for b in bn)
        object.__setattr__(self, "batchnorm", bn)
        if len(bn) != len(widths):
            raise ValueError("batchnorm needs one flag per hidden layer")
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if self.output_map not in OUTPUT_MAPS:
            raise ValueError(f"output_map must be one of {OUTPUT_MAPS}")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def depth(self):
        return len(self.hidden_widths) + 1

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        d["batchnorm"] = list(self.batchnorm)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden_widths"] = tuple(d["hidden_widths"])
        d["batchnorm"] = tuple(d["batchnorm"])
        return cls(**d)


@dataclass
class ParameterSet:
    """Trainable arrays (``w{i}``, ``b{i}``, ``bn{i}.scale``, ``bn{i}.shift``)
    plus batchnorm running statistics (``bn{i}.mean``, ``bn{i}.var``)."""

    trainable: dict
    running: dict = field(default_factory=dict)
    mode: str = "train"

    def copy(self):
        return ParameterSet({k: v.copy() for k, v in self.trainable.items()},
                            {k: v.copy() for k, v in self.running.items()}, self.mode)


def init_params(config: MLPConfig, seed: int, dtype=np.float64) -> ParameterSet:
    rng = np.random.default_rng(seed)
    dims = config.layer_dims
    trainable, running = {}, {}
    for i in range(config.depth):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / fan_in)
        trainable[f"w{i}"] = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
        trainable[f"b{i}"] = np.zeros(fan_out, dtype=dtype)
        if i < len(config.hidden_widths) and config.batchnorm[i]:
            trainable[f"bn{i}.scale"] = np.ones(fan_out, dtype=dtype)
            trainable[f"bn{i}.shift"] = np.zeros(fan_out, dtype=dtype)
            running[f"bn{i}.mean"] = np.zeros(fan_out, dtype=dtype)
            running[f"bn{i}.var"] = np.ones(fan_out, dtype=dtype)
    return ParameterSet(trainable, running)


def bind(params: ParameterSet, tape: dc.Tape, trainable=True, prefix=""):
    """Put the trainable arrays on ``tape`` and return name -> node."""
    return {name: tape.parameter(value, prefix + name, trainable=trainable)
            for name, value in params.trainable.items()}


def batchnorm_forward(params: ParameterSet, layer: int, x: dc.Node, mode: str,
                      nodes: dict, momentum=0.99, eps=1e-6) -> dc.Node:
    """Normalize ``x`` over the batch (train) or with running stats (eval).

    In train mode the running statistics of ``params`` are updated in place
    with ``running = momentum * running + (1 - momentum) * batch``.  Mode
    ``"batch"`` normalizes with batch statistics but leaves them untouched.
    """
    key = f"bn{layer}"
    scale, shift = nodes[f"{key}.scale"], nodes[f"{key}.shift"]
    if mode in BATCH_STAT_MODES:
        if x.shape[0] < 2:
            raise ContractError("train-mode batch normalization needs a batch of at least 2")
        out = dc.batchnorm(x, scale, shift, training=True, eps=eps)
        if mode == "train":
            _update_running(params, key, out.cache[2], out.cache[3], momentum)
        return out
    return dc.batchnorm(x, scale, shift, training=False,
                        running_mean=params.running[f"{key}.mean"],
                        running_var=params.running[f"{key}.var"], eps=eps)


def _update_running(params, key, mean, var, momentum):
    run_mean, run_var = params.running[f"{key}.mean"], params.running[f"{key}.var"]
    run_mean *= momentum
    run_mean += (1.0 - momentum) * mean
    run_var *= momentum
    run_var += (1.0 - momentum) * var


def output_softmax(logits: dc.Node) -> dc.Node:
    return dc.softmax(logits, axis=-1)


def output_nonneg(values: dc.Node) -> dc.Node:
    return dc.nonneg(values)


def mlp_forward(params: ParameterSet, config: MLPConfig, x: dc.Node, tape: dc.Tape,
                nodes=None) -> dc.Node:
    """Run the network on a ``(batch, input_dim)`` node.

    ``nodes`` are the bound parameters (see :func:`bind`); binding once per
    tape and reusing the nodes across time steps lets gradients from every
    step accumulate onto the shared weights.
    """
    if x.value.ndim != 2 or x.shape[1] != config.input_dim:
        raise dc.ShapeError(f"expected input (batch, {config.input_dim}), got {x.shape}")
    if nodes is None:
        nodes = bind(params, tape)
    h = x
    if params.mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    batch_stats = params.mode in BATCH_STAT_MODES
    for i in range(len(config.hidden_widths)):
        # one fused tape op per hidden layer; same maths as linear -> batchnorm_forward -> relu
        if not config.batchnorm[i]:
            h = dc.dense(h, nodes[f"w{i}"], nodes[f"b{i}"])
            continue
        key = f"bn{i}"
        if batch_stats and h.shape[0] < 2:
            raise ContractError("train-mode batch normalization needs a batch of at least 2")
        h = dc.dense(h, nodes[f"w{i}"], nodes[f"b{i}"], nodes[f"{key}.scale"], nodes[f"{key}.shift"],
                     norm="train" if batch_stats else "eval",
                     running_mean=params.running[f"{key}.mean"],
                     running_var=params.running[f"{key}.var"], eps=config.eps)
        if params.mode == "train":
            _update_running(params, key, h.cache[2], h.cache[3], config.momentum)
    last = config.depth - 1
    h = dc.linear(h, nodes[f"w{last}"], nodes[f"b{last}"])
    if config.output_map == "softmax":
        return output_softmax(h)
    if config.output_map == "nonneg":
        return output_nonneg(h)
    return h


@dataclass
class Network:
    config: MLPConfig
    params: ParameterSet

    def __call__(self, x, tape, nodes=None):
        return mlp_forward(self.params, self.config, x, tape, nodes)

    def predict(self, x):
        """Eval-mode forward pass on a plain array."""
        tape = dc.Tape(dtype=next(iter(self.params.trainable.values())).dtype, grad=False)
        saved = self.params.mode
        self.params.mode = "eval"
        try:
            return mlp_forward(self.params, self.config, tape.constant(x), tape).value
        finally:
            self.params.mode = saved

    def copy(self):
        return Network(self.config, self.params.copy())


def set_mode(bundle: dict, mode: str):
    for net in bundle.values():
        net.params.mode = mode


def copy_bundle(bundle: dict) -> dict:
    return {role: net.copy() for role, net in bundle.items()}


def save_checkpoint(path, bundle: dict):
    """Text header of ``tensor <role> <name> <shape>`` lines, then float64 LE payloads."""
    lines = [CHECKPOINT_MAGIC]
    payload = []
    for role, net in bundle.items():
        lines.append(f"config {role} {json.dumps(net.config.to_dict(), sort_keys=True)}")
        lines.append(f"mode {role} {net.params.mode}")
        for kind, arrays in (("tensor", net.params.trainable), ("running", net.params.running)):
            for name, arr in arrays.items():
                shape = "x".join(str(s) for s in arr.shape)
                lines.append(f"{kind} {role} {name} {shape}")
                payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise CheckpointFormatError(f"{path}: missing checkpoint header")
    header = raw[:cut].decode("utf-8").split("\n")[1:]
    body = memoryview(raw)[cut + len(marker):]
    configs, modes, specs = {}, {}, []
    for line in header:
        kind, rest = line.split(" ", 1)
        if kind == "config":
            role, blob = rest.split(" ", 1)
            configs[role] = MLPConfig.from_dict(json.loads(blob))
        elif kind == "mode":
            role, mode = rest.split(" ")
            modes[role] = mode
        elif kind in ("tensor", "running"):
            role, name, shape = rest.split(" ")
            dims = tuple(int(s) for s in shape.split("x")) if shape else ()
            specs.append((kind, role, name, dims))
        else:
            raise CheckpointFormatError(f"{path}: unknown header line {line!r}")
    bundle = {role: Network(cfg, ParameterSet({}, {}, modes.get(role, "train")))
              for role, cfg in configs.items()}
    offset = 0
    for kind, role, name, dims in specs:
        if role not in bundle:
            raise CheckpointFormatError(f"{path}: role {role!r} layer {name!r} has no config")
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(body):
            raise CheckpointFormatError(
                f"{path}: role {role!r} layer {name!r} truncated "
                f"(needs {nbytes} bytes, {len(body) - offset} left)")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype="<f8").reshape(dims).astype(np.float64)
        offset += nbytes
        target = bundle[role].params.trainable if kind == "tensor" else bundle[role].params.running
        target[name] = arr
    if offset != len(body):
        raise CheckpointFormatError(f"{path}: {len(body) - offset} trailing bytes after last layer")
    for role, net in bundle.items():
        expected = init_params(net.config, 0)
        for group in ("trainable", "running"):
            have, want = getattr(net.params, group), getattr(expected, group)
            for name, arr in want.items():
                if name not in have:
                    raise CheckpointFormatError(f"{path}: role {role!r} layer {name!r} missing")
                if have[name].shape != arr.shape:
                    raise CheckpointFormatError(
                        f"{path}: role {role!r} layer {name!r} has shape {have[name].shape}, "
                        f"config implies {arr.shape}")
            if group == "running":
                for name, arr in have.items():
                    if name.endswith(".var") and np.any(arr < 0):
                        raise CheckpointFormatError(
                            f"{path}: role {role!r} layer {name!r} has negative running variance")
    return bundle
