"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every operation as a :class:`Node`.  Nodes are
appended in creation order, so every input id is smaller than the id of
the node that consumes it and a single reverse sweep over the tape is a
valid topological order.

Example
-------
>>> tape = Tape()
>>> p = tape.parameter(np.array(3.0))
>>> loss = square(p)
>>> backward(tape, loss)[p.id]
array(6.)
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf value showed up while the tape was in debug mode."""


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {shapes}") from exc


# Each op is (forward, vjp).  forward(*values, **attrs) -> (value, cache);
# vjp(g, value, cache, *values, **attrs) -> tuple of input gradients.

def _add_fwd(a, b):
    _broadcast_shape(a.shape, b.shape)
    return a + b, None


def _add_vjp(g, out, cache, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _broadcast_shape(a.shape, b.shape)
    return a - b, None


def _sub_vjp(g, out, cache, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    _broadcast_shape(a.shape, b.shape)
    return a * b, None


def _mul_vjp(g, out, cache, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    _broadcast_shape(a.shape, b.shape)
    return a / b, None


def _div_vjp(g, out, cache, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _neg_fwd(a):
    return -a, None


def _neg_vjp(g, out, cache, a):
    return (-g,)


def _matmul_fwd(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    try:
        return np.matmul(a, b), None
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}") from exc


def _matmul_vjp(g, out, cache, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape)
    gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape)
    return ga.reshape(a.shape), gb.reshape(b.shape)


def _linear_fwd_check(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError("linear expects x (batch, in), w (out, in), b (out,)")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"linear shape mismatch x{x.shape} w{w.shape} b{b.shape}")


def _linear_fwd(x, w, b):
    _linear_fwd_check(x, w, b)
    return x @ w.T + b, None


def _linear_vjp(g, out, cache, x, w, b):
    return g @ w, g.T @ x, g.sum(axis=0)


def _bmv_fwd(a, v):
    # (batch, m, d) x (batch, d) -> (batch, m)
    if a.ndim != 3 or v.ndim != 2 or a.shape[0] != v.shape[0] or a.shape[2] != v.shape[1]:
        raise ShapeError(f"bmv shape mismatch {a.shape} x {v.shape}")
    return np.einsum("bmd,bd->bm", a, v), None


def _bmv_vjp(g, out, cache, a, v):
    return g[:, :, None] * v[:, None, :], np.einsum("bmd,bm->bd", a, g)


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _sum_vjp(g, out, cache, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_fwd(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims), None


def _mean_vjp(g, out, cache, a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, a.shape).copy(),)


def _square_fwd(a):
    return a * a, None


def _square_vjp(g, out, cache, a):
    return (2.0 * a * g,)


def _exp_fwd(a):
    return np.exp(a), None


def _exp_vjp(g, out, cache, a):
    return (g * out,)


def _relu_fwd(a):
    mask = a > 0
    return np.where(mask, a, 0.0).astype(a.dtype, copy=False), mask


def _relu_vjp(g, out, mask, a):
    # subgradient at 0 is 0
    return (g * mask,)


def _softmax_fwd(a, axis=-1):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True), None


def _softmax_vjp(g, out, cache, a, axis=-1):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _broadcast_fwd(a, shape):
    try:
        return np.broadcast_to(a, shape).copy(), None
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc


def _broadcast_vjp(g, out, cache, a, shape):
    return (_unbroadcast(g, a.shape),)


def _concat_fwd(*arrays, axis=0):
    try:
        return np.concatenate(arrays, axis=axis), None
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate {[x.shape for x in arrays]}") from exc


def _concat_vjp(g, out, cache, *arrays, axis=0):
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_fwd(a, index):
    return a[index].copy(), None


def _slice_vjp(g, out, cache, a, index):
    ga = np.zeros_like(a)
    if _has_fancy(index):
        np.add.at(ga, index, g)
    else:
        ga[index] = g
    return (ga,)


def _has_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), None
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc


def _reshape_vjp(g, out, cache, a, shape):
    return (g.reshape(a.shape),)


def _nonneg_fwd(a):
    # np.where gives +0.0 for -0.0 inputs
    mask = a > 0
    return np.where(mask, a, 0.0).astype(a.dtype, copy=False), mask


def _batchnorm_fwd(x, scale, shift, training=True, running_mean=None, running_var=None, eps=1e-6):
    if x.ndim != 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm shape mismatch x{x.shape} scale{scale.shape} shift{shift.shape}")
    if training:
        if x.shape[0] < 2:
            raise ContractError("train-mode batch normalization needs a batch of at least 2")
        mean = x.mean(axis=0)
        xc = x - mean
        var = np.mean(xc * xc, axis=0)
    else:
        mean, var = running_mean, running_var
        xc = x - mean
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * scale + shift, (xhat, inv_std, mean, var)


def _batchnorm_vjp(g, out, cache, x, scale, shift, training=True, running_mean=None,
                   running_var=None, eps=1e-6):
    xhat, inv_std = cache[0], cache[1]
    gscale = np.sum(g * xhat, axis=0)
    gshift = np.sum(g, axis=0)
    gxhat = g * scale
    if training:
        batch = x.shape[0]
        gx = (inv_std / batch) * (batch * gxhat - gxhat.sum(axis=0) - xhat * np.sum(gxhat * xhat, axis=0))
    else:
        gx = gxhat * inv_std
    return gx, gscale, gshift


def _dense_fwd(x, w, b, scale=None, shift=None, norm=None, running_mean=None, running_var=None,
               eps=1e-6, relu=True):
    """Fused affine -> optional batchnorm -> optional relu.

    Works in place on the matmul buffer to keep the number of passes over
    (batch, width) arrays small.  The cache holds the centered pre-activation
    and 1/std in train mode; the relu mask is recovered from the output.
    """
    _linear_fwd_check(x, w, b)
    h = x @ w.T
    if norm is None:
        h += b
        cache = None
    elif norm == "train":
        if x.shape[0] < 2:
            raise ContractError("train-mode batch normalization needs a batch of at least 2")
        inv_m = 1.0 / x.shape[0]
        center = h.sum(axis=0) * inv_m
        h -= center  # the bias cancels under batch centering
        var = np.einsum("ij,ij->j", h, h) * inv_m
        inv_std = 1.0 / np.sqrt(var + eps)
        cache = (h, inv_std, center + b, var)
        h = h * (scale * inv_std)
        h += shift
    else:
        gain = scale / np.sqrt(running_var + eps)
        h *= gain
        h += shift + (b - running_mean) * gain
        cache = None
    if relu:
        np.maximum(h, 0.0, out=h)
    return h, cache


def _dense_vjp(g, out, cache, x, w, b, scale=None, shift=None, norm=None, running_mean=None,
               running_var=None, eps=1e-6, relu=True, needs=None):
    if relu:
        g = g * (out > 0)
    need_x = needs is None or needs[0]
    need_w = needs is None or any(needs[1:])
    if norm is None:
        return (g @ w if need_x else None, g.T @ x if need_w else None,
                g.sum(axis=0) if need_w else None)
    if not need_w:
        if norm == "train":
            xc, inv_std = cache[0], cache[1]
            inv_m = 1.0 / x.shape[0]
            gxc = np.einsum("ij,ij->j", g, xc)
            gh = g - g.sum(axis=0) * inv_m
            gh -= xc * (gxc * inv_std * inv_std * inv_m)
            gh *= scale * inv_std
        else:
            gh = g * (scale / np.sqrt(running_var + eps))
        return gh @ w, None, None, None, None
    gshift = g.sum(axis=0)
    if norm == "train":
        xc, inv_std = cache[0], cache[1]
        inv_m = 1.0 / x.shape[0]
        gxc = np.einsum("ij,ij->j", g, xc)
        gscale = gxc * inv_std
        gh = g - gshift * inv_m
        gh -= xc * (gxc * inv_std * inv_std * inv_m)
        gh *= scale * inv_std
        gb = np.zeros_like(b)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        gscale = np.einsum("ij,ij->j", g, _eval_xhat(x, w, b, running_mean, inv_std))
        gh = g * (scale * inv_std)
        gb = gh.sum(axis=0)
    return gh @ w if need_x else None, gh.T @ x, gb, gscale, gshift


def _eval_xhat(x, w, b, running_mean, inv_std):
    return (x @ w.T + (b - running_mean)) * inv_std


OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_vjp),
    "sub": (_sub_fwd, _sub_vjp),
    "mul": (_mul_fwd, _mul_vjp),
    "div": (_div_fwd, _div_vjp),
    "neg": (_neg_fwd, _neg_vjp),
    "matmul": (_matmul_fwd, _matmul_vjp),
    "linear": (_linear_fwd, _linear_vjp),
    "bmv": (_bmv_fwd, _bmv_vjp),
    "sum": (_sum_fwd, _sum_vjp),
    "mean": (_mean_fwd, _mean_vjp),
    "square": (_square_fwd, _square_vjp),
    "exp": (_exp_fwd, _exp_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "nonneg": (_nonneg_fwd, _relu_vjp),
    "softmax": (_softmax_fwd, _softmax_vjp),
    "broadcast": (_broadcast_fwd, _broadcast_vjp),
    "concat": (_concat_fwd, _concat_vjp),
    "slice": (_slice_fwd, _slice_vjp),
    "reshape": (_reshape_fwd, _reshape_vjp),
    "batchnorm": (_batchnorm_fwd, _batchnorm_vjp),
    "dense": (_dense_fwd, _dense_vjp),
}

LEAF_OPS = ("constant", "parameter")
# ops whose vjp accepts ``needs`` (per-input flags) and may skip unneeded gradients
NEEDS_AWARE = ("dense",)


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "attrs", "cache", "requires_grad")

    def __init__(self, tape, id, op, inputs, value, attrs, cache, requires_grad):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs
        self.cache = cache
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.record("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.tape.record("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.tape.record("mul", [self._lift(other), self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, self._lift(other)])

    def __neg__(self):
        return self.tape.record("neg", [self])

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return self.tape.record("matmul", [self._lift(other), self])

    def __getitem__(self, index):
        return self.tape.record("slice", [self], index=index)


class Tape:
    """Ordered record of operations.

    ``grad=False`` builds a throwaway tape: values are computed but nodes
    are not retained, which is what evaluation passes use.  ``debug=True``
    checks every produced value for NaN/Inf.
    """

    def __init__(self, dtype=np.float64, debug=False, grad=True):
        self.dtype = np.dtype(dtype)
        self.debug = debug
        self.grad = grad
        self.nodes: list[Node] = []
        self.params: dict[int, str] = {}
        self._count = 0

    def _append(self, op, inputs, value, attrs, cache, requires_grad):
        node = Node(self, self._count, op, inputs, value, attrs, cache, requires_grad)
        self._count += 1
        if self.grad:
            self.nodes.append(node)
        return node

    def _as_array(self, value):
        arr = np.asarray(value, dtype=self.dtype)
        if self.debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite leaf value")
        return arr

    def constant(self, value) -> Node:
        return self._append("constant", (), self._as_array(value), {}, None, False)

    def parameter(self, value, name=None, trainable=True) -> Node:
        """Register a leaf.  Non-trainable parameters behave as constants."""
        node = self._append("parameter" if trainable else "constant", (), self._as_array(value),
                            {}, None, trainable and self.grad)
        if trainable and self.grad:
            self.params[node.id] = name if name is not None else f"p{node.id}"
        return node

    def record(self, op: str, inputs, **attrs) -> Node:
        """Append ``op`` applied to ``inputs`` and return the new node."""
        try:
            forward, _ = OPS[op]
        except KeyError:
            raise ContractError(f"unknown op {op!r}") from None
        for node in inputs:
            if node.tape is not self:
                raise ContractError("input node belongs to a different tape")
        value, cache = forward(*(n.value for n in inputs), **attrs)
        if not isinstance(value, np.ndarray):
            value = np.asarray(value)
        if self.debug and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op {op!r} produced a non-finite value")
        requires_grad = self.grad and any(n.requires_grad for n in inputs)
        return self._append(op, tuple(inputs), value, attrs, cache, requires_grad)

    def replay(self) -> float:
        """Recompute every non-leaf value from the leaves.

        Returns the max absolute discrepancy against the stored values
        (0.0 when the tape is consistent).  Stored values are not modified.
        """
        values: dict[int, np.ndarray] = {}
        worst = 0.0
        for node in self.nodes:
            if node.op in LEAF_OPS:
                values[node.id] = node.value
                continue
            forward, _ = OPS[node.op]
            value, _ = forward(*(values[n.id] for n in node.inputs), **node.attrs)
            values[node.id] = value
            if value.size:
                worst = max(worst, float(np.max(np.abs(value - node.value))))
        return worst


def backward(tape: Tape, root: Node) -> dict[int, np.ndarray]:
    """Gradient of scalar ``root`` with respect to every registered parameter."""
    if not tape.grad:
        raise ContractError("tape was built with grad=False")
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    for node in reversed(tape.nodes[: root.id + 1]):
        g = grads.pop(node.id, None) if node.op not in LEAF_OPS else grads.get(node.id)
        if g is None or not node.requires_grad or node.op in LEAF_OPS:
            continue
        _, vjp = OPS[node.op]
        attrs = node.attrs
        if node.op in NEEDS_AWARE:
            attrs = dict(attrs, needs=tuple(n.requires_grad for n in node.inputs))
        in_grads = vjp(g, node.value, node.cache, *(n.value for n in node.inputs), **attrs)
        for inp, ig in zip(node.inputs, in_grads):
            if not inp.requires_grad or ig is None:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = ig if prev is None else prev + ig
    return {pid: grads.get(pid, np.zeros_like(tape.nodes[pid].value)) for pid in tape.params}


# Functional spellings of the ops, for code that reads better without operators.

def add(a, b):
    return a.tape.record("add", [a, b])


def sub(a, b):
    return a.tape.record("sub", [a, b])


def mul(a, b):
    return a.tape.record("mul", [a, b])


def matmul(a, b):
    return a.tape.record("matmul", [a, b])


def linear(x, w, b):
    return x.tape.record("linear", [x, w, b])


def bmv(a, v):
    return a.tape.record("bmv", [a, v])


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return a.tape.record("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return a.tape.record("mean", [a], axis=axis, keepdims=keepdims)


def square(a):
    return a.tape.record("square", [a])


def exp(a):
    return a.tape.record("exp", [a])


def relu(a):
    return a.tape.record("relu", [a])


def nonneg(a):
    return a.tape.record("nonneg", [a])


def softmax(a, axis=-1):
    return a.tape.record("softmax", [a], axis=axis)


def broadcast(a, shape):
    return a.tape.record("broadcast", [a], shape=tuple(shape))


def concat(nodes, axis=0):
    return nodes[0].tape.record("concat", list(nodes), axis=axis)


def reshape(a, shape):
    return a.tape.record("reshape", [a], shape=tuple(shape))


def batchnorm(x, scale, shift, training=True, running_mean=None, running_var=None, eps=1e-6):
    return x.tape.record("batchnorm", [x, scale, shift], training=training,
                         running_mean=running_mean, running_var=running_var, eps=eps)


def dense(x, w, b, scale=None, shift=None, norm=None, running_mean=None, running_var=None,
          eps=1e-6, relu=True):
    inputs = [x, w, b] if norm is None else [x, w, b, scale, shift]
    return x.tape.record("dense", inputs, norm=norm, running_mean=running_mean,
                         running_var=running_var, eps=eps, relu=relu)


def grad_check(fn: Callable[[Tape, Node], Node], point, step=1e-6) -> float:
    """Max relative error between backward and central differences.

    ``fn(tape, x)`` must build a scalar from the parameter node ``x``.
    The error is taken in the max norm,
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``,
    so coordinates whose gradient happens to be near zero do not turn
    finite-difference roundoff into a large ratio.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.parameter(point)
    out = fn(tape, x)
    if out.value.size != 1:
        raise ContractError("grad_check function must return a scalar")
    analytic = backward(tape, out)[x.id].ravel()

    def value_at(p):
        t = Tape(grad=False)
        return float(fn(t, t.constant(p)).value)

    numeric = np.empty(point.size)
    flat = point.ravel()
    for i in range(point.size):
        up, down = flat.copy(), flat.copy()
        up[i] += step
        down[i] -= step
        numeric[i] = (value_at(up.reshape(point.shape)) - value_at(down.reshape(point.shape))) / (2 * step)
    if not point.size:
        return 0.0
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / denom)
