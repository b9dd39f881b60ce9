import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbsde_co import diffcore as dc
from fbsde_co.diffcore import ContractError, NonFiniteError, ShapeError, Tape, backward, grad_check


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-15) * margin * 2, x)


# (name, builder(tape, node, rng) -> scalar node, input shape)
def _op_cases():
    def weighted(out, rng):
        return dc.sum(out * out.tape.constant(rng.normal(size=out.shape)))

    return {
        "add": (lambda t, x, rng: weighted(x + t.constant(rng.normal(size=x.shape)), rng), (3, 4)),
        "sub": (lambda t, x, rng: weighted(t.constant(rng.normal(size=(4,))) - x, rng), (3, 4)),
        "mul": (lambda t, x, rng: weighted(x * t.constant(rng.normal(size=(3, 1))), rng), (3, 4)),
        "div": (lambda t, x, rng: weighted(t.constant(rng.normal(size=(3, 4))) / (x * x + t.constant(1.0)), rng),
                (3, 4)),
        "neg": (lambda t, x, rng: weighted(-x, rng), (5,)),
        "matmul": (lambda t, x, rng: weighted(t.constant(rng.normal(size=(2, 3))) @ x, rng), (3,)),
        "matmul-left": (lambda t, x, rng: weighted(x @ t.constant(rng.normal(size=(4, 2))), rng), (3, 4)),
        "linear": (lambda t, x, rng: weighted(dc.linear(x, t.constant(rng.normal(size=(2, 4))),
                                                        t.constant(rng.normal(size=2))), rng), (3, 4)),
        "bmv": (lambda t, x, rng: weighted(dc.bmv(x, t.constant(rng.normal(size=(3, 4)))), rng), (3, 2, 4)),
        "sum": (lambda t, x, rng: weighted(dc.sum(x, axis=1, keepdims=True), rng), (3, 4)),
        "mean": (lambda t, x, rng: weighted(dc.mean(x, axis=0), rng), (3, 4)),
        "square": (lambda t, x, rng: weighted(dc.square(x), rng), (3, 4)),
        "exp": (lambda t, x, rng: weighted(dc.exp(x * t.constant(0.5)), rng), (3, 4)),
        "relu": (lambda t, x, rng: weighted(dc.relu(x), rng), (3, 4)),
        "nonneg": (lambda t, x, rng: weighted(dc.nonneg(x), rng), (3, 4)),
        "softmax": (lambda t, x, rng: weighted(dc.softmax(x, axis=-1), rng), (3, 4)),
        "broadcast": (lambda t, x, rng: weighted(dc.broadcast(x, (3, 4)), rng), (1, 4)),
        "concat": (lambda t, x, rng: weighted(dc.concat([x, t.constant(rng.normal(size=(3, 2))), x], axis=1), rng),
                   (3, 4)),
        "slice": (lambda t, x, rng: weighted(x[:, 1:3], rng), (3, 4)),
        "slice-fancy": (lambda t, x, rng: weighted(x[np.array([0, 2, 0])], rng), (3, 4)),
        "reshape": (lambda t, x, rng: weighted(dc.reshape(x, (2, 6)), rng), (3, 4)),
        "batchnorm-train": (lambda t, x, rng: weighted(dc.batchnorm(x, t.constant(rng.normal(size=4)),
                                                                    t.constant(rng.normal(size=4))), rng), (5, 4)),
        "batchnorm-eval": (lambda t, x, rng: weighted(dc.batchnorm(
            x, t.constant(rng.normal(size=4)), t.constant(rng.normal(size=4)), training=False,
            running_mean=np.full(4, 0.2), running_var=np.full(4, 1.5)), rng), (5, 4)),
        "dense": (lambda t, x, rng: weighted(dc.dense(
            x, t.constant(rng.normal(size=(3, 4))), t.constant(rng.normal(size=3)),
            t.constant(rng.normal(size=3)), t.constant(rng.normal(size=3)), norm="train"), rng), (6, 4)),
    }


OP_CASES = _op_cases()


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_matches_central_differences(name):
    build, shape = OP_CASES[name]
    worst = 0.0
    for seed in range(100):
        x = _away_from_zero(np.random.default_rng(seed), shape)

        def fn(tape, node, seed=seed):
            return build(tape, node, np.random.default_rng(1000 + seed))

        worst = max(worst, grad_check(fn, x))
    # kinks are only an issue for ops whose output has one; inputs keep clear of 0 by 1e-3
    assert worst < 1e-5, f"{name}: {worst}"


def test_record_add_and_matmul_examples():
    tape = Tape()
    a, b = tape.constant([1.0, 2.0]), tape.constant([3.0, 5.0])
    np.testing.assert_array_equal((a + b).value, [4.0, 7.0])
    W = tape.constant(np.arange(6.0).reshape(2, 3))
    x = tape.constant([1.0, 0.0, -1.0])
    out = W @ x
    assert out.shape == (2,)
    np.testing.assert_array_equal(out.value, [-2.0, -2.0])
    with pytest.raises(ShapeError):
        W @ tape.constant(np.ones(4))


def test_square_gradient_at_three():
    tape = Tape()
    p = tape.parameter(np.array(3.0), "p")
    grads = backward(tape, dc.square(p))
    assert grads[p.id] == pytest.approx(6.0)


def test_softmax_sum_has_zero_gradient():
    tape = Tape()
    p = tape.parameter(np.array([1.0]), "p")
    logits = dc.concat([p, tape.constant([0.0])], axis=0)
    grads = backward(tape, dc.sum(dc.softmax(logits)))
    assert abs(grads[p.id][0]) < 1e-15


def test_grad_check_examples():
    assert grad_check(lambda t, x: dc.sum(x * x), np.array([1.0, 2.0, 3.0])) < 1e-7
    assert grad_check(lambda t, x: dc.sum(dc.relu(x)), np.array([1.0, -1.0])) < 1e-7
    assert grad_check(lambda t, x: dc.sum(dc.exp(x)), np.array([0.0])) < 1e-7


def test_grad_check_rejects_vector_function():
    with pytest.raises(ContractError):
        grad_check(lambda t, x: x * x, np.array([1.0, 2.0]))


def test_backward_needs_scalar_root():
    tape = Tape()
    p = tape.parameter(np.ones(3), "p")
    with pytest.raises(ContractError):
        backward(tape, p * p)


def test_no_grad_tape_cannot_backward():
    tape = Tape(grad=False)
    p = tape.parameter(np.ones(3), "p")
    with pytest.raises(ContractError):
        backward(tape, dc.sum(p))


def test_nodes_from_another_tape_are_rejected():
    a, b = Tape(), Tape()
    with pytest.raises(ContractError):
        a.constant(1.0) + b.constant(2.0)


def test_unknown_op():
    with pytest.raises(ContractError):
        Tape().record("nope", [])


def test_only_parameters_get_gradients():
    tape = Tape()
    p = tape.parameter(np.array([2.0]), "p")
    frozen = tape.parameter(np.array([5.0]), "q", trainable=False)
    c = tape.constant([7.0])
    grads = backward(tape, dc.sum(p * frozen * c))
    assert set(grads) == {p.id}
    assert grads[p.id][0] == pytest.approx(35.0)


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    p = tape.parameter(np.array([2.0]), "p")
    q = tape.parameter(np.zeros((2, 2)), "q")
    grads = backward(tape, dc.sum(p * p))
    np.testing.assert_array_equal(grads[q.id], np.zeros((2, 2)))


def test_fan_out_accumulates():
    tape = Tape()
    p = tape.parameter(np.array([1.5]), "p")
    y = p * p + p * tape.constant(3.0) + p
    grads = backward(tape, dc.sum(y))
    assert grads[p.id][0] == pytest.approx(2 * 1.5 + 3 + 1)


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    p = tape.parameter(np.array([0.0, 1.0, -1.0]), "p")
    grads = backward(tape, dc.sum(dc.relu(p)))
    np.testing.assert_array_equal(grads[p.id], [0.0, 1.0, 0.0])


def test_nonneg_maps_negative_zero_to_positive_zero():
    out = dc.nonneg(Tape().constant([-0.0, -3.0, 2.0])).value
    assert not np.signbit(out).any()
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


def test_softmax_large_logits_do_not_overflow():
    out = dc.softmax(Tape().constant([1000.0, 0.0])).value
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_known_value():
    out = dc.softmax(Tape().constant([np.log(2.0), 0.0])).value
    np.testing.assert_allclose(out, [2 / 3, 1 / 3], rtol=1e-15)


def test_batchnorm_train_example_and_small_batch():
    tape = Tape()
    x = tape.constant([[0.0], [2.0]])
    out = dc.batchnorm(x, tape.constant([1.0]), tape.constant([0.0]), eps=1e-6).value
    np.testing.assert_allclose(out[:, 0], [-1.0, 1.0], rtol=1e-6)
    with pytest.raises(ContractError):
        dc.batchnorm(tape.constant([[1.0]]), tape.constant([1.0]), tape.constant([0.0]))


def test_dense_matches_unfused_ops():
    rng = np.random.default_rng(0)
    tape = Tape()
    x, w, b = (tape.constant(rng.normal(size=s)) for s in ((7, 3), (4, 3), (4,)))
    s, sh = tape.constant(rng.normal(size=4)), tape.constant(rng.normal(size=4))
    rm, rv = rng.normal(size=4), rng.uniform(0.5, 2, size=4)
    for norm in (None, "train", "eval"):
        ref = dc.linear(x, w, b)
        if norm:
            ref = dc.batchnorm(ref, s, sh, training=norm == "train", running_mean=rm, running_var=rv)
        ref = dc.relu(ref)
        fused = dc.dense(x, w, b, *((s, sh) if norm else ()), norm=norm, running_mean=rm, running_var=rv)
        np.testing.assert_allclose(fused.value, ref.value, rtol=1e-12, atol=1e-13)


def test_debug_mode_flags_non_finite_values():
    tape = Tape(debug=True)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        dc.exp(tape.constant([1000.0]))
    with pytest.raises(NonFiniteError):
        tape.constant([np.nan])


def test_dag_and_replay():
    rng = np.random.default_rng(3)
    tape = Tape()
    p = tape.parameter(rng.normal(size=(4, 3)), "p")
    h = dc.softmax(dc.relu(p) @ tape.constant(rng.normal(size=(3, 2))))
    dc.sum(dc.square(h))
    for node in tape.nodes:
        assert all(inp.id < node.id for inp in node.inputs)
    assert tape.replay() == 0.0
    assert tape.replay() == 0.0


def test_backward_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        tape = Tape()
        p = tape.parameter(rng.normal(size=(8, 5)), "p")
        out = dc.mean(dc.exp(dc.softmax(p) * tape.constant(rng.normal(size=(8, 5)))))
        return backward(tape, out)[p.id]

    assert np.array_equal(run(), run())


def test_chain_rule_composes():
    # d/dx sum(exp(Wx)) = W^T exp(Wx): one tape vs the separately built Jacobian action
    rng = np.random.default_rng(5)
    W, x0 = rng.normal(size=(3, 4)), rng.normal(size=4)
    tape = Tape()
    x = tape.parameter(x0, "x")
    grads = backward(tape, dc.sum(dc.exp(tape.constant(W) @ x)))
    inner = Tape()
    v = inner.parameter(W @ x0, "v")
    outer_grad = backward(inner, dc.sum(dc.exp(v)))[v.id]
    np.testing.assert_allclose(grads[x.id], W.T @ outer_grad, rtol=1e-12)


def test_float32_tape():
    tape = Tape(dtype=np.float32)
    p = tape.parameter(np.ones(3), "p")
    out = dc.sum(p * p)
    assert out.value.dtype == np.float32
    assert backward(tape, out)[p.id].dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_lies_on_simplex(values):
    out = dc.softmax(Tape().constant(values)).value
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_sum_gradient_is_ones(rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols))
    tape = Tape()
    p = tape.parameter(x, "p")
    np.testing.assert_array_equal(backward(tape, dc.sum(p))[p.id], np.ones_like(x))
