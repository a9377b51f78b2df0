"""Tensor core: op semantics, tape recording, backprop contracts."""

import numpy as np
import pytest

from chainplan.engine import (
    EngineError,
    NonFiniteError,
    OPS,
    Parameter,
    Tape,
    Tensor,
    add,
    apply,
    backprop,
    concat,
    layer_norm,
    matmul,
    mean,
    mul,
    power,
    relu,
    slice_axis,
    softmax,
    sub,
    take,
    total,
    transpose,
    using_dtype,
)


@pytest.fixture(autouse=True)
def f64():
    with using_dtype("f64"):
        yield


class TestForwardSemantics:
    def test_softmax_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.numpy(), [0.5, 0.5])

    def test_matmul_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 5))
        out = matmul(Tensor(np.eye(3)), Tensor(x))
        np.testing.assert_array_equal(out.numpy(), x)

    def test_relu_definition(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.numpy(), [0.0, 0.0, 2.0])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = softmax(Tensor(rng.normal(size=(7, 11))), axis=-1)
        np.testing.assert_allclose(out.numpy().sum(axis=-1), np.ones(7),
                                   atol=1e-9)
        assert (out.numpy() > 0).all() and (out.numpy() < 1).all()

    def test_layer_norm_moments(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, size=(5, 8)) * 3.0
        out = layer_norm(Tensor(x), axis=-1, eps=1e-9).numpy()
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-7)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 6)))
        w = Tensor(rng.normal(size=(6, 3)))
        a = softmax(matmul(relu(x), w), axis=-1).numpy()
        b = softmax(matmul(relu(x), w), axis=-1).numpy()
        assert np.array_equal(a, b)

    def test_shape_mismatch_raises(self):
        with pytest.raises(EngineError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_unknown_op_raises(self):
        with pytest.raises(EngineError, match="unknown op"):
            apply("fused-razzle", Tensor([1.0]))

    def test_non_finite_result_raises(self):
        big = Tensor(np.full((4, 4), 1e308))
        with pytest.raises(NonFiniteError):
            matmul(big, big)

    def test_apply_covers_contract_ops(self):
        contract = ["matmul", "add", "elementwise-mul", "scale", "relu",
                    "softmax", "layer-norm", "concat", "slice", "mean",
                    "conv1d", "embedding-gather", "transpose"]
        for kind in contract:
            assert kind in OPS

    def test_slice_and_concat_roundtrip(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        parts = [slice_axis(x, 1, i, i + 1) for i in range(4)]
        np.testing.assert_array_equal(concat(parts, axis=1).numpy(), x.numpy())

    def test_take_out_of_range(self):
        with pytest.raises(EngineError):
            take(Tensor(np.ones((3, 2))), [0, 3], axis=0)


class TestTape:
    def test_records_are_topologically_ordered(self):
        x = Parameter(np.ones((2, 2)), "x")
        with Tape() as tape:
            y = relu(matmul(x, x))
            total(mul(y, y))
        seen = {x.tid}
        for node in tape.records:
            assert all(i in seen or i not in {r.output_id for r in tape.records}
                       for i in node.input_ids)
            for i in node.input_ids:
                produced = [r.output_id for r in tape.records]
                if i in produced:
                    assert produced.index(i) < produced.index(node.output_id)
            seen.add(node.output_id)

    def test_gradients_exist_for_every_recorded_node(self):
        x = Parameter(np.array([[1.0, 2.0]]), "x")
        with Tape() as tape:
            loss = total(power(x, 2.0))
        grads = tape.gradients(loss)
        for node in tape.records:
            assert node.output_id in grads

    def test_no_recording_without_tape(self):
        x = Parameter(np.ones(3), "x")
        out = mul(x, x)
        assert out.tape_id is None

    def test_constants_do_not_record(self):
        with Tape() as tape:
            mul(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert tape.records == []


class TestBackprop:
    def test_sum_of_squares(self):
        x = Parameter(np.array([1.0, -2.0]), "x")
        with Tape() as tape:
            loss = total(mul(x, x))
        grads = backprop(tape, loss)
        np.testing.assert_allclose(grads["x"].numpy(), [2.0, -4.0])

    def test_constant_loss_gives_zero_gradients(self):
        p = Parameter(np.ones((2, 2)), "p")
        with Tape() as tape:
            loss = Tensor(3.0)
        grads = backprop(tape, loss, [p])
        np.testing.assert_array_equal(grads["p"].numpy(), np.zeros((2, 2)))

    def test_softmax_cross_entropy_uniform_gradient(self):
        # 4 classes at uniform logits, target class 0: grad = p - onehot
        logits = Parameter(np.zeros((1, 4)), "logits")
        onehot = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
        with Tape() as tape:
            p = softmax(logits, axis=-1)
            from chainplan.engine import clip_min, log, neg
            loss = neg(total(mul(onehot, log(clip_min(p, 1e-12)))))
        grads = backprop(tape, loss)
        np.testing.assert_allclose(grads["logits"].numpy(),
                                   [[-0.75, 0.25, 0.25, 0.25]], atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Parameter(np.ones(3), "x")
        with Tape() as tape:
            y = mul(x, x)
        with pytest.raises(EngineError, match="scalar"):
            backprop(tape, y)

    def test_loss_from_other_tape_rejected(self):
        x = Parameter(np.ones(3), "x")
        with Tape():
            loss = total(mul(x, x))
        with Tape() as other:
            mul(x, x)
        with pytest.raises(EngineError, match="not recorded"):
            other.gradients(loss)

    def test_unreachable_parameter_gets_zeros(self):
        used = Parameter(np.ones(2), "used")
        idle = Parameter(np.ones(2), "idle")
        with Tape() as tape:
            loss = total(mul(used, used))
        grads = backprop(tape, loss, [used, idle])
        assert grads["used"].numpy().any()
        assert not grads["idle"].numpy().any()

    def test_grad_accumulates_across_calls(self):
        x = Parameter(np.array([3.0]), "x")
        for _ in range(2):
            with Tape() as tape:
                loss = total(mul(x, x))
            backprop(tape, loss)
        np.testing.assert_allclose(x.grad, [12.0])


class TestPrecisionModes:
    def test_dtype_switch(self):
        with using_dtype("f32"):
            assert Tensor([1.0]).numpy().dtype == np.float32
        with using_dtype("f64"):
            assert Tensor([1.0]).numpy().dtype == np.float64

    def test_mean_and_broadcast_backward(self):
        a = Parameter(np.ones((2, 3)), "a")
        b = Parameter(np.ones(3), "b")
        with Tape() as tape:
            loss = mean(add(a, b))
        grads = backprop(tape, loss)
        np.testing.assert_allclose(grads["a"].numpy(), np.full((2, 3), 1 / 6))
        np.testing.assert_allclose(grads["b"].numpy(), np.full(3, 1 / 3))

    def test_sub_and_transpose_gradients(self):
        a = Parameter(np.arange(6.0).reshape(2, 3), "a")
        with Tape() as tape:
            loss = total(sub(transpose(a), Tensor(np.ones((3, 2)))))
        grads = backprop(tape, loss)
        np.testing.assert_array_equal(grads["a"].numpy(), np.ones((2, 3)))
