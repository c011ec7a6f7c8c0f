import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dymus import tensor as T
from dymus.tensor import NonFiniteError, ShapeError, Tensor

from gradcheck import check_op

TRIALS = 100
TOL = 1e-4


def uni(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


# name -> (builder, input factory); every op kind gets a randomized finite-difference check
OPS = {
    "add": (lambda a, b: a + b, lambda r: [uni(r, 3, 4), uni(r, 4)]),
    "sub": (lambda a, b: a - b, lambda r: [uni(r, 3, 1), uni(r, 3, 4)]),
    "mul": (lambda a, b: a * b, lambda r: [uni(r, 2, 3), uni(r, 2, 3)]),
    "neg": (lambda a: -a, lambda r: [uni(r, 5)]),
    "scale": (lambda a: T.scale(a, -1.7), lambda r: [uni(r, 4)]),
    "sigmoid": (T.sigmoid, lambda r: [uni(r, 6)]),
    "tanh": (T.tanh, lambda r: [uni(r, 6)]),
    "exp": (T.exp, lambda r: [uni(r, 6)]),
    # log needs positive inputs: |x| shifted away from zero
    "log": (T.log, lambda r: [np.abs(uni(r, 6)) + 0.2]),
    "clip": (lambda a: T.clip(a, -1.0, 1.0), lambda r: [uni(r, 6)]),
    "where": (lambda a, b: T.where(np.array([True, False, True]), a, b), lambda r: [uni(r, 2, 3), uni(r, 2, 3)]),
    "dropout": (lambda a: T.dropout(a, 0.5, np.random.default_rng(5)), lambda r: [uni(r, 8)]),
    "sum": (lambda a: T.sum(a, axis=1), lambda r: [uni(r, 3, 4)]),
    "mean": (lambda a: T.mean(a, axis=0), lambda r: [uni(r, 3, 4)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), lambda r: [uni(r, 3, 5)]),
    "l2_norm": (lambda a: T.l2_norm(a, axis=-1), lambda r: [uni(r, 3, 4)]),
    "matmul": (lambda a, b: a @ b, lambda r: [uni(r, 3, 4), uni(r, 4, 2)]),
    "batched_matmul": (lambda a, b: a @ b, lambda r: [uni(r, 2, 3, 4), uni(r, 2, 4, 2)]),
    "einsum": (lambda a, b: T.einsum("dclk,bkd->bdcl", a, b), lambda r: [uni(r, 3, 2, 2, 2), uni(r, 2, 2, 3)]),
    "einsum_reduce": (lambda a, b: T.einsum("ij,jk->i", a, b), lambda r: [uni(r, 2, 3), uni(r, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), lambda r: [uni(r, 2, 6)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), lambda r: [uni(r, 2, 3, 4)]),
    "slice_row": (lambda a: T.slice_row(a, 1), lambda r: [uni(r, 3, 4)]),
    "index": (lambda a: a[:, 1:3], lambda r: [uni(r, 3, 4)]),
    "index_gather": (lambda a: a[np.array([0, 2, 0])], lambda r: [uni(r, 3, 2)]),
    "concat": (lambda a, b: T.concat([a, b], axis=-1), lambda r: [uni(r, 2, 3), uni(r, 2, 2)]),
    "stack": (lambda a, b: T.stack([a, b], axis=1), lambda r: [uni(r, 2, 3), uni(r, 2, 3)]),
    "broadcast_to": (lambda a: T.broadcast_to(a, (3, 2, 4)), lambda r: [uni(r, 2, 1)]),
    "embedding": (lambda a: T.embedding(a, np.array([[0, 3], [3, 1]])), lambda r: [uni(r, 4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    build, make = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(check_op(build, make(rng), h=1e-6) for _ in range(TRIALS))
    assert worst < TOL, f"{name}: relative error {worst:.2e}"


def test_three_layer_composite_gradient():
    rng = np.random.default_rng(0)

    def net(x, w1, w2, w3):
        h = T.tanh(x @ w1)
        h = T.sigmoid(h @ w2)
        return T.softmax(h @ w3, axis=-1)

    for _ in range(20):
        inputs = [uni(rng, 2, 3), uni(rng, 3, 4), uni(rng, 4, 4), uni(rng, 4, 5)]
        assert check_op(net, inputs, h=1e-4) < TOL


def test_elementwise_reference_values():
    assert T.sigmoid(T.constant([0.0])).data.tolist() == [0.5]
    np.testing.assert_array_equal(T.softmax(T.constant(np.zeros(4))).data, np.full(4, 0.25))
    assert T.l2_norm(T.constant([3.0, 4.0])).item() == pytest.approx(5.0, abs=1e-12)


def test_backward_of_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_through_sigmoid_at_zero():
    w = Tensor([0.0], requires_grad=True)
    x = T.constant([1.0])
    T.backward(T.sum(T.sigmoid(w * x)))
    np.testing.assert_allclose(w.grad, [0.25])


def test_backward_rejects_non_scalar_and_detached():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * x)
    with pytest.raises(ValueError, match="detached"):
        T.backward(T.sum(T.constant([1.0])))
    with pytest.raises(ValueError, match="detached"):
        T.backward(T.sum(x).detach())


def test_unreachable_params_get_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([[3.0]], requires_grad=True)
    T.backward(T.sum(x), [x, y])
    np.testing.assert_array_equal(y.grad, np.zeros((1, 1)))


def test_gradient_accumulates_on_reuse():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.sum(x * x + x))
    np.testing.assert_allclose(x.grad, [7.0])


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        T.constant(np.ones((2, 3))) @ T.constant(np.ones((2, 3)))
    assert "matmul" in str(err.value) and "(2, 3)" in str(err.value)
    with pytest.raises(ShapeError, match="add"):
        T.constant(np.ones(3)) + T.constant(np.ones(4))


def test_non_finite_output_is_an_error():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(T.constant([0.0]))
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp(T.constant([1000.0]))


def test_l2_norm_gradient_at_origin_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.l2_norm(x))
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_no_grad_builds_no_tape():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad
    assert T.is_grad_enabled()


def test_dropout_identity_outside_training_and_scaled_inside():
    x = T.constant(np.ones(1000))
    assert T.dropout(x, 0.5, None, training=False) is x
    y = T.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.1


def test_embedding_range_check():
    w = T.constant(np.ones((3, 2)))
    with pytest.raises(IndexError, match="out of range"):
        T.embedding(w, [0, 3])


def test_forward_replay_is_bitwise_identical():
    def run():
        rng = np.random.default_rng(42)
        a, b = T.constant(rng.normal(size=(4, 5))), T.constant(rng.normal(size=(5, 3)))
        return T.softmax(T.tanh(a @ b), axis=0).data
    assert np.array_equal(run(), run())


finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_is_strictly_positive_simplex(x):
    p = T.softmax(T.constant(x), axis=-1).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_sigmoid_stays_in_unit_interval(x):
    s = T.sigmoid(T.constant(x)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s, 1 / (1 + np.exp(-x)), rtol=1e-12, atol=1e-15)
