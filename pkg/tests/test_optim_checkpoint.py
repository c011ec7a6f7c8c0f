import math

import numpy as np
import pytest

from dymus.checkpoint import load_checkpoint, save_checkpoint
from dymus.optim import Adam, AdamState, adam_step
from dymus.tensor import Tensor


def adam_oracle(p, g, lr, b1=0.9, b2=0.999, eps=1e-8, steps=1):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_single_step_from_one_with_unit_grad():
    w = Tensor(np.array(1.0), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    w.grad = np.array(1.0)
    opt.step()
    assert w.data == pytest.approx(0.9, abs=1e-6)
    assert w.data == pytest.approx(adam_oracle(1.0, 1.0, 0.1), abs=1e-15)


def test_three_steps_match_scalar_oracle():
    w = Tensor(np.array(0.3), requires_grad=True)
    opt = Adam({"w": w}, lr=0.05)
    for _ in range(3):
        w.grad = np.array(-0.7)
        opt.step()
    assert w.data == pytest.approx(adam_oracle(0.3, -0.7, 0.05, steps=3), abs=1e-14)


def test_zero_gradient_is_fixed_point():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    w.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_step_count_and_grad_reset():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01)
    for _ in range(2):
        w.grad = np.full(3, 0.5)
        opt.step()
    assert opt.state.step_count == 2
    np.testing.assert_array_equal(w.grad, np.zeros(3))
    assert opt.state.first_moment["w"].shape == w.shape


def test_missing_gradient_names_parameter():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a, "layer.b": b})
    a.grad = np.ones(2)
    with pytest.raises(ValueError, match="layer.b"):
        opt.step()


def test_functional_step_updates_state():
    w = Tensor(np.array(1.0), requires_grad=True)
    state = AdamState(learning_rate=0.1)
    w.grad = np.array(1.0)
    state = adam_step({"w": w}, state)
    assert state.step_count == 1
    assert w.data == pytest.approx(0.9, abs=1e-6)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"dymus.gru.purchase.W_ir": rng.normal(size=(3, 3)), "dymus.routing.alpha": np.array(1.0 / 3.0),
              "dymus.routing.W_dc": rng.normal(size=(2, 2, 1, 3)) * 1e-300}
    save_checkpoint(tmp_path / "c.json", arrays, {"note": "x"})
    meta, back = load_checkpoint(tmp_path / "c.json")
    assert meta == {"note": "x"}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert np.array_equal(back[k], v)
