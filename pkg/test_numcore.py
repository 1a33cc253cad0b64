import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from backend import numcore as nc
from backend.errors import NonFiniteError, ShapeError
from backend.numcore import AdamState, ParamBundle, Tensor


def grads_of(fn, *values):
    tensors = [Tensor(v, requires_grad=True) for v in values]
    with nc.recording() as tape:
        out = fn(*tensors)
    gmap = nc.backward(out, tape, tensors)
    return out, [gmap[t.id] for t in tensors]


# ------------------------
# Forward values
# ------------------------
def test_log_sum_exp_of_two_zeros_is_ln2():
    out = nc.log_sum_exp(Tensor([0.0, 0.0]))
    assert out.item() == pytest.approx(math.log(2.0))


def test_softplus_minus_identity_at_one():
    out = nc.softplus(Tensor(1.0)) - Tensor(1.0)
    assert out.item() == pytest.approx(math.log(math.e + 1.0) - 1.0, abs=1e-12)
    assert out.item() == pytest.approx(0.3133, abs=1e-4)


def test_log_softmax_rows_normalize():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]))
    probs = np.exp(nc.log_softmax(x).data)
    np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0])


def test_large_logits_stay_finite():
    out = nc.log_sum_exp(Tensor([1000.0, 1000.0]))
    assert out.item() == pytest.approx(1000.0 + math.log(2.0))


def test_batched_matmul_broadcasts_weights():
    a = np.arange(12, dtype=float).reshape(2, 2, 3)
    w = np.ones((3, 4))
    out = nc.matmul(Tensor(a), Tensor(w))
    np.testing.assert_allclose(out.data, a @ w)


def test_transpose_swaps_last_two_axes():
    a = Tensor(np.zeros((2, 3, 5)))
    assert a.T.shape == (2, 5, 3)


def test_tensor_rejects_non_finite_values():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_item_needs_single_element():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


# ------------------------
# Gradients
# ------------------------
def test_gradient_of_sum_of_squares():
    _, (g,) = grads_of(lambda x: (x * x).sum(), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_allclose(g, [2.0, -4.0, 6.0])


def test_gradient_accumulates_over_reuse():
    _, (g,) = grads_of(lambda x: (x * x + x).sum(), np.array([0.5]))
    np.testing.assert_allclose(g, [2.0])


def test_broadcast_add_reduces_gradient_to_input_shape():
    _, (ga, gb) = grads_of(lambda a, b: (a + b).sum(), np.ones((3, 4)), np.ones(4))
    np.testing.assert_allclose(ga, np.ones((3, 4)))
    np.testing.assert_allclose(gb, np.full(4, 3.0))


def test_disconnected_parameter_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with nc.recording() as tape:
        out = (a * a).sum()
    gmap = nc.backward(out, tape, [a, b])
    np.testing.assert_array_equal(gmap[b.id], np.zeros(3))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with nc.recording() as tape:
        out = x * 2.0
    with pytest.raises(ShapeError):
        nc.backward(out, tape, [x])


def test_no_recording_leaves_tape_empty():
    x = Tensor(np.ones(3), requires_grad=True)
    with nc.recording() as tape:
        with nc.no_recording():
            (x * x).sum()
    assert len(tape) == 0


@pytest.mark.parametrize("fn", [
    lambda x: nc.log_sum_exp(x, axis=-1).sum(),
    lambda x: nc.softplus(x).mean(),
    lambda x: (nc.tanh(x) * nc.relu(x + 0.3)).sum(),
    lambda x: nc.log_softmax(x, axis=-1).sum(),
    lambda x: nc.sqrt(x * x + 1.0).sum(),
    lambda x: nc.gather_rows(x, [2, 0, 2]).sum(),
    lambda x: nc.concat([x, x * 2.0], axis=0).mean(),
    lambda x: nc.matmul(x, x.T).sum(),
    lambda x: nc.reshape(x, (12,)).exp().sum(),
])
def test_primitive_gradients_match_finite_differences(fn):
    point = np.random.default_rng(3).normal(size=(3, 4))
    assert nc.finite_diff_check(fn, point) < 1e-5


def test_linear_layer_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    point = {"x": rng.normal(size=(5, 3)), "w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
    fn = lambda p: nc.tanh(nc.linear(p["x"], p["w"], p["b"])).sum()
    assert nc.finite_diff_check(fn, point) < 1e-5


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3.0, 3.0)))
def test_softmax_gradient_property(x):
    assert nc.finite_diff_check(lambda t: (nc.softmax(t) * t).sum(), x) < 1e-4


# ------------------------
# Adam
# ------------------------
def test_adam_first_step_moves_by_learning_rate():
    params = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
    grads = {"w": np.array([0.5, -3.0])}
    new, state = nc.adam_step(params, grads, AdamState(lr=0.1))
    np.testing.assert_allclose(new["w"].data, [0.9, -0.9], atol=1e-6)
    assert state.step == 1
    assert new["w"].requires_grad


def test_adam_rejects_mismatched_gradient():
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(ShapeError):
        nc.adam_step(params, {"w": np.zeros(2)}, AdamState())


def test_adam_does_not_mutate_input_state():
    params = {"w": Tensor(np.zeros(2), requires_grad=True)}
    state = AdamState(lr=0.1)
    nc.adam_step(params, {"w": np.ones(2)}, state)
    assert state.step == 0 and state.m == {}


def test_train_step_reduces_quadratic():
    params = {"w": Tensor(np.array([3.0, -2.0]), requires_grad=True)}
    state = AdamState(lr=0.1)
    loss_fn = lambda p: ((p["w"] * p["w"]).sum(), {})
    first, params, state, _ = nc.train_step(loss_fn, params, state)
    for _ in range(50):
        last, params, state, _ = nc.train_step(loss_fn, params, state)
    assert last < first


# ------------------------
# Parameter bundles
# ------------------------
def test_bundle_flatten_roundtrip():
    bundles = {
        "a": ParamBundle({"w": Tensor(np.ones((2, 2)))}),
        "b": ParamBundle({"w": Tensor(np.zeros(3)), "c": Tensor(np.ones(1))}),
    }
    flat = nc.flatten_bundles(bundles)
    assert sorted(flat) == ["a.w", "b.c", "b.w"]
    back = nc.unflatten_bundles(bundles, flat)
    assert all(back[k].same_values(bundles[k]) for k in bundles)


def test_frozen_and_trainable_flags():
    b = ParamBundle({"w": Tensor(np.ones(2), requires_grad=True)})
    assert not b.frozen()["w"].requires_grad
    assert b.frozen().trainable()["w"].requires_grad


def test_glorot_limits():
    w = nc.glorot(np.random.default_rng(0), 10, 6)
    assert w.shape == (10, 6)
    assert np.abs(w).max() <= math.sqrt(6.0 / 16.0)
