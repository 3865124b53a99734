import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_conv, tiny_mlp
from oracles import scalar_mlp_loss
from rigl.arch import mlp
from rigl.params import MaskedParameter
from rigl.sparsity import allocate_custom, sparsify_model
from rigl.tensor import (MAX_FD_PARAMS, Model, NumericalError, OptimizerConfig, OptimizerState,
                         ShapeError, StaleCacheError, backward, finite_difference_gradient,
                         flatten_grads, forward, init_model, loss_and_grad, relative_error,
                         sgd_momentum_step)


def randomize_biases(model, rng, scale=0.3):
    # nonzero biases keep pre-activations off the ReLU kink
    for b in model.biases:
        b[...] = rng.uniform(-scale, scale, b.shape)
    model.touch()
    return model


def test_zero_weights_give_log_c(rng):
    arch = tiny_mlp()
    model = init_model(arch, 0)
    for w in model.weights:
        w.values[...] = 0.0
    x = rng.normal(size=(7, 12))
    loss, _ = forward(model, x, rng.integers(0, 4, 7))
    assert abs(loss - math.log(4)) < 1e-12


def test_single_layer_closed_form():
    arch = mlp("one", [3, 3])
    model = Model(arch, [np.eye(3)], [np.zeros(3)])
    x = np.array([[2.0, 0.5, -1.0]])
    loss, _ = forward(model, x, [0])
    expected = -2.0 + math.log(math.exp(2.0) + math.exp(0.5) + math.exp(-1.0))
    assert abs(loss - expected) < 1e-14


def test_forward_matches_scalar_loop(rng):
    arch = mlp("two", [5, 4, 3])
    model = randomize_biases(init_model(arch, 3), rng)
    x = rng.normal(size=(4, 5))
    y = rng.integers(0, 3, 4)
    loss, _ = forward(model, x, y, weight_decay=1e-3)
    ref = scalar_mlp_loss([w.values for w in model.weights], model.biases, x, y, 1e-3)
    assert abs(loss - ref) < 1e-10


def test_forward_is_deterministic(rng):
    model = init_model(tiny_mlp(), 1)
    x, y = rng.normal(size=(9, 12)), rng.integers(0, 4, 9)
    assert forward(model, x, y)[0] == forward(model, x, y)[0]


def test_shape_mismatch_is_rejected(rng):
    model = init_model(tiny_mlp(), 1)
    with pytest.raises(ShapeError):
        forward(model, rng.normal(size=(3, 12)), [0, 1])
    with pytest.raises(ShapeError):
        forward(model, rng.normal(size=(3, 11)), [0, 1, 2])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(rng):
    model = init_model(tiny_mlp(), 1)
    model.weights[0].values[0, 0] = np.inf
    with pytest.raises(NumericalError):
        forward(model, np.ones((2, 12)), [0, 1])


def test_stale_and_reused_cache(rng):
    model = init_model(tiny_mlp(), 1)
    x, y = rng.normal(size=(3, 12)), [0, 1, 2]
    _, cache = forward(model, x, y)
    backward(model, cache)
    with pytest.raises(StaleCacheError):
        backward(model, cache)
    _, cache = forward(model, x, y)
    model.touch()
    with pytest.raises(StaleCacheError):
        backward(model, cache)
    _, cache = forward(model, x, y)
    with pytest.raises(StaleCacheError):
        backward(model.copy(), cache)


def _fd_check(model, x, y, wd=0.0, count=None):
    _, grads = loss_and_grad(model, x, y, wd)
    fd = finite_difference_gradient(model, x, y, 1e-5, wd, count=count)
    a, b = flatten_grads(grads), flatten_grads(fd)
    if count is not None:
        a, b = a[:count], b[:count]
    return relative_error(a, b).max()


@pytest.mark.parametrize("backend_density", [1.0, 0.2])
def test_backward_matches_finite_differences_mlp(rng, backend_density):
    arch = tiny_mlp((10, 9, 7, 4))
    model = randomize_biases(init_model(arch, 5), rng)
    if backend_density < 1:
        sparsify_model(model, allocate_custom(arch, (0.8, 0.8, 0.0)), 2)
    x, y = rng.normal(size=(6, 10)), rng.integers(0, 4, 6)
    assert _fd_check(model, x, y, wd=5e-4) < 1e-4


def test_backward_matches_finite_differences_conv(rng):
    arch = tiny_conv()
    model = randomize_biases(init_model(arch, 2), rng)
    sparsify_model(model, allocate_custom(arch, (0.3, 0.5, 0.5, 0.0)), 4)
    x, y = rng.normal(size=(3, 4, 4, 2)), rng.integers(0, 3, 3)
    assert _fd_check(model, x, y, wd=1e-3) < 1e-4


def test_masked_gradient_equals_dense_gradient_at_zero(rng):
    arch = tiny_mlp()
    model = randomize_biases(init_model(arch, 7), rng)
    sparsify_model(model, allocate_custom(arch, (0.9, 0.9, 0.9)), 1)
    dense = Model(arch, [w.values.copy() for w in model.weights], [b.copy() for b in model.biases])
    x, y = rng.normal(size=(5, 12)), rng.integers(0, 4, 5)
    _, g_sparse = loss_and_grad(model, x, y, 1e-3, dense=True, backend="sparse")
    _, g_dense = loss_and_grad(dense, x, y, 1e-3, dense=True, backend="dense")
    for (a, _), (b, _) in zip(g_sparse, g_dense):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_sparse_only_gradient_fills_active_entries(rng):
    arch = tiny_mlp()
    model = randomize_biases(init_model(arch, 7), rng)
    sparsify_model(model, allocate_custom(arch, (0.9, 0.9, 0.9)), 1)
    x, y = rng.normal(size=(5, 12)), rng.integers(0, 4, 5)
    _, full = loss_and_grad(model, x, y, 1e-3, dense=True, backend="sparse")
    _, part = loss_and_grad(model, x, y, 1e-3, dense=False, backend="sparse")
    for w, (a, _), (b, _) in zip(model.weights, full, part):
        np.testing.assert_allclose(b[w.mask], a[w.mask], rtol=1e-12, atol=1e-15)
        assert not b[~w.mask].any()


def test_masked_weight_with_dead_upstream_has_zero_gradient(rng):
    arch = mlp("m", [3, 2, 2])
    w1 = np.array([[1.0, -1.0], [0.5, -0.5], [0.2, -0.3]])
    w2 = MaskedParameter(np.array([[0.7, 0.1], [0.4, 0.2]]), np.array([[True, True], [False, True]]))
    model = Model(arch, [w1, w2], [np.zeros(2), np.zeros(2)])
    x = np.array([[1.0, 1.0, 1.0]])  # hidden unit 1 is negative, so relu gives 0
    _, grads = loss_and_grad(model, x, [0])
    assert grads[1][0][1, 0] == 0.0


def test_fd_zero_for_constant_output(rng):
    arch = mlp("m", [4, 3, 2])
    model = init_model(arch, 0)
    model.weights[1].values[...] = 0.0
    model.weights[0].values[...] = -1.0  # hidden layer dead on positive inputs
    x = np.abs(rng.normal(size=(3, 4))) + 0.1
    fd = finite_difference_gradient(model, x, [0, 1, 0])
    assert np.abs(flatten_grads(fd)[:15]).max() < 1e-10


def test_linear_mse_exact_gradient(rng):
    arch = mlp("lin", [3, 2])
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    model = Model(arch, [w], [b])
    x, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    _, grads = loss_and_grad(model, x, t, loss="mse")
    resid = x @ w + b - t
    np.testing.assert_allclose(grads[0][0], x.T @ resid / 4, rtol=1e-12)
    np.testing.assert_allclose(grads[0][1], resid.sum(axis=0) / 4, rtol=1e-12)
    fd = finite_difference_gradient(model, x, t, loss="mse")
    np.testing.assert_allclose(flatten_grads(fd), flatten_grads(grads), rtol=1e-7, atol=1e-9)


def test_fd_refuses_large_models():
    model = init_model(mlp("big", [400, 300]), 0)
    with pytest.raises(ValueError):
        finite_difference_gradient(model, np.zeros((1, 400)), [0], max_params=MAX_FD_PARAMS)


def test_fd_agrees_on_lenet_first_100(rng):
    from rigl.arch import lenet_300_100
    model = randomize_biases(init_model(lenet_300_100(), 0), rng, 0.05)
    # MNIST pixel 0 is always blank, which would make these entries trivially 0
    x = rng.uniform(0.0, 1.0, size=(8, 28, 28, 1))
    y = rng.integers(0, 10, 8)
    assert _fd_check(model, x, y, wd=5e-4, count=100) < 1e-4


# optimizer


def _one_layer(values, mask=None):
    arch = mlp("o", [2, 2])
    return Model(arch, [MaskedParameter(values, mask)], [np.zeros(2)])


def test_vanilla_sgd_step():
    model = _one_layer(np.ones((2, 2)), np.array([[True, False], [True, True]]))
    state = OptimizerState(model, OptimizerConfig(lr=1.0, momentum=0.0, weight_decay=0.0))
    g = np.array([[0.5, 2.0], [-1.0, 0.25]])
    sgd_momentum_step(model, [(g, np.array([1.0, -1.0]))], state, 0)
    np.testing.assert_array_equal(model.weights[0].values, [[0.5, 0.0], [2.0, 0.75]])
    np.testing.assert_array_equal(model.biases[0], [-1.0, 1.0])


def test_two_momentum_steps_by_hand():
    model = _one_layer(np.full((2, 2), 1.0))
    state = OptimizerState(model, OptimizerConfig(lr=0.1, momentum=0.9, weight_decay=0.0))
    g1 = np.full((2, 2), 1.0)
    g2 = np.full((2, 2), 2.0)
    zb = np.zeros(2)
    sgd_momentum_step(model, [(g1, zb)], state, 0)
    sgd_momentum_step(model, [(g2, zb)], state, 1)
    # buf1 = 1, w1 = 0.9; buf2 = 0.9 + 2 = 2.9, w2 = 0.9 - 0.29 = 0.61
    np.testing.assert_allclose(state.weight_buffers[0], 2.9)
    np.testing.assert_allclose(model.weights[0].values, 0.61, rtol=1e-15)


def test_lr_anchors():
    cfg = OptimizerConfig(lr=1.0, lr_anchors=(10, 20), lr_decay=0.5)
    assert [cfg.lr_at(t) for t in (0, 9, 10, 19, 20, 99)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 6))
def test_masked_positions_stay_zero(seed, steps):
    rng = np.random.default_rng(seed)
    arch = tiny_mlp()
    model = init_model(arch, seed)
    sparsify_model(model, allocate_custom(arch, (0.7, 0.5, 0.2)), seed)
    state = OptimizerState(model, OptimizerConfig(lr=0.5, momentum=0.9, weight_decay=1e-2))
    for t in range(steps):
        x, y = rng.normal(size=(4, 12)), rng.integers(0, 4, 4)
        _, grads = loss_and_grad(model, x, y, 1e-2, dense=True)
        sgd_momentum_step(model, grads, state, t)
    for w in model.weights:
        assert not w.values[~w.mask].any()
