import numpy as np
import pytest

from ratelab.nets import (Adam, GRU, MLP, grad_check, max_rel_error, numeric_grads,
                          param_count, polyak_update, sigmoid)


def test_sigmoid_matches_reference():
    x = np.linspace(-30, 30, 301)
    ref = 1.0 / (1.0 + np.exp(-x))
    assert np.allclose(sigmoid(x.copy()), ref, atol=1e-12)
    assert sigmoid(np.array([1000.0]))[0] == pytest.approx(1.0)
    assert sigmoid(np.array([-1000.0]))[0] == pytest.approx(0.0)


def test_mlp_shapes_and_param_count():
    rng = np.random.default_rng(0)
    actor = MLP([32, 256, 256, 1], rng)
    critic = MLP([33, 256, 256, 128], rng)
    gru = GRU(11, 32, rng)
    assert param_count(actor) == 74_497
    assert param_count(critic) == 107_392
    assert param_count(gru) == 4_224
    # deployable policy = encoder + actor, the paper-scale ~79k figure
    assert param_count(gru) + param_count(actor) == 78_721
    out = actor.forward(rng.standard_normal((5, 32)).astype(np.float32))
    assert out.shape == (5, 1)


def test_gru_zero_fixed_point():
    rng = np.random.default_rng(0)
    gru = GRU(11, 32, rng, dtype=np.float64)
    for k in gru.params:
        gru.params[k][:] = 0.0
    h = gru.forward(np.zeros((4, 20, 11)))
    assert np.abs(h).max() == 0.0


def test_gru_order_sensitivity():
    rng = np.random.default_rng(3)
    gru = GRU(6, 16, rng, dtype=np.float64)
    x = rng.standard_normal((2, 10, 6))
    h1 = gru.forward(x)
    h2 = gru.forward(x[:, ::-1, :].copy())
    assert np.abs(h1 - h2).max() > 1e-3


def test_gru_finite_on_extreme_inputs():
    rng = np.random.default_rng(4)
    gru = GRU(11, 32, rng)
    h = gru.forward(np.ones((3, 20, 11), dtype=np.float32))
    assert np.isfinite(h).all()


def test_gru_grad_check():
    rng = np.random.default_rng(0)
    gru = GRU(5, 8, rng, dtype=np.float64)
    x = rng.standard_normal((3, 7, 5))
    assert grad_check(gru, x) < 1e-4


def test_mlp_grad_check():
    rng = np.random.default_rng(1)
    mlp = MLP([6, 16, 16, 4], rng, dtype=np.float64)
    x = rng.standard_normal((4, 6))
    assert grad_check(mlp, x) < 1e-4


def test_linear_layer_grad_check_tight():
    rng = np.random.default_rng(2)
    lin = MLP([7, 3], rng, dtype=np.float64)  # single linear layer: exact case
    x = rng.standard_normal((5, 7))
    assert grad_check(lin, x) < 1e-7


def test_mlp_input_gradient():
    rng = np.random.default_rng(5)
    mlp = MLP([6, 12, 12, 2], rng, dtype=np.float64)
    x = rng.standard_normal((3, 6))
    proj = rng.standard_normal((3, 2))
    out, cache = mlp.forward(x, want_cache=True)
    mlp.zero_grads()
    dx = mlp.backward(proj, cache)
    eps = 1e-6
    num = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            num[i, j] = ((mlp.forward(xp) * proj).sum()
                         - (mlp.forward(xm) * proj).sum()) / (2 * eps)
    assert np.abs(dx - num).max() < 1e-7


def test_backward_param_grads_flag():
    rng = np.random.default_rng(6)
    mlp = MLP([5, 8, 2], rng, dtype=np.float64)
    x = rng.standard_normal((3, 5))
    _, cache = mlp.forward(x, want_cache=True)
    mlp.zero_grads()
    mlp.backward(np.ones((3, 2)), cache, param_grads=False)
    assert all(np.all(g == 0) for g in mlp.grads.values())


def test_adam_moves_toward_minimum():
    rng = np.random.default_rng(7)
    params = {"w": np.array([5.0, -3.0])}
    adam = Adam(params, lr=0.05)
    for _ in range(500):
        grads = {"w": 2 * params["w"]}  # d/dw of w^2
        adam.step(params, grads)
    assert np.abs(params["w"]).max() < 1e-2


def test_polyak_update_contracts():
    rng = np.random.default_rng(8)
    target = {"w": np.zeros(4)}
    online = {"w": np.ones(4)}
    polyak_update(target, online, tau=0.25)
    assert np.allclose(target["w"], 0.25)
    for _ in range(100):
        polyak_update(target, online, tau=0.25)
    assert np.allclose(target["w"], 1.0, atol=1e-9)


def test_numeric_grad_helper_on_quadratic():
    params = {"w": np.array([1.0, 2.0])}
    loss = lambda: float((params["w"] ** 2).sum())
    num = numeric_grads(params, loss, eps=1e-6)
    assert max_rel_error({"w": 2 * params["w"]}, num) < 1e-8
