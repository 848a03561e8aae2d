import math

import numpy as np
import pytest

from shared.learning.nnet import (LINEAR, Mlp, add_grads, backward, clip_grad_norm, cosine_lr, forward, grad_norm,
                                  load_mlp, save_mlp, sgd_step)
from shared.utils.errors import ShapeMismatch, StaleTape

pytestmark = pytest.mark.nnet


def _loss(net: Mlp, x: np.ndarray, w: np.ndarray) -> float:
    y, _ = forward(net, x)
    return float(np.sum(y * w))


def test_init_bounds_and_shapes():
    net = Mlp([4, 6, 2], seed=0)
    assert [w.shape for w in net.weights] == [(6, 4), (2, 6)]
    assert np.all(np.abs(net.weights[0]) <= math.sqrt(3.0 / 4))
    assert net.n_params == 6 * 4 + 6 + 2 * 6 + 2
    assert net.activations == ['tanh', LINEAR]


def test_zero_output_predicts_zero():
    net = Mlp([3, 5, 1], seed=1, zero_output=True)
    y, _ = forward(net, np.ones(3))
    assert y.shape == (1,)
    assert y[0] == 0.0


def test_batched_matches_single():
    net = Mlp([3, 5, 2], seed=2)
    x = np.random.default_rng(0).normal(size=(4, 3))
    batch, _ = forward(net, x)
    for i in range(4):
        single, _ = forward(net, x[i])
        assert np.allclose(batch[i], single)


def test_forward_rejects_wrong_width():
    with pytest.raises(ShapeMismatch):
        forward(Mlp([3, 1]), np.ones(4))


def test_gradients_match_finite_differences():
    net = Mlp([3, 4, 4, 2], seed=3)
    rng = np.random.default_rng(1)
    x = rng.normal(size=3)
    w = rng.normal(size=2)
    _, tape = forward(net, x)
    dx, grads = backward(net, tape, w)
    eps = 1e-6
    for p, g in zip(net.parameters(), grads):
        flat, gflat = p.ravel(), g.ravel()
        for i in range(0, flat.size, max(1, flat.size // 4)):
            old = flat[i]
            flat[i] = old + eps
            up = _loss(net, x, w)
            flat[i] = old - eps
            down = _loss(net, x, w)
            flat[i] = old
            assert gflat[i] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-7)
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        numeric = (_loss(net, x + e, w) - _loss(net, x - e, w)) / (2 * eps)
        assert dx[i] == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def _check_against_central_differences(net: Mlp, loss, grads, x, dx, eps: float = 1e-6) -> None:
    for p, g in zip(net.parameters(), grads):
        flat, gflat = p.ravel(), g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss(x)
            flat[i] = old - eps
            down = loss(x)
            flat[i] = old
            assert gflat[i] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-8)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        assert dx[i] == pytest.approx((loss(x + e) - loss(x - e)) / (2 * eps), rel=1e-5, abs=1e-8)


def test_gradients_on_random_small_nets():
    rng = np.random.default_rng(11)
    for trial in range(100):
        widths = [int(w) for w in rng.integers(1, 9, size=int(rng.integers(2, 5)))]
        net = Mlp(widths, seed=trial)
        x = rng.normal(size=widths[0])
        w = rng.normal(size=widths[-1])
        _, tape = forward(net, x)
        dx, grads = backward(net, tape, w)
        _check_against_central_differences(net, lambda v: _loss(net, v, w), grads, x, dx)


@pytest.mark.parametrize("T", [1, 4, 10])
def test_gradients_through_chained_forward(T):
    """同一网络连续前向 T 次（输出作为下一次输入），逐步反向累加梯度"""
    net = Mlp([4, 6, 4], seed=5)
    rng = np.random.default_rng(T)
    x0 = rng.normal(size=4)
    w = rng.normal(size=4)

    def loss(x):
        for _ in range(T):
            x, _ = forward(net, x)
        return float(w @ x)

    tapes = []
    x = x0
    for _ in range(T):
        x, tape = forward(net, x)
        tapes.append(tape)
    grads = net.zero_grads()
    dy = w
    for tape in reversed(tapes):
        dy, g = backward(net, tape, dy)
        add_grads(grads, g)
    _check_against_central_differences(net, loss, grads, x0, dy)


def test_backward_without_params():
    net = Mlp([2, 3, 1], seed=0)
    _, tape = forward(net, np.ones(2))
    dx, grads = backward(net, tape, np.ones(1), params=False)
    assert grads is None
    assert dx.shape == (2,)


def test_stale_tape_after_update():
    net = Mlp([2, 3, 1], seed=0)
    _, tape = forward(net, np.ones(2))
    _, grads = backward(net, tape, np.ones(1))
    sgd_step(net, grads, lr=0.1)
    with pytest.raises(StaleTape):
        backward(net, tape, np.ones(1))
    with pytest.raises(StaleTape):
        backward(net.copy(), tape, np.ones(1))


def test_backward_rejects_wrong_dy_shape():
    net = Mlp([2, 3, 1], seed=0)
    _, tape = forward(net, np.ones(2))
    with pytest.raises(ShapeMismatch):
        backward(net, tape, np.ones(2))


def test_sgd_step_with_weight_decay():
    net = Mlp([1, 1], seed=0)
    w0 = net.weights[0].copy()
    grads = net.zero_grads()
    sgd_step(net, grads, lr=0.5, weight_decay=0.1)
    assert np.allclose(net.weights[0], w0 * (1 - 0.05))
    with pytest.raises(ShapeMismatch):
        sgd_step(net, grads[:1], lr=0.1)


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert grad_norm(clipped) == pytest.approx(1.0)
    same, _ = clip_grad_norm(grads, 10.0)
    assert same is grads


def test_cosine_lr_schedule():
    assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
    assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)
    assert cosine_lr(0.1, 10, 10) == pytest.approx(0.0)
    assert cosine_lr(0.1, 3, 0) == 0.1


def test_save_load_is_exact(tmp_path):
    net = Mlp([3, 7, 2], seed=4)
    path = tmp_path / 'net.json'
    save_mlp(path, net)
    loaded = load_mlp(path)
    assert loaded.widths == net.widths
    for a, b in zip(loaded.parameters(), net.parameters()):
        assert np.array_equal(a, b)
