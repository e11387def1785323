import math

import numpy as np
import pytest

from scaforge.nn.layers import (AvgPool1d, BatchNorm1d, Conv1d, Dense, Dropout,
                                Flatten, ReLU, cross_entropy, log_softmax)
from scaforge.nn.model import ConvBlockSpec, ResidualBlock


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar f() wrt array x, mutated in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
        it.iternext()
    return grad


def rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6))


def _weighted_loss(layer, x, r, train=True):
    return lambda: float((layer.forward(x, train=train) * r).sum())


def test_conv_identity_kernel_reproduces_input():
    rng = np.random.default_rng(0)
    conv = Conv1d(3, 3, kernel=11, padding=5, rng=rng)
    conv.w[...] = 0.0
    for c in range(3):
        conv.w[c, c, 5] = 1.0
    x = rng.normal(size=(2, 3, 20))
    assert np.allclose(conv.forward(x), x, atol=1e-12)


def test_conv_gradients():
    rng = np.random.default_rng(1)
    conv = Conv1d(2, 3, kernel=3, padding=1, rng=rng)
    x = rng.normal(size=(2, 2, 7))
    r = rng.normal(size=(2, 3, 7))
    f = _weighted_loss(conv, x, r)
    f()
    dx = conv.backward(r)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(conv.dw, numeric_grad(f, conv.w)) < 1e-4
    assert rel_error(conv.db, numeric_grad(f, conv.b)) < 1e-4


def test_batchnorm_train_statistics():
    # input variance must dominate eps=1e-5 for the unit-variance check
    rng = np.random.default_rng(2)
    bn = BatchNorm1d(4)
    x = rng.normal(3.0, 10.0, size=(8, 4, 10))
    out = bn.forward(x, train=True)
    assert np.all(np.abs(out.mean(axis=(0, 2))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2)) - 1.0) < 1e-6)


def test_batchnorm_running_stats_drive_eval():
    rng = np.random.default_rng(3)
    bn = BatchNorm1d(2, momentum=1.0)  # running stats = last batch
    x = rng.normal(5.0, 3.0, size=(16, 2, 8))
    bn.forward(x, train=True)
    out = bn.forward(x, train=False)
    assert np.all(np.abs(out.mean(axis=(0, 2))) < 1e-6)


def test_batchnorm_gradients_train_mode():
    rng = np.random.default_rng(4)
    bn = BatchNorm1d(3)
    x = rng.normal(size=(4, 3, 5))
    r = rng.normal(size=(4, 3, 5))
    f = _weighted_loss(bn, x, r, train=True)
    f()
    dx = bn.backward(r)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(bn.dgamma, numeric_grad(f, bn.gamma)) < 1e-4
    assert rel_error(bn.dbeta, numeric_grad(f, bn.beta)) < 1e-4


def test_avgpool_values_and_odd_length():
    pool = AvgPool1d()
    x = np.array([[[1.0, 3.0, 5.0, 7.0]]])
    assert np.array_equal(pool.forward(x), [[[2.0, 6.0]]])
    x = np.array([[[1.0, 3.0, 5.0, 7.0, 100.0]]])
    assert np.array_equal(pool.forward(x), [[[2.0, 6.0]]])  # tail dropped


def test_avgpool_gradients():
    rng = np.random.default_rng(5)
    pool = AvgPool1d()
    x = rng.normal(size=(2, 2, 9))
    r = rng.normal(size=(2, 2, 4))
    f = _weighted_loss(pool, x, r)
    f()
    dx = pool.backward(r)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert np.all(dx[:, :, 8] == 0.0)


def test_dense_gradients():
    rng = np.random.default_rng(6)
    dense = Dense(5, 4, rng)
    x = rng.normal(size=(3, 5))
    r = rng.normal(size=(3, 4))
    f = _weighted_loss(dense, x, r)
    f()
    dx = dense.backward(r)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(dense.dw, numeric_grad(f, dense.w)) < 1e-4
    assert rel_error(dense.db, numeric_grad(f, dense.b)) < 1e-4


def test_relu_masks_gradient():
    relu = ReLU()
    x = np.array([[-1.0, 2.0, 0.0]])
    out = relu.forward(x)
    assert np.array_equal(out, [[0.0, 2.0, 0.0]])
    assert np.array_equal(relu.backward(np.ones_like(x)), [[0.0, 1.0, 0.0]])


def test_flatten_round_trip():
    rng = np.random.default_rng(7)
    flat = Flatten()
    x = rng.normal(size=(3, 4, 5))
    out = flat.forward(x)
    assert out.shape == (3, 20)
    assert np.array_equal(flat.backward(out), x)


def test_dropout_eval_identity_and_train_scaling():
    rng = np.random.default_rng(8)
    drop = Dropout(0.5)
    x = np.ones((4, 6))
    assert np.array_equal(drop.forward(x, train=False), x)
    out = drop.forward(x, train=True, rng=rng)
    kept = out != 0.0
    assert np.all(out[kept] == 2.0)  # inverted scaling 1 / (1 - p)
    dout = np.ones_like(x)
    assert np.array_equal(drop.backward(dout), np.where(kept, 2.0, 0.0))


def test_dropout_preserves_expected_activation():
    # mean over many masks must match the eval-mode activation within 2%
    rng = np.random.default_rng(9)
    drop = Dropout(0.5)
    x = np.full((1, 50), 3.0)
    n_masks = 10_000
    total = sum(drop.forward(x, train=True, rng=rng).mean() for _ in range(n_masks))
    eval_activation = drop.forward(x, train=False).mean()
    assert abs(total / n_masks - eval_activation) / eval_activation < 0.02


def test_dropout_rejects_bad_p():
    with pytest.raises(ValueError):
        Dropout(1.0)
    with pytest.raises(ValueError):
        Dropout(-0.1)


def test_plain_block_identity_kernel_with_bn_bypassed():
    from scaforge.nn.model import PlainBlock

    rng = np.random.default_rng(16)
    spec = ConvBlockSpec(in_channels=2, out_channels=2, kernel=11, padding=5,
                         batch_norm=False, pool=False)
    block = PlainBlock(spec, rng)
    block.conv.w[...] = 0.0
    for c in range(2):
        block.conv.w[c, c, 5] = 1.0
    block.conv.b[...] = 0.0
    x = np.abs(rng.normal(size=(2, 2, 12)))  # positive: ReLU is identity
    assert np.allclose(block.forward(x), x, atol=1e-12)


def test_residual_zero_main_path_is_relu_identity():
    rng = np.random.default_rng(10)
    spec = ConvBlockSpec(in_channels=3, out_channels=3, kernel=3, padding=1)
    block = ResidualBlock(spec, rng)
    block.conv1.w[...] = 0.0
    block.conv1.b[...] = 0.0
    block.conv2.w[...] = 0.0
    block.conv2.b[...] = 0.0
    x = rng.normal(size=(2, 3, 8))
    out = block.forward(x, train=True)
    assert np.allclose(out, np.maximum(x, 0.0), atol=1e-12)


def test_residual_channel_mismatch_uses_projection():
    rng = np.random.default_rng(11)
    spec = ConvBlockSpec(in_channels=2, out_channels=5, kernel=3, padding=1)
    block = ResidualBlock(spec, rng)
    assert block.shortcut is not None
    out = block.forward(rng.normal(size=(3, 2, 10)))
    assert out.shape == (3, 5, 10)


def test_residual_gradient_wrt_input():
    rng = np.random.default_rng(12)
    spec = ConvBlockSpec(in_channels=2, out_channels=4, kernel=3, padding=1)
    block = ResidualBlock(spec, rng)
    x = rng.normal(size=(3, 2, 6))
    r = rng.normal(size=(3, 4, 6))
    f = _weighted_loss(block, x, r, train=True)
    f()
    dx = block.backward(r)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4


def test_residual_gradient_wrt_parameters():
    rng = np.random.default_rng(13)
    spec = ConvBlockSpec(in_channels=2, out_channels=2, kernel=3, padding=1)
    block = ResidualBlock(spec, rng)
    x = rng.normal(size=(2, 2, 5))
    r = rng.normal(size=(2, 2, 5))
    f = _weighted_loss(block, x, r, train=True)
    f()
    block.backward(r)
    for param, grad in zip(block.params, block.grads):
        assert rel_error(grad, numeric_grad(f, param)) < 1e-4


def test_cross_entropy_uniform_and_confident():
    logits = np.zeros((4, 256))
    loss, _ = cross_entropy(logits, np.array([0, 10, 200, 255]))
    assert loss == pytest.approx(math.log(256.0), abs=1e-12)

    confident = np.full((2, 256), -1000.0)
    confident[[0, 1], [7, 9]] = 1000.0
    loss, _ = cross_entropy(confident, np.array([7, 9]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(14)
    logits = rng.normal(size=(3, 8))
    labels = np.array([1, 0, 7])

    def f():
        return cross_entropy(logits, labels)[0]

    _, dlogits = cross_entropy(logits, labels)
    assert rel_error(dlogits, numeric_grad(f, logits)) < 1e-4


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 4)), np.array([0, 4]))


def test_log_softmax_shift_invariance():
    rng = np.random.default_rng(15)
    logits = rng.normal(size=(5, 10))
    a = log_softmax(logits)
    b = log_softmax(logits + 37.5)
    assert np.allclose(a, b, atol=1e-9)
    assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))
