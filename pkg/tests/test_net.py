import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adclab.checks import _random_net, gradient_agreement
from adclab.errors import DimensionError, LabelError, NumericError, ShapeError, UninitializedHeadError
from adclab.net import (
    SGD,
    Conv2D,
    CrossEntropy,
    Dense,
    Network,
    PrototypeMSE,
    ReLU,
    convnet,
    load_network,
    mlp,
    save_network,
    sgd_step,
    softmax,
)

from conftest import identity_net, linear_net, numeric_grad, two_layer


def test_identity_dense_passes_input_through():
    v = np.array([[1.5, -2.0, 0.25]])
    assert np.array_equal(identity_net(3).forward_features(v), v)


def test_zero_weights_give_zero_embedding():
    net = Network([Dense(np.zeros((4, 3)), np.zeros(4)), ReLU()], 3, dtype=np.float64)
    assert np.all(net.forward_features(np.ones((2, 3))) == 0)


def test_forward_matches_hand_chain(rng):
    net, (W1, b1, W2, b2) = two_layer(rng)
    x = rng.standard_normal((6, 5))
    want = np.maximum(x @ W1.T + b1, 0) @ W2.T + b2
    assert np.allclose(net.forward_features(x), want, atol=1e-12)
    net.head = rng.standard_normal((3, 4))
    assert np.allclose(net.forward_logits(x), want @ net.head.T, atol=1e-12)


def test_identity_head_and_zero_head():
    net = identity_net(3)
    e = np.array([[0.3, -1.0, 2.0]])
    net.head = np.eye(3)
    assert np.allclose(net.forward_logits(e), e)
    net.head = np.zeros((4, 3))
    assert np.allclose(softmax(net.forward_logits(e)), 0.25)


def test_empty_head_raises():
    with pytest.raises(UninitializedHeadError):
        identity_net(2).forward_logits(np.zeros((1, 2)))


def test_wrong_input_width_raises():
    with pytest.raises(ShapeError):
        identity_net(3).forward_features(np.zeros((2, 4)))


def test_linear_input_gradient_closed_form(rng):
    A = rng.standard_normal((4, 6))
    p = rng.standard_normal(4)
    x = rng.standard_normal((1, 6))
    g = linear_net(A).input_gradient(x, PrototypeMSE(p))
    assert np.allclose(g[0], 2 * A.T @ (A @ x[0] - p), atol=1e-12)


def test_objective_dimension_mismatch():
    with pytest.raises(DimensionError):
        identity_net(3).input_gradient(np.zeros((1, 3)), PrototypeMSE(np.zeros(2)))


def test_zero_input_gradient_matches_fd(rng):
    # odd objective around the origin, checked at x = 0
    net, _ = two_layer(rng)
    p = rng.standard_normal(4)
    x = np.zeros((2, 5))
    obj = PrototypeMSE(p)
    num = numeric_grad(lambda: obj(net.forward_features(x))[0], x)
    assert gradient_agreement(net.input_gradient(x, obj), num)[0]


@pytest.mark.parametrize("draw", range(6))
def test_gradients_match_fd(draw):
    r = np.random.default_rng(100 + draw)
    net, x = _random_net(r, conv=draw % 2 == 1)
    obj = PrototypeMSE(r.standard_normal(net.feature_dim))
    labels = r.integers(0, net.num_classes, size=len(x))
    ce = CrossEntropy()
    num = numeric_grad(lambda: obj(net.forward_features(x))[0], x)
    ok, frac, worst = gradient_agreement(net.input_gradient(x, obj), num)
    assert ok, (frac, worst)
    _, grads = net.param_gradient(x, labels, ce)
    for g, p in zip(grads, net.parameters()):
        num = numeric_grad(lambda: ce(net.forward_logits(x), labels)[0], p)
        ok, frac, worst = gradient_agreement(g, num)
        assert ok, (frac, worst)


def test_single_dense_softmax_ce_hand_case():
    W = np.array([[0.5, -1.0], [2.0, 0.25]])
    net = Network([], 2, head=W.copy(), dtype=np.float64)
    x = np.array([[1.0, 2.0]])
    z = W @ x[0]
    p = np.exp(z) / np.exp(z).sum()
    onehot = np.array([0.0, 1.0])
    val, (gW,) = net.param_gradient(x, [1], CrossEntropy())
    assert val == pytest.approx(-np.log(p[1]))
    assert np.allclose(gW, np.outer(p - onehot, x[0]))


def test_constant_loss_gives_zero_gradients(rng):
    net, _ = two_layer(rng)
    net.head = np.zeros((2, 4))

    def const(logits, labels):
        return 1.0, np.zeros_like(logits)

    _, grads = net.param_gradient(rng.standard_normal((3, 5)), [0, 1, 0], const)
    assert all(np.all(g == 0) for g in grads)


def test_bad_labels_raise(rng):
    net, _ = two_layer(rng)
    net.head = np.zeros((2, 4))
    with pytest.raises(LabelError):
        net.param_gradient(np.zeros((2, 5)), [0, 2], CrossEntropy())
    with pytest.raises(LabelError):
        net.param_gradient(np.zeros((2, 5)), [0], CrossEntropy())


def test_relu_subgradient_is_zero_at_kink():
    d, _ = ReLU().backward(np.array([[0.0, 1.0, -1.0]]), np.ones((1, 3)))
    assert d.tolist() == [[0.0, 1.0, 0.0]]


def test_conv_forward_matches_loops(rng):
    k = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    conv = Conv2D(k, b, (3, 5, 6), stride=2, padding=1)
    x = rng.standard_normal((2, 3 * 5 * 6))
    out = conv.forward(x).reshape(2, *conv.out_shape)
    img = np.pad(x.reshape(2, 3, 5, 6), ((0, 0), (0, 0), (1, 1), (1, 1)))
    F, Ho, Wo = conv.out_shape
    for n in range(2):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = img[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    assert out[n, f, i, j] == pytest.approx(np.sum(patch * k[f]) + b[f])


def test_sgd_plain_step(rng):
    net, _ = two_layer(rng)
    net.head = rng.standard_normal((2, 4))
    before = [p.copy() for p in net.parameters()]
    grads = [rng.standard_normal(p.shape) for p in before]
    sgd_step(net, grads, lr=0.1)
    for p, p0, g in zip(net.parameters(), before, grads):
        assert np.allclose(p, p0 - 0.1 * g)


def test_momentum_second_step_uses_1_9_g(rng):
    net = identity_net(2)
    net.head = np.zeros((1, 2))
    g = [np.full((2, 2), 0.5), np.full(2, -1.0), np.full((1, 2), 2.0)]
    opt = SGD(net, lr=0.1, momentum=0.9)
    opt.step(g)
    mid = [p.copy() for p in net.parameters()]
    opt.step(g)
    for p, p1, gi in zip(net.parameters(), mid, g):
        assert np.allclose(p1 - p, 0.1 * 1.9 * gi)


def test_weight_decay_hand_unroll(rng):
    net, _ = two_layer(rng)
    net.head = rng.standard_normal((2, 4))
    theta = [p.copy() for p in net.parameters()]
    g = [rng.standard_normal(p.shape) for p in theta]
    v = sgd_step(net, g, lr=0.05, momentum=0.9, weight_decay=5e-4)
    mid = [p.copy() for p in net.parameters()]
    sgd_step(net, g, lr=0.05, momentum=0.9, weight_decay=5e-4, velocity=v)
    for t0, t1, t2, gi in zip(theta, mid, net.parameters(), g):
        v1 = gi + 5e-4 * t0
        assert np.allclose(t1, t0 - 0.05 * v1)
        v2 = 0.9 * v1 + gi + 5e-4 * t1
        assert np.allclose(t2, t1 - 0.05 * v2)


def test_sgd_rejects_nan_and_bad_hyperparameters():
    net = identity_net(2)
    net.head = np.zeros((1, 2))
    with pytest.raises(NumericError):
        SGD(net, 0.1).step([np.full((2, 2), np.nan), np.zeros(2), np.zeros((1, 2))])
    with pytest.raises(ValueError):
        SGD(net, -1.0)


def test_forward_is_pure():
    net = mlp(8, (16,), 4, seed=3)
    x = np.random.default_rng(0).standard_normal((5, 8))
    a = net.forward_features(x)
    assert np.array_equal(a, net.forward_features(x))


def test_teacher_copy_is_independent():
    net = mlp(4, (6,), 3, seed=1)
    net.extend_head(2, np.random.default_rng(0))
    teacher = net.copy()
    fp = teacher.fingerprint()
    x = np.ones((2, 4))
    out = teacher.forward_logits(x).copy()
    _, grads = net.param_gradient(x, [0, 1], CrossEntropy())
    sgd_step(net, grads, lr=1.0)
    net.extend_head(3, np.random.default_rng(1))
    assert teacher.fingerprint() == fp
    assert np.array_equal(teacher.forward_logits(x), out)
    assert net.fingerprint() != fp


def test_head_growth():
    net = mlp(4, (6,), 3)
    for n, total in ((2, 2), (3, 5), (1, 6)):
        net.extend_head(n, np.random.default_rng(n))
        assert net.num_classes == total


def test_checkpoint_roundtrip(tmp_path):
    net = convnet((1, 6, 6), channels=2, feature_dim=5, seed=2)
    net.extend_head(3, np.random.default_rng(0))
    save_network(net, tmp_path / "n.npz")
    back = load_network(tmp_path / "n.npz")
    assert back.fingerprint() == net.fingerprint()
    x = np.random.default_rng(1).random((2, 36))
    assert np.array_equal(back.forward_logits(x), net.forward_logits(x))


def test_float32_default_dtype():
    net = mlp(3, (4,), 2)
    assert all(p.dtype == np.float32 for p in net.parameters())
    assert net.forward_features(np.ones((1, 3))).dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_feature_width_invariant(seed):
    r = np.random.default_rng(seed)
    d_in, d_f = int(r.integers(1, 10)), int(r.integers(1, 10))
    net = mlp(d_in, (int(r.integers(1, 10)),), d_f, seed=seed)
    out = net.forward_features(r.standard_normal((int(r.integers(1, 5)), d_in)))
    assert out.shape[1] == d_f == net.feature_dim
    assert np.all(np.isfinite(out))
