import math

import numpy as np
import pytest

from conftest import RELU_ARCHS, SMOOTH_ARCHS, make_net, micro_batch, rel_err
from inflrobust import nn


def mean_loss(net, x, y):
    return nn.cross_entropy(nn.forward(net, x), y)[0]


def fd_param_grad(net, x, y, coords, h=1e-5):
    out = []
    for i in coords:
        keep = net.params[i]
        net.params[i] = keep + h
        lp = mean_loss(net, x, y)
        net.params[i] = keep - h
        lm = mean_loss(net, x, y)
        net.params[i] = keep
        out.append((lp - lm) / (2 * h))
    return np.array(out)


def fd_input_grad(net, x, y, coords, h=1e-5):
    out = []
    for idx in coords:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        lp = nn.cross_entropy(nn.forward(net, xp), y)[1].sum()
        lm = nn.cross_entropy(nn.forward(net, xm), y)[1].sum()
        out.append((lp - lm) / (2 * h))
    return np.array(out)


def random_pixels(x, k, rng):
    flat = rng.choice(x.size, size=k, replace=False)
    return [np.unravel_index(f, x.shape) for f in flat]


# ----------------------------------------------------------------- forward

def test_zero_head_gives_uniform_logits(relu_net):
    x, _ = micro_batch(relu_net)
    relu_net.params[relu_net.head_span] = 0.0
    logits = nn.forward(relu_net, x)
    assert np.all(logits == logits[:, :1])
    np.testing.assert_allclose(nn.softmax(logits), 1 / relu_net.n_classes)


def test_dense_forward_by_hand():
    net = nn.Network([{"type": "flatten"}, {"type": "dense", "out_features": 2}], (1, 2, 2), seed=None)
    w = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, -1.0]])
    net.params[:] = np.concatenate([w.ravel(), [0.5, -0.5]])
    x = np.array([[[0.1, 0.2], [0.3, 0.4]]])
    # row 0: 0.1 + 0.5; row 1: 2*0.2 - 0.4 - 0.5
    np.testing.assert_allclose(nn.forward(net, x), [[0.6, -0.5]], atol=1e-15)


def test_batch_permutation_is_row_permutation(relu_net):
    x, _ = micro_batch(relu_net, n=6)
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = nn.forward(relu_net, x)
    b = nn.forward(relu_net, x[perm])
    assert np.array_equal(a[perm], b)


def test_shape_mismatch_names_layer():
    net = make_net(RELU_ARCHS[0])
    with pytest.raises(nn.ShapeError, match="layer 0"):
        nn.forward(net, np.zeros((2, 1, 9, 9)))
    with pytest.raises(nn.ShapeError, match=r"layer 2 \(dense\)"):
        nn.Network([{"type": "conv2d", "out_channels": 2}, {"type": "relu"},
                    {"type": "dense", "out_features": 3}], (1, 8, 8))


def test_last_layer_must_be_dense():
    with pytest.raises(nn.ShapeError):
        nn.Network([{"type": "flatten"}], (1, 4, 4))


def test_head_span_is_last_dense(relu_net):
    head = relu_net.head
    assert relu_net.head_span.stop == len(relu_net.params)
    assert relu_net.n_head == head.in_features * head.out_features + head.out_features


# ------------------------------------------------------------ cross entropy

def test_cross_entropy_uniform():
    loss, per = nn.cross_entropy(np.zeros((4, 3)), [0, 1, 2, 0])
    np.testing.assert_allclose(per, math.log(3), rtol=1e-15)
    assert loss == pytest.approx(math.log(3), rel=1e-15)


def test_cross_entropy_saturation():
    loss, _ = nn.cross_entropy(np.array([[50.0, 0.0, 0.0]]), [0])
    assert loss < 1e-20


def test_cross_entropy_known_value():
    # -log softmax([1, 2, 3])[2] = log(1 + e^-1 + e^-2)
    expected = math.log(1 + math.exp(-1) + math.exp(-2))
    loss, _ = nn.cross_entropy(np.array([[1.0, 2.0, 3.0]]), [2])
    assert loss == pytest.approx(expected, rel=1e-14)
    assert loss == pytest.approx(0.40760596, abs=1e-8)


def test_cross_entropy_large_logits_stable():
    loss, _ = nn.cross_entropy(np.array([[1000.0, 0.0]]), [1])
    assert loss == pytest.approx(1000.0)


def test_cross_entropy_bad_label():
    with pytest.raises(ValueError, match="label out of range"):
        nn.cross_entropy(np.zeros((2, 3)), [0, 3])


# -------------------------------------------------------------- gradients

def test_head_bias_grad_on_zero_input():
    net = make_net(SMOOTH_ARCHS[1], seed=3)
    x = np.zeros((1, 1, 8, 8))
    y = [2]
    g = nn.grad_params(net, x, y, head_only=True)
    p = nn.softmax(nn.forward(net, x))[0]
    expected = p - np.eye(3)[2]
    np.testing.assert_allclose(g[-3:], expected, rtol=1e-13, atol=1e-15)


def test_grad_params_smooth_fd(smooth_net):
    rng = np.random.default_rng(1)
    x, y = micro_batch(smooth_net)
    g = nn.grad_params(smooth_net, x, y)
    coords = rng.choice(len(smooth_net.params), size=20, replace=False)
    assert rel_err(g[coords], fd_param_grad(smooth_net, x, y, coords)) <= 1e-6


def test_grad_params_relu_fd(relu_net):
    rng = np.random.default_rng(2)
    x, y = micro_batch(relu_net)
    relu_net.train() if any(l.kind == "batchnorm" for l in relu_net.layers) else None
    g = nn.grad_params(relu_net, x, y)
    coords = rng.choice(len(relu_net.params), size=20, replace=False)
    assert rel_err(g[coords], fd_param_grad(relu_net, x, y, coords)) <= 1e-4


def test_grad_params_head_only_matches_full(relu_net):
    x, y = micro_batch(relu_net)
    full = nn.grad_params(relu_net, x, y)
    head = nn.grad_params(relu_net, x, y, head_only=True)
    np.testing.assert_array_equal(full[relu_net.head_span], head)


def test_duplicated_example_same_gradient(relu_net):
    x, y = micro_batch(relu_net, n=1)
    g1 = nn.grad_params(relu_net, x, y)
    g2 = nn.grad_params(relu_net, np.concatenate([x, x]), np.concatenate([y, y]))
    np.testing.assert_allclose(g1, g2, rtol=1e-13, atol=1e-16)


def test_weighted_loss_all_ones_matches_plain(relu_net):
    x, y = micro_batch(relu_net)
    a = nn.loss_and_grad(relu_net, x, y)
    b = nn.loss_and_grad(relu_net, x, y, weights=np.ones(len(y)))
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_grad_input_fd(relu_net):
    rng = np.random.default_rng(3)
    x, y = micro_batch(relu_net)
    g = nn.grad_input(relu_net, x, y)
    assert g.shape == x.shape
    coords = random_pixels(x, 20, rng)
    fd = fd_input_grad(relu_net, x, y, coords)
    assert rel_err([g[c] for c in coords], fd) <= 1e-4


def test_grad_input_smooth_fd(smooth_net):
    rng = np.random.default_rng(4)
    x, y = micro_batch(smooth_net)
    g = nn.grad_input(smooth_net, x, y)
    coords = random_pixels(x, 20, rng)
    assert rel_err([g[c] for c in coords], fd_input_grad(smooth_net, x, y, coords)) <= 1e-6


def test_grad_input_zero_when_input_ignored():
    net = make_net(RELU_ARCHS[0])
    # zero the first conv: features become a constant of the biases only
    net.params[net.offsets[0][0] : net.offsets[0][0] + 4 * 9] = 0.0
    x, y = micro_batch(net)
    assert np.all(nn.grad_input(net, x, y) == 0.0)


def test_grad_input_head_scaling_identity(relu_net):
    x, y = micro_batch(relu_net)
    g = nn.grad_input(relu_net, x, y)
    relu_net.params[relu_net.head_span] *= 1.0
    assert np.array_equal(g, nn.grad_input(relu_net, x, y))


def test_grad_input_accepts_hw_batches():
    net = make_net(RELU_ARCHS[0])
    x, y = micro_batch(net)
    g3 = nn.grad_input(net, x[:, 0], y)
    assert g3.shape == x[:, 0].shape
    np.testing.assert_array_equal(g3, nn.grad_input(net, x, y)[:, 0])


# ------------------------------------------------------------------ HVP

def head_grad_at(net, x, y, theta):
    keep = net.params[net.head_span].copy()
    net.params[net.head_span] = theta
    g = nn.grad_params(net, x, y, head_only=True)
    net.params[net.head_span] = keep
    return g


@pytest.mark.parametrize("arch", SMOOTH_ARCHS + RELU_ARCHS)
def test_hvp_matches_fd_of_gradient(arch):
    net = make_net(arch, seed=5)
    x, y = micro_batch(net, n=5, seed=5)
    v = np.random.default_rng(5).standard_normal(net.n_head)
    hv = nn.hvp_head(net, x, y, v)
    theta, h = net.params[net.head_span].copy(), 1e-5
    fd = (head_grad_at(net, x, y, theta + h * v) - head_grad_at(net, x, y, theta - h * v)) / (2 * h)
    assert np.linalg.norm(hv - fd) / np.linalg.norm(hv) <= 1e-5


def test_hvp_zero_vector(relu_net):
    x, y = micro_batch(relu_net)
    assert np.all(nn.hvp_head(relu_net, x, y, np.zeros(relu_net.n_head)) == 0.0)


def test_hvp_symmetric_psd(relu_net):
    rng = np.random.default_rng(6)
    x, y = micro_batch(relu_net)
    for _ in range(5):
        u, v = rng.standard_normal((2, relu_net.n_head))
        uhv = u @ nn.hvp_head(relu_net, x, y, v)
        vhu = v @ nn.hvp_head(relu_net, x, y, u)
        assert abs(uhv - vhu) <= 1e-10 * max(1.0, abs(uhv))
        assert v @ nn.hvp_head(relu_net, x, y, v) >= 0.0


def test_hvp_damping_adds_identity(relu_net):
    x, y = micro_batch(relu_net)
    v = np.random.default_rng(7).standard_normal(relu_net.n_head)
    np.testing.assert_allclose(nn.hvp_head(relu_net, x, y, v, damping=0.3),
                               nn.hvp_head(relu_net, x, y, v) + 0.3 * v, rtol=1e-14)


def test_dense_hessian_matches_hvp(relu_net):
    x, y = micro_batch(relu_net)
    phi, probs, _ = nn.head_terms(relu_net, x, y)
    h = nn.head_hessian_from_terms(phi, probs)
    v = np.random.default_rng(8).standard_normal(relu_net.n_head)
    np.testing.assert_allclose(h @ v, nn.hvp_head(relu_net, x, y, v), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(h, h.T, atol=1e-14)


# ------------------------------------------------------------ mixed grad

def test_mixed_grad_zero_u(relu_net):
    x, y = micro_batch(relu_net)
    assert np.all(nn.mixed_grad(relu_net, x, y, np.zeros(relu_net.n_head)) == 0.0)


@pytest.mark.parametrize("arch", SMOOTH_ARCHS + RELU_ARCHS)
def test_mixed_grad_fd(arch):
    net = make_net(arch, seed=9)
    x, y = micro_batch(net, n=3, seed=9)
    rng = np.random.default_rng(9)
    u = rng.standard_normal(net.n_head)
    m = nn.mixed_grad(net, x, y, u)

    def scalar(xx):
        return sum(u @ nn.grad_params(net, xx[i : i + 1], y[i : i + 1], head_only=True) for i in range(len(xx)))

    coords, fd, h = random_pixels(x, 20, rng), [], 1e-5
    for c in coords:
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        fd.append((scalar(xp) - scalar(xm)) / (2 * h))
    assert rel_err([m[c] for c in coords], fd) <= 1e-4


def test_mixed_grad_linear_in_u(relu_net):
    x, y = micro_batch(relu_net)
    rng = np.random.default_rng(10)
    u1, u2 = rng.standard_normal((2, relu_net.n_head))
    lhs = nn.mixed_grad(relu_net, x, y, u1 + u2)
    rhs = nn.mixed_grad(relu_net, x, y, u1) + nn.mixed_grad(relu_net, x, y, u2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# ------------------------------------------------------------------- Adam

def test_adam_zero_gradient_is_noop():
    p = np.array([1.0, -2.0, 3.0])
    st = nn.AdamState(3)
    nn.adam_step(st, p, np.zeros(3))
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_adam_first_step():
    p = np.array([0.5])
    st = nn.AdamState(1, lr=0.01)
    nn.adam_step(st, p, np.array([1.0]))
    # m_hat = 1, v_hat = 1 after bias correction
    assert p[0] - 0.5 == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
    assert st.step == 1


def test_adam_rejects_nonfinite():
    st = nn.AdamState(4)
    with pytest.raises(FloatingPointError, match="index 2"):
        nn.adam_step(st, np.zeros(4), np.array([0.0, 1.0, np.nan, 0.0]))


def test_training_steps_deterministic():
    def run():
        net = make_net(RELU_ARCHS[0], seed=4)
        st = nn.AdamState(len(net.params))
        x, y = micro_batch(net, n=8, seed=4)
        for _ in range(5):
            nn.adam_step(st, net.params, nn.grad_params(net.train(), x, y))
        return net.params

    assert np.array_equal(run(), run())


# -------------------------------------------------------------- batchnorm

def test_batchnorm_eval_uses_running_stats():
    net = make_net(RELU_ARCHS[2], seed=2)
    x, y = micro_batch(net, n=6)
    before = nn.forward(net.eval(), x)
    nn.forward(net.train(), x)  # updates running statistics
    after = nn.forward(net.eval(), x)
    assert not np.array_equal(before, after)
    assert np.array_equal(after, nn.forward(net.eval(), x))


def test_batchnorm_eval_gradients_fd():
    net = make_net(RELU_ARCHS[2], seed=2)
    x, y = micro_batch(net, n=6)
    nn.forward(net.train(), x)
    net.eval()
    rng = np.random.default_rng(11)
    coords = rng.choice(len(net.params), size=20, replace=False)
    g = nn.grad_params(net, x, y)
    assert rel_err(g[coords], fd_param_grad(net, x, y, coords)) <= 1e-4
