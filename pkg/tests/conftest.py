import numpy as np
import pytest

from inflrobust import nn

SMOOTH_ARCHS = [
    [{"type": "conv2d", "out_channels": 3}, {"type": "tanh"},
     {"type": "conv2d", "out_channels": 2, "stride": 2}, {"type": "tanh"},
     {"type": "flatten"}, {"type": "dense", "out_features": 3}],
    [{"type": "flatten"}, {"type": "dense", "out_features": 6}, {"type": "tanh"},
     {"type": "dense", "out_features": 3}],
    [{"type": "conv2d", "out_channels": 2, "kernel": 5, "padding": 0}, {"type": "tanh"},
     {"type": "flatten"}, {"type": "dense", "out_features": 2}],
]

RELU_ARCHS = [
    [{"type": "conv2d", "out_channels": 4}, {"type": "relu"}, {"type": "maxpool2"},
     {"type": "conv2d", "out_channels": 4}, {"type": "relu"}, {"type": "maxpool2"},
     {"type": "flatten"}, {"type": "dense", "out_features": 3}],
    [{"type": "conv2d", "out_channels": 3, "stride": 2}, {"type": "relu"},
     {"type": "flatten"}, {"type": "dense", "out_features": 5}, {"type": "relu"},
     {"type": "dense", "out_features": 3}],
    [{"type": "conv2d", "out_channels": 3}, {"type": "batchnorm"}, {"type": "relu"},
     {"type": "maxpool2"}, {"type": "flatten"}, {"type": "dense", "out_features": 3}],
]


def make_net(arch, seed=0, shape=(1, 8, 8)):
    net = nn.Network(arch, shape, seed=seed)
    rng = np.random.default_rng(seed + 100)
    # random nonzero biases so ReLU patterns are not degenerate
    net.params += 0.05 * rng.standard_normal(net.params.shape)
    return net


def micro_batch(net, n=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n,) + net.input_shape)
    y = rng.integers(0, net.n_classes, size=n)
    return x, y


@pytest.fixture(params=range(len(SMOOTH_ARCHS)), ids=lambda i: f"smooth{i}")
def smooth_net(request):
    return make_net(SMOOTH_ARCHS[request.param], seed=request.param)


@pytest.fixture(params=range(len(RELU_ARCHS)), ids=lambda i: f"relu{i}")
def relu_net(request):
    return make_net(RELU_ARCHS[request.param], seed=10 + request.param)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
