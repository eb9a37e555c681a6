"""Small deterministic CNN engine in float64.

Provides forward evaluation, softmax cross-entropy, parameter and input
gradients, the closed-form Hessian-vector product of the final dense layer
("head"), and the mixed derivative d/dx [u . grad_head l(z)] that the
perturbation influence needs. Images are ``(N, C, H, W)`` arrays;
``(N, H, W)`` is accepted for single-channel nets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from inflrobust import kernels


class ShapeError(ValueError):
    pass


# ------------------------------------------------------------------ layers

class Layer:
    kind = "layer"
    n_params = 0

    def build(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        self.in_shape = in_shape
        self.out_shape = in_shape
        return in_shape

    def init_params(self, p: np.ndarray, rng: np.random.Generator) -> None:
        pass

    def forward(self, x, p, train, buffers):
        raise NotImplementedError

    def backward(self, dy, p, cache, need_dx):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"type": self.kind}

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return []


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, out_channels: int, kernel: int = 3, stride: int = 1, padding: int | None = None):
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = self.kernel // 2 if padding is None else int(padding)

    def build(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d needs a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} does not fit input {in_shape}")
        self.in_shape = in_shape
        self.w_shape = (self.out_channels, c, self.kernel, self.kernel)
        self.n_params = math.prod(self.w_shape) + self.out_channels
        self.out_shape = (self.out_channels, ho, wo)
        return self.out_shape

    def param_shapes(self):
        return [("weight", self.w_shape), ("bias", (self.out_channels,))]

    def _split(self, p):
        nw = math.prod(self.w_shape)
        return p[:nw].reshape(self.w_shape), p[nw:]

    def init_params(self, p, rng):
        fan_in = math.prod(self.w_shape[1:])
        w, b = self._split(p)
        w[...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=self.w_shape)
        b[...] = 0.0

    def forward(self, x, p, train, buffers):
        w, b = self._split(p)
        return kernels.active.conv2d_forward(x, w, b, self.stride, self.padding), x

    def backward(self, dy, p, x, need_dx):
        w, _ = self._split(p)
        dx, dw, db = kernels.active.conv2d_backward(x, w, dy, self.stride, self.padding, need_dx)
        return dx, np.concatenate([dw.ravel(), db])

    def describe(self):
        return {"type": self.kind, "out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}


class Dense(Layer):
    kind = "dense"

    def __init__(self, out_features: int):
        self.out_features = int(out_features)

    def build(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense needs a flat input, got {in_shape}; add a flatten layer")
        self.in_shape = in_shape
        self.in_features = in_shape[0]
        self.n_params = self.out_features * self.in_features + self.out_features
        self.out_shape = (self.out_features,)
        return self.out_shape

    def param_shapes(self):
        return [("weight", (self.out_features, self.in_features)), ("bias", (self.out_features,))]

    def split(self, p):
        nw = self.out_features * self.in_features
        return p[:nw].reshape(self.out_features, self.in_features), p[nw:]

    def init_params(self, p, rng):
        w, b = self.split(p)
        w[...] = rng.normal(0.0, math.sqrt(2.0 / self.in_features), size=w.shape)
        b[...] = 0.0

    def forward(self, x, p, train, buffers):
        w, b = self.split(p)
        # batched matmul: a row's result never depends on its batch neighbours
        return np.matmul(x[:, None, :], w.T)[:, 0] + b, x

    def backward(self, dy, p, x, need_dx):
        w, _ = self.split(p)
        dw = dy.T @ x
        db = dy.sum(axis=0)
        return (dy @ w if need_dx else None), np.concatenate([dw.ravel(), db])

    def describe(self):
        return {"type": self.kind, "out_features": self.out_features}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, p, train, buffers):
        mask = x > 0  # derivative at 0 taken as 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, p, mask, need_dx):
        return np.where(mask, dy, 0.0), None


class Tanh(Layer):
    """Smooth activation; handy for finite-difference checks."""

    kind = "tanh"

    def forward(self, x, p, train, buffers):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, p, y, need_dx):
        return dy * (1.0 - y * y), None


class MaxPool2(Layer):
    kind = "maxpool2"

    def build(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise ShapeError(f"maxpool2 needs a (C, H>=2, W>=2) input, got {in_shape}")
        self.in_shape = in_shape
        c, h, w = in_shape
        self.out_shape = (c, h // 2, w // 2)
        return self.out_shape

    def forward(self, x, p, train, buffers):
        out, arg = kernels.active.maxpool2_forward(x)
        return out, arg

    def backward(self, dy, p, arg, need_dx):
        return kernels.active.maxpool2_backward(dy, arg, self.in_shape[1], self.in_shape[2]), None


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape):
        self.in_shape = in_shape
        self.out_shape = (math.prod(in_shape),)
        return self.out_shape

    def forward(self, x, p, train, buffers):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, p, cache, need_dx):
        return dy.reshape((dy.shape[0],) + self.in_shape), None


class BatchNorm(Layer):
    """Per-channel (4-D input) or per-feature (2-D input) batch normalisation."""

    kind = "batchnorm"

    def __init__(self, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = float(momentum)
        self.eps = float(eps)

    def build(self, in_shape):
        self.in_shape = in_shape
        self.out_shape = in_shape
        self.channels = in_shape[0]
        self.n_params = 2 * self.channels
        return in_shape

    def param_shapes(self):
        return [("gamma", (self.channels,)), ("beta", (self.channels,))]

    def init_params(self, p, rng):
        p[: self.channels] = 1.0
        p[self.channels :] = 0.0

    def _axes(self, x):
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _bshape(self, x):
        return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)

    def forward(self, x, p, train, buffers):
        gamma = p[: self.channels].reshape(self._bshape(x))
        beta = p[self.channels :].reshape(self._bshape(x))
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // self.channels
            buffers["mean"] = (1 - self.momentum) * buffers["mean"] + self.momentum * mean
            unbiased = var * m / max(m - 1, 1)
            buffers["var"] = (1 - self.momentum) * buffers["var"] + self.momentum * unbiased
        else:
            mean, var = buffers["mean"], buffers["var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(self._bshape(x))) * inv.reshape(self._bshape(x))
        return gamma * xhat + beta, (xhat, inv, train)

    def backward(self, dy, p, cache, need_dx):
        xhat, inv, train = cache
        axes = self._axes(dy)
        bshape = self._bshape(dy)
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dx = None
        if need_dx:
            gamma = p[: self.channels].reshape(bshape)
            dxhat = dy * gamma
            if train:
                m = dy.size // self.channels
                dx = (inv.reshape(bshape) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            else:
                dx = dxhat * inv.reshape(bshape)
        return dx, np.concatenate([dgamma, dbeta])

    def describe(self):
        return {"type": self.kind, "momentum": self.momentum, "eps": self.eps}


LAYER_TYPES = {
    "conv2d": Conv2d, "dense": Dense, "relu": ReLU, "tanh": Tanh,
    "maxpool2": MaxPool2, "flatten": Flatten, "batchnorm": BatchNorm,
}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}; expected one of {sorted(LAYER_TYPES)}")
    try:
        return LAYER_TYPES[kind](**d)
    except TypeError as exc:
        raise ValueError(f"bad arguments for {kind} layer: {exc}") from None


# ----------------------------------------------------------------- network

DEFAULT_ARCH = [
    {"type": "conv2d", "out_channels": 8, "kernel": 3},
    {"type": "relu"},
    {"type": "maxpool2"},
    {"type": "conv2d", "out_channels": 16, "kernel": 3},
    {"type": "relu"},
    {"type": "maxpool2"},
    {"type": "flatten"},
    {"type": "dense", "out_features": 3},
]


class Network:
    """Ordered layers over one flat float64 parameter vector.

    The last layer must be dense; its weights and bias form the head
    (``head_span``), laid out as ``[W.ravel(), b]`` with ``W`` of shape
    ``(n_classes, n_features)``.
    """

    def __init__(self, layers, input_shape=(1, 32, 32), seed: int | None = 0):
        self.layers = [layer_from_dict(l) if isinstance(l, dict) else l for l in layers]
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ShapeError("the last layer must be dense (the classification head)")
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        self.offsets = []
        total = 0
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            self.offsets.append((total, total + layer.n_params))
            total += layer.n_params
        self.n_classes = shape[0]
        self.params = np.zeros(total)
        self.buffers = [
            {"mean": np.zeros(l.channels), "var": np.ones(l.channels)} if isinstance(l, BatchNorm) else {}
            for l in self.layers
        ]
        self.head_span = slice(*self.offsets[-1])
        self.mode = "eval"
        self.epoch = 0
        self.seed = seed
        if seed is not None:
            self.init(seed)

    @property
    def head(self) -> Dense:
        return self.layers[-1]

    @property
    def n_head(self) -> int:
        return self.head_span.stop - self.head_span.start

    def init(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
        for layer, (a, b) in zip(self.layers, self.offsets):
            layer.init_params(self.params[a:b], rng)
        self.seed = seed

    def layer_params(self, i: int) -> np.ndarray:
        a, b = self.offsets[i]
        return self.params[a:b]

    def describe(self) -> list[dict]:
        return [l.describe() for l in self.layers]

    def copy(self) -> Network:
        other = Network(self.describe(), self.input_shape, seed=None)
        other.params = self.params.copy()
        other.buffers = [{k: v.copy() for k, v in b.items()} for b in self.buffers]
        other.mode = self.mode
        other.epoch = self.epoch
        other.seed = self.seed
        return other

    def train(self) -> Network:
        self.mode = "train"
        return self

    def eval(self) -> Network:
        self.mode = "eval"
        return self


def _as_batch(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(net.input_shape) == 3 and net.input_shape[0] == 1 and x.shape[1:] == net.input_shape[1:]:
        x = x[:, None]
    if x.ndim != len(net.input_shape) + 1 or x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"layer 0 ({net.layers[0].kind}): expected input (N, {', '.join(map(str, net.input_shape))}),"
            f" got {x.shape}"
        )
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return x


def _run(net: Network, x: np.ndarray, upto: int | None = None, train: bool | None = None):
    """Forward through layers[:upto]; returns (activation, caches)."""
    if train is None:
        train = net.mode == "train"
    caches = []
    layers = net.layers if upto is None else net.layers[:upto]
    for i, layer in enumerate(layers):
        x, cache = layer.forward(x, net.layer_params(i), train, net.buffers[i])
        caches.append(cache)
    return x, caches


def _backprop(net: Network, caches, dy: np.ndarray, start: int, need_input: bool,
              collect: np.ndarray | None):
    """Backward from the output of layers[start-1] down to the input."""
    for i in range(start - 1, -1, -1):
        layer = net.layers[i]
        need_dx = need_input or i > 0
        dy_prev, dp = layer.backward(dy, net.layer_params(i), caches[i], need_dx)
        if collect is not None and dp is not None:
            a, b = net.offsets[i]
            collect[a:b] = dp
        dy = dy_prev
    return dy


# -------------------------------------------------------------- operations

def forward(net: Network, x) -> np.ndarray:
    """Logits ``(N, n_classes)``."""
    out, _ = _run(net, _as_batch(net, x))
    return out


def features(net: Network, x) -> np.ndarray:
    """Input to the head layer, ``(N, n_features)``; always eval mode."""
    phi, _ = _run(net, _as_batch(net, x), upto=len(net.layers) - 1, train=False)
    return phi


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(y, n, n_classes):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {n}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes}): {y[(y < 0) | (y >= n_classes)][:5]}")
    return y


def cross_entropy(logits: np.ndarray, y, weights=None) -> tuple[float, np.ndarray]:
    """Mean (optionally weighted) softmax cross-entropy and per-example losses.

    With weights the mean is ``sum(w_i * l_i) / N``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    y = _check_labels(y, logits.shape[0], logits.shape[1])
    per = -log_softmax(logits)[np.arange(len(y)), y]
    if weights is None:
        return float(per.mean()), per
    w = np.asarray(weights, dtype=np.float64)
    return float((w * per).sum() / len(per)), per


def loss_and_grad(net: Network, x, y, weights=None, head_only: bool = False):
    """Mean loss and its gradient w.r.t. all parameters (or the head only).

    Returns ``(loss, grad, per_example_losses)``.
    """
    x = _as_batch(net, x)
    logits, caches = _run(net, x)
    loss, per = cross_entropy(logits, y, weights)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    n = len(y)
    dlogits = softmax(logits)
    dlogits[np.arange(n), y] -= 1.0
    if weights is not None:
        dlogits *= np.asarray(weights, dtype=np.float64)[:, None]
    dlogits /= n
    grad = np.zeros_like(net.params)
    if head_only:
        last = len(net.layers) - 1
        _, dp = net.layers[last].backward(dlogits, net.layer_params(last), caches[last], False)
        return loss, dp, per
    _backprop(net, caches, dlogits, len(net.layers), need_input=False, collect=grad)
    return loss, grad, per


def grad_params(net: Network, x, y, weights=None, head_only: bool = False) -> np.ndarray:
    return loss_and_grad(net, x, y, weights, head_only)[1]


def grad_input(net: Network, x, y) -> np.ndarray:
    """Per-example input gradients ``d l(z_i) / d x_i`` (same shape as ``x``)."""
    xb = _as_batch(net, x)
    logits, caches = _run(net, xb)
    y = _check_labels(y, xb.shape[0], net.n_classes)
    dlogits = softmax(logits)
    dlogits[np.arange(len(y)), y] -= 1.0
    dx = _backprop(net, caches, dlogits, len(net.layers), need_input=True, collect=None)
    return dx.reshape(np.shape(x))


def head_terms(net: Network, x, y):
    """Bias-augmented head features ``(N, F+1)``, probabilities and residuals p - e_y."""
    xb = _as_batch(net, x)
    phi = features(net, xb)
    w, b = net.head.split(net.params[net.head_span])
    probs = softmax(phi @ w.T + b)
    y = _check_labels(y, xb.shape[0], net.n_classes)
    resid = probs.copy()
    resid[np.arange(len(y)), y] -= 1.0
    return np.hstack([phi, np.ones((len(phi), 1))]), probs, resid


def head_grads_from_terms(phi_aug: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """Per-example head gradients ``(N, |head|)`` in ``[W.ravel(), b]`` order."""
    n, fa = phi_aug.shape
    c = resid.shape[1]
    outer = resid[:, :, None] * phi_aug[:, None, :]  # (N, C, F+1)
    return np.concatenate([outer[:, :, :-1].reshape(n, c * (fa - 1)), outer[:, :, -1]], axis=1)


def _head_matrix(v: np.ndarray, c: int, fa: int) -> np.ndarray:
    """Reshape a head vector ``[W.ravel(), b]`` to ``(C, F+1)``."""
    f = fa - 1
    return np.hstack([v[: c * f].reshape(c, f), v[c * f :].reshape(c, 1)])


def _head_vector(m: np.ndarray) -> np.ndarray:
    return np.concatenate([m[:, :-1].ravel(), m[:, -1]])


def hvp_from_terms(phi_aug: np.ndarray, probs: np.ndarray, v: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """``(mean_i (diag p_i - p_i p_i^T) kron phi_i phi_i^T + damping I) v``."""
    n, fa = phi_aug.shape
    vm = _head_matrix(v, probs.shape[1], fa)
    q = phi_aug @ vm.T  # (N, C)
    aq = probs * q - probs * (probs * q).sum(axis=1, keepdims=True)
    hv = _head_vector(aq.T @ phi_aug) / n
    if damping:
        hv = hv + damping * v
    return hv


def hvp_head(net: Network, x, y, v, damping: float = 0.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.n_head,):
        raise ShapeError(f"head vector must have length {net.n_head}, got {v.shape}")
    phi_aug, probs, _ = head_terms(net, x, y)
    return hvp_from_terms(phi_aug, probs, v, damping)


def head_hessian_from_terms(phi_aug: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Dense head Hessian in ``[W.ravel(), b]`` order (small heads only)."""
    n, fa = phi_aug.shape
    c = probs.shape[1]
    big = np.zeros((c, fa, c, fa))
    for a in range(c):
        for b in range(c):
            coef = probs[:, a] * ((a == b) - probs[:, b])
            big[a, :, b, :] = (phi_aug * coef[:, None]).T @ phi_aug / n
    f = fa - 1
    order = np.concatenate([
        (np.arange(c)[:, None] * fa + np.arange(f)[None, :]).ravel(),
        np.arange(c) * fa + f,
    ])
    flat = big.reshape(c * fa, c * fa)
    return flat[np.ix_(order, order)]


def mixed_grad(net: Network, x, y, u) -> np.ndarray:
    """Per-example ``d/dx [u . grad_head l(z_i)]``, same shape as ``x``.

    Uses the softmax-head closed form: the scalar is ``(p - e_y)^T U phi~``,
    whose gradient w.r.t. the features is ``U^T (p - e_y) + W^T A U phi~``
    with ``A = diag(p) - p p^T``; that is then backpropagated to the pixels.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (net.n_head,):
        raise ShapeError(f"head vector must have length {net.n_head}, got {u.shape}")
    xb = _as_batch(net, x)
    y = _check_labels(y, xb.shape[0], net.n_classes)
    upto = len(net.layers) - 1
    phi, caches = _run(net, xb, upto=upto, train=False)
    w, b = net.head.split(net.params[net.head_span])
    probs = softmax(phi @ w.T + b)
    resid = probs.copy()
    resid[np.arange(len(y)), y] -= 1.0
    um = _head_matrix(u, net.n_classes, phi.shape[1] + 1)
    q = phi @ um[:, :-1].T + um[:, -1]  # U phi~, (N, C)
    aq = probs * q - probs * (probs * q).sum(axis=1, keepdims=True)
    dphi = resid @ um[:, :-1] + aq @ w
    dx = _backprop(net, caches, dphi, upto, need_input=True, collect=None)
    return dx.reshape(np.shape(x))


def predict(net: Network, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = [forward(net, x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def accuracy(net: Network, x, y, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent; eval mode."""
    mode = net.mode
    net.eval()
    try:
        pred = predict(net, x, batch_size)
    finally:
        net.mode = mode
    return 100.0 * float(np.mean(pred == np.asarray(y)))


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    n_params: int
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)
        if self.m.shape != (self.n_params,) or self.v.shape != (self.n_params,):
            raise ShapeError("Adam moment vectors must match the parameter count")


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if grads.shape != params.shape or params.shape != (state.n_params,):
        raise ShapeError(f"adam: params {params.shape}, grads {grads.shape}, state {state.n_params}")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise FloatingPointError(f"non-finite gradient at parameter index {int(np.argmax(bad))}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    params -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
