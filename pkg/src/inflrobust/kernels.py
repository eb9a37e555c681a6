"""Hot conv2d / max-pool kernels with a compiled core and a numpy fallback.

The compiled extension (``_ckernels``) is used when it imports; otherwise the
numpy implementations below take over. Set ``INFLROBUST_BACKEND=python`` to
force the fallback (``cython`` makes a missing extension an error).

Both backends share the same calling convention::

    conv2d_forward(x, w, b, stride, pad) -> out
    conv2d_backward(x, w, dout, stride, pad, need_dx) -> (dx | None, dw, db)
    maxpool2_forward(x) -> (out, argpos)
    maxpool2_backward(dout, argpos, h, w) -> dx
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, K, K) view, no copy
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


# ---------------------------------------------------------------- numpy path

def np_conv2d_forward(x, w, b, stride, pad):
    k = w.shape[2]
    ho = _out_size(x.shape[2], k, stride, pad)
    wo = _out_size(x.shape[3], k, stride, pad)
    cols = _windows(_pad(x, pad), k, stride, ho, wo)
    n, o = x.shape[0], w.shape[0]
    # one matmul per sample keeps each output row independent of the batch
    rows = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, -1)
    out = np.matmul(rows, w.reshape(o, -1).T) + b  # (N, Ho*Wo, O)
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, o, ho, wo)


def np_conv2d_backward(x, w, dout, stride, pad, need_dx=True):
    k = w.shape[2]
    ho, wo = dout.shape[2], dout.shape[3]
    xp = _pad(x, pad)
    cols = _windows(xp, k, stride, ho, wo)
    db = dout.sum(axis=(0, 2, 3))
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, K, K)
    if not need_dx:
        return None, dw, db
    dcols = np.tensordot(dout, w, axes=([1], [0]))  # (N, Ho, Wo, C, K, K)
    dxp = np.zeros_like(xp)
    h_end, w_end = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + h_end : stride, kj : kj + w_end : stride] += (
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dw, db


def np_maxpool2_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = (
        x[:, :, : 2 * ho, : 2 * wo]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    arg = blocks.argmax(axis=-1).astype(np.int8)  # first maximal position wins
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def np_maxpool2_backward(dout, arg, h, w):
    n, c, ho, wo = dout.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    blocks = np.where(onehot, dout[..., None], 0.0)
    dx = np.zeros((n, c, h, w))
    dx[:, :, : 2 * ho, : 2 * wo] = (
        blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
    return dx


python_backend = SimpleNamespace(
    name="python",
    conv2d_forward=np_conv2d_forward,
    conv2d_backward=np_conv2d_backward,
    maxpool2_forward=np_maxpool2_forward,
    maxpool2_backward=np_maxpool2_backward,
)


# ------------------------------------------------------------- compiled path

def _make_cython_backend(mod) -> SimpleNamespace:
    def conv2d_forward(x, w, b, stride, pad):
        o, _, k, _ = w.shape
        ho = _out_size(x.shape[2], k, stride, pad)
        wo = _out_size(x.shape[3], k, stride, pad)
        cols = mod.im2col(_pad(np.asarray(x, dtype=np.float64), pad), k, stride, ho, wo)
        out = np.matmul(w.reshape(o, -1), cols)  # (N, O, Ho*Wo)
        out += b[:, None]
        return out.reshape(x.shape[0], o, ho, wo)

    def conv2d_backward(x, w, dout, stride, pad, need_dx=True):
        o, c, k, _ = w.shape
        n, _, ho, wo = dout.shape
        xp = _pad(np.asarray(x, dtype=np.float64), pad)
        cols = mod.im2col(xp, k, stride, ho, wo)
        d2 = np.ascontiguousarray(dout).reshape(n, o, ho * wo)
        db = d2.sum(axis=(0, 2))
        dw = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if not need_dx:
            return None, dw, db
        dcols = np.matmul(w.reshape(o, -1).T, d2)  # (N, C*K*K, Ho*Wo)
        dxp = mod.col2im(dcols, c, xp.shape[2], xp.shape[3], k, stride, ho, wo)
        if pad:
            dxp = np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
        return dxp, dw, db

    def maxpool2_forward(x):
        return mod.maxpool2_forward(np.ascontiguousarray(x, dtype=np.float64))

    def maxpool2_backward(dout, arg, h, w):
        return mod.maxpool2_backward(np.ascontiguousarray(dout, dtype=np.float64), arg, h, w)

    return SimpleNamespace(
        name="cython",
        conv2d_forward=conv2d_forward,
        conv2d_backward=conv2d_backward,
        maxpool2_forward=maxpool2_forward,
        maxpool2_backward=maxpool2_backward,
    )


try:
    from inflrobust import _ckernels
except ImportError:  # extension not built
    _ckernels = None

cython_backend = _make_cython_backend(_ckernels) if _ckernels is not None else None


def select_backend(preference: str | None = None) -> SimpleNamespace:
    pref = (preference or os.environ.get("INFLROBUST_BACKEND", "auto")).lower()
    if pref == "python":
        return python_backend
    if pref == "cython":
        if cython_backend is None:
            raise ImportError("INFLROBUST_BACKEND=cython but the compiled extension is not built")
        return cython_backend
    if pref != "auto":
        raise ValueError(f"unknown kernel backend {pref!r}; expected auto, python or cython")
    return cython_backend if cython_backend is not None else python_backend


active = select_backend()
BACKEND = active.name


def use_backend(name: str) -> SimpleNamespace:
    """Switch the process-wide kernel backend; returns the previous one."""
    global active, BACKEND
    prev = active
    active = select_backend(name)
    BACKEND = active.name
    return prev
