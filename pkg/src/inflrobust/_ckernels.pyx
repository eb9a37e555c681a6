# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im and max-pool kernels.

Inputs arrive already zero-padded and C-contiguous (see ``kernels.py``);
the GEMMs themselves stay in numpy/BLAS. Accumulation order is fixed so
results are deterministic run to run.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    """(N, C, Hp, Wp) -> (N, C*k*k, ho*wo), row index = (c, ki, kj)."""
    cdef Py_ssize_t n_batch = xp.shape[0], n_in = xp.shape[1]
    cols_arr = np.empty((n_batch, n_in * k * k, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, ki, kj, i, j, row, base
    with nogil:
        for n in range(n_batch):
            row = 0
            for c in range(n_in):
                for ki in range(k):
                    for kj in range(k):
                        for i in range(ho):
                            base = i * wo
                            for j in range(wo):
                                cols[n, row, base + j] = xp[n, c, i * stride + ki, j * stride + kj]
                        row += 1
    return cols_arr


def col2im(const double[:, :, ::1] dcols, int n_in, int hp, int wp, int k, int stride,
           int ho, int wo):
    """Adjoint of :func:`im2col`: scatter-add columns back to a padded image."""
    cdef Py_ssize_t n_batch = dcols.shape[0]
    dxp_arr = np.zeros((n_batch, n_in, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] dxp = dxp_arr
    cdef Py_ssize_t n, c, ki, kj, i, j, row, base
    with nogil:
        for n in range(n_batch):
            row = 0
            for c in range(n_in):
                for ki in range(k):
                    for kj in range(k):
                        for i in range(ho):
                            base = i * wo
                            for j in range(wo):
                                dxp[n, c, i * stride + ki, j * stride + kj] += dcols[n, row, base + j]
                        row += 1
    return dxp_arr


def maxpool2_forward(const double[:, :, :, ::1] x):
    """2x2/stride-2 max pool; ties resolve to the first row-major position."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    out_arr = np.empty((n_batch, n_ch, ho, wo), dtype=np.float64)
    arg_arr = np.empty((n_batch, n_ch, ho, wo), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, c, i, j
    cdef double best, v
    cdef cnp.int8_t pos
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        best = x[n, c, 2 * i, 2 * j]
                        pos = 0
                        v = x[n, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            pos = 1
                        v = x[n, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            pos = 2
                        v = x[n, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            pos = 3
                        out[n, c, i, j] = best
                        arg[n, c, i, j] = pos
    return out_arr, arg_arr


def maxpool2_backward(const double[:, :, :, ::1] dout, const cnp.int8_t[:, :, :, ::1] arg,
                      int h, int w):
    cdef Py_ssize_t n_batch = dout.shape[0], n_ch = dout.shape[1]
    cdef Py_ssize_t ho = dout.shape[2], wo = dout.shape[3]
    dx_arr = np.zeros((n_batch, n_ch, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, c, i, j
    cdef int pos
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        pos = arg[n, c, i, j]
                        dx[n, c, 2 * i + pos // 2, 2 * j + pos % 2] = dout[n, c, i, j]
    return dx_arr
