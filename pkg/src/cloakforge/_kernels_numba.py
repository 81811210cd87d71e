"""Numba @njit implementations of the 3x3 convolution kernels.

Imported lazily by kernels.py so that a numpy-only install never pays the
numba import or JIT cost. fastmath stays off: summation order must be fixed
so repeated runs are bit-identical. prange blocks write disjoint output
slices, which keeps the parallel path deterministic as well.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=False, cache=True)
def conv3x3(x, w, b):
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.zeros((n, c, h + 2, wd + 2))
    xp[:, :, 1 : h + 1, 1 : wd + 1] = x
    y = np.empty((n, o, h, wd))
    for idx in prange(n * o):
        ni = idx // o
        oi = idx % o
        acc = np.full((h, wd), b[oi])
        for ci in range(c):
            for ky in range(3):
                for kx in range(3):
                    acc += w[oi, ci, ky, kx] * xp[ni, ci, ky : ky + h, kx : kx + wd]
        y[ni, oi] = acc
    return y


@njit(parallel=True, fastmath=False, cache=True)
def conv3x3_grad_weight(dy, x):
    n, c, h, wd = x.shape
    o = dy.shape[1]
    xp = np.zeros((n, c, h + 2, wd + 2))
    xp[:, :, 1 : h + 1, 1 : wd + 1] = x
    dw = np.empty((o, c, 3, 3))
    for oi in prange(o):
        for ci in range(c):
            for ky in range(3):
                for kx in range(3):
                    s = 0.0
                    for ni in range(n):
                        for yy in range(h):
                            for xx in range(wd):
                                s += dy[ni, oi, yy, xx] * xp[ni, ci, yy + ky, xx + kx]
                    dw[oi, ci, ky, kx] = s
    return dw
