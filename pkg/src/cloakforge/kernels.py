"""3x3 convolution kernels: the hot inner loops of every model in this package.

Two interchangeable backends compute identical math (up to float summation
order): a pure-numpy im2col + BLAS path and a numba @njit path. The active
backend is chosen by the CLOAKFORGE_BACKEND environment variable ("numpy" or
"numba", default "numpy") and can be switched at runtime with set_backend().
See bench/bench_kernels.py for a throughput comparison of the two.

All kernels take and return float64 arrays in NCHW layout. Convolutions use
stride 1 and zero padding 1, so spatial shape is preserved.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Batch chunk for the im2col buffer. Small chunks keep the column matrix a
# few MB so repeated calls reuse the malloc arena instead of mmap-ing.
_CHUNK = 4

_VALID_BACKENDS = ("numpy", "numba")
_backend = os.environ.get("CLOAKFORGE_BACKEND", "numpy").strip().lower() or "numpy"
if _backend not in _VALID_BACKENDS:
    raise ValueError(
        f"CLOAKFORGE_BACKEND={_backend!r} not recognized; expected one of {_VALID_BACKENDS}"
    )


def get_backend() -> str:
    """Name of the active kernel backend."""
    return _backend


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime ("numpy" or "numba")."""
    global _backend
    if name not in _VALID_BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {_VALID_BACKENDS}")
    if name == "numba":
        from . import _kernels_numba  # noqa: F401  (compile check)
    _backend = name


def _im2col(x: np.ndarray) -> np.ndarray:
    """(m, C, H, W) -> (C*9, m*H*W) column matrix for a padded 3x3 window."""
    m, c, h, w = x.shape
    xp = np.zeros((m, c, h + 2, w + 2))
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (m, c, h, w, 3, 3)
    cols = np.empty((c * 9, m * h * w))
    k = 0
    for ci in range(c):
        for ky in range(3):
            for kx in range(3):
                cols[k] = win[:, ci, :, :, ky, kx].reshape(-1)
                k += 1
    return cols


def _conv3x3_numpy(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    o = w.shape[0]
    wf = w.reshape(o, -1)
    out = np.empty((n, o, h, wd))
    for n0 in range(0, n, _CHUNK):
        xs = x[n0 : n0 + _CHUNK]
        m = xs.shape[0]
        y = wf @ _im2col(xs)
        y += b[:, None]
        out[n0 : n0 + m] = y.reshape(o, m, h, wd).transpose(1, 0, 2, 3)
    return out


def _conv3x3_grad_weight_numpy(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    o = dy.shape[1]
    dw = np.zeros((o, c * 9))
    for n0 in range(0, n, _CHUNK):
        xs = x[n0 : n0 + _CHUNK]
        dys = dy[n0 : n0 + xs.shape[0]]
        dyf = np.ascontiguousarray(dys.transpose(1, 0, 2, 3)).reshape(o, -1)
        dw += dyf @ _im2col(xs).T
    return dw.reshape(o, c, 3, 3)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y[n,o] = b[o] + sum_c x[n,c] * w[o,c] (3x3 correlation, padding 1)."""
    if _backend == "numba":
        from . import _kernels_numba

        return _kernels_numba.conv3x3(x, w, b)
    return _conv3x3_numpy(x, w, b)


def conv3x3_grad_input(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """dL/dx given dL/dy: correlation of dy with the flipped, transposed kernel."""
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zeros = np.zeros(wt.shape[0])
    if _backend == "numba":
        from . import _kernels_numba

        return _kernels_numba.conv3x3(dy, wt, zeros)
    return _conv3x3_numpy(dy, wt, zeros)


def conv3x3_grad_weight(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """dL/dw given dL/dy and the forward input x."""
    if _backend == "numba":
        from . import _kernels_numba

        return _kernels_numba.conv3x3_grad_weight(dy, x)
    return _conv3x3_grad_weight_numpy(dy, x)
