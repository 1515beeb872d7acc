"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature. The compiled
variants are used unless ``VITBIS_DISABLE_NUMBA`` is set to a truthy value
or numba cannot be imported. Both variants accumulate in the same order, so
their outputs agree bit for bit.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_FLAG = os.environ.get("VITBIS_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by VITBIS_DISABLE_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference path


def im2col_numpy(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Unfold a padded ``[B, C, Hp, Wp]`` array into ``[C*k*k, B*out_h*out_w]``."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    # [B, C, oh, ow, k, k] -> [C, k, k, B, oh, ow]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, b * out_h * out_w)


def col2im_numpy(
    cols: np.ndarray, shape: tuple, k: int, stride: int, out_h: int, out_w: int
) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`; returns the padded ``[B, C, Hp, Wp]`` array."""
    b, c, hp, wp = shape
    col = cols.reshape(c, k, k, b, out_h, out_w)
    xp = np.zeros(shape, dtype=np.float64)
    for ky in range(k):
        ys = slice(ky, ky + (out_h - 1) * stride + 1, stride)
        for kx in range(k):
            xs = slice(kx, kx + (out_w - 1) * stride + 1, stride)
            xp[:, :, ys, xs] += col[:, ky, kx].transpose(1, 0, 2, 3)
    return xp


def scatter_add_rows_numpy(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``out[idx[i]] += rows[i]`` for every ``i`` in order."""
    np.add.at(out, idx, rows)
    return out


# --------------------------------------------------------------------------
# compiled path


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _im2col_jit(xp, cols, k, stride, out_h, out_w):
        b, c = xp.shape[0], xp.shape[1]
        for ci in range(c):
            for ky in range(k):
                for kx in range(k):
                    row = (ci * k + ky) * k + kx
                    for bi in range(b):
                        for oy in range(out_h):
                            y = oy * stride + ky
                            base = (bi * out_h + oy) * out_w
                            for ox in range(out_w):
                                cols[row, base + ox] = xp[bi, ci, y, ox * stride + kx]
        return cols

    @numba.njit(cache=True)
    def _col2im_jit(cols, xp, k, stride, out_h, out_w):
        b, c = xp.shape[0], xp.shape[1]
        xp[:] = 0.0
        for ci in range(c):
            for ky in range(k):
                for kx in range(k):
                    src = cols[(ci * k + ky) * k + kx]
                    for bi in range(b):
                        plane = xp[bi, ci]
                        for oy in range(out_h):
                            dst = plane[oy * stride + ky]
                            base = (bi * out_h + oy) * out_w
                            for ox in range(out_w):
                                dst[ox * stride + kx] += src[base + ox]
        return xp

    @numba.njit(cache=True)
    def _scatter_add_rows_jit(out, idx, rows):
        for i in range(idx.shape[0]):
            out[idx[i]] += rows[i]
        return out

    # Buffers come from numpy's allocator, which recycles pages far better
    # than allocation inside compiled code.
    def im2col(xp, k, stride, out_h, out_w):
        b, c = xp.shape[:2]
        cols = np.empty((c * k * k, b * out_h * out_w), dtype=np.float64)
        return _im2col_jit(np.ascontiguousarray(xp), cols, k, stride, out_h, out_w)

    def col2im(cols, shape, k, stride, out_h, out_w):
        xp = np.empty(shape, dtype=np.float64)
        return _col2im_jit(np.ascontiguousarray(cols), xp, k, stride, out_h, out_w)

    def scatter_add_rows(out, idx, rows):
        return _scatter_add_rows_jit(out, np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(rows))

else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    scatter_add_rows = scatter_add_rows_numpy


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
