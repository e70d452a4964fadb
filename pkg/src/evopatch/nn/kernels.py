"""Hot loops for convolution and pooling.

Two interchangeable backends with identical signatures:

* ``numba`` - explicit loops compiled with ``@njit`` (default when numba imports)
* ``numpy`` - strided views and vectorised reductions

Set ``EVOPATCH_KERNELS=numpy`` to force the fallback. ``use_backend`` switches at
runtime (tests and the benchmark use it to compare both).

All arrays are NHWC. Convolution is 'valid' with stride 1; pooling uses a square
window with stride equal to the window, dropping ragged edges.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


# --- numpy backend ----------------------------------------------------------


def _im2col_np(x, kh, kw):
    n, h, w, c = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (n, ho, wo, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h - kh + 1, w - kw + 1, kh * kw * c)


def _col2im_np(cols, h, w, kh, kw):
    n, ho, wo, _ = cols.shape
    c = cols.shape[3] // (kh * kw)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros((n, h, w, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + ho, j : j + wo, :] += cols[:, :, :, i, j, :]
    return dx


def _maxpool_fwd_np(x, p):
    n, h, w, c = x.shape
    ho, wo = h // p, w // p
    win = x[:, : ho * p, : wo * p, :].reshape(n, ho, p, wo, p, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, ho, wo, c, p * p)
    idx = np.argmax(win, axis=-1)  # first max on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int32)


def _maxpool_bwd_np(dout, idx, h, w, p):
    n, ho, wo, c = dout.shape
    onehot = np.zeros((n, ho, wo, c, p * p), dtype=dout.dtype)
    np.put_along_axis(onehot, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    onehot = onehot.reshape(n, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * p, wo * p, c)
    dx = np.zeros((n, h, w, c), dtype=dout.dtype)
    dx[:, : ho * p, : wo * p, :] = onehot
    return dx


# --- numba backend ----------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _im2col_nb(x, kh, kw):
        n, h, w, c = x.shape
        ho, wo = h - kh + 1, w - kw + 1
        out = np.empty((n, ho, wo, kh * kw * c), dtype=x.dtype)
        for b in range(n):
            for r in range(ho):
                for q in range(wo):
                    k = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[b, r, q, k] = x[b, r + i, q + j, ch]
                                k += 1
        return out

    @numba.njit(cache=True)
    def _col2im_nb(cols, h, w, kh, kw):
        n, ho, wo, kk = cols.shape
        c = kk // (kh * kw)
        dx = np.zeros((n, h, w, c), dtype=cols.dtype)
        # same accumulation order as the numpy path: kernel offset outermost
        for i in range(kh):
            for j in range(kw):
                base = (i * kw + j) * c
                for b in range(n):
                    for r in range(ho):
                        for q in range(wo):
                            for ch in range(c):
                                dx[b, r + i, q + j, ch] += cols[b, r, q, base + ch]
        return dx

    @numba.njit(cache=True)
    def _maxpool_fwd_nb(x, p):
        n, h, w, c = x.shape
        ho, wo = h // p, w // p
        out = np.empty((n, ho, wo, c), dtype=x.dtype)
        idx = np.empty((n, ho, wo, c), dtype=np.int32)
        for b in range(n):
            for r in range(ho):
                for q in range(wo):
                    for ch in range(c):
                        best = x[b, r * p, q * p, ch]
                        arg = 0
                        for i in range(p):
                            for j in range(p):
                                v = x[b, r * p + i, q * p + j, ch]
                                if v > best:
                                    best = v
                                    arg = i * p + j
                        out[b, r, q, ch] = best
                        idx[b, r, q, ch] = arg
        return out, idx

    @numba.njit(cache=True)
    def _maxpool_bwd_nb(dout, idx, h, w, p):
        n, ho, wo, c = dout.shape
        dx = np.zeros((n, h, w, c), dtype=dout.dtype)
        for b in range(n):
            for r in range(ho):
                for q in range(wo):
                    for ch in range(c):
                        a = idx[b, r, q, ch]
                        dx[b, r * p + a // p, q * p + a % p, ch] = dout[b, r, q, ch]
        return dx


_BACKENDS = {"numpy": (_im2col_np, _col2im_np, _maxpool_fwd_np, _maxpool_bwd_np)}
if numba is not None:
    _BACKENDS["numba"] = (_im2col_nb, _col2im_nb, _maxpool_fwd_nb, _maxpool_bwd_nb)

_active = "numba" if numba is not None else "numpy"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend() -> str:
    return _active


def use_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = name


_env = os.environ.get("EVOPATCH_KERNELS", "").strip().lower()
if _env:
    use_backend(_env)


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, H, W, C) -> (N, H-kh+1, W-kw+1, kh*kw*C), columns ordered (i, j, c)."""
    return _BACKENDS[_active][0](np.ascontiguousarray(x), kh, kw)


def col2im(cols: np.ndarray, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an (N, h, w, C) image."""
    return _BACKENDS[_active][1](np.ascontiguousarray(cols), h, w, kh, kw)


def maxpool_forward(x: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    return _BACKENDS[_active][2](np.ascontiguousarray(x), p)


def maxpool_backward(dout: np.ndarray, idx: np.ndarray, h: int, w: int, p: int) -> np.ndarray:
    return _BACKENDS[_active][3](np.ascontiguousarray(dout), np.ascontiguousarray(idx), h, w, p)
