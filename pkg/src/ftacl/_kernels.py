"""Hot numeric kernels: direct-loop numba versions and pure-numpy fallbacks.

The numba path is used when numba imports cleanly and ``FTACL_DISABLE_NUMBA``
is unset (or ``0``). Both paths are always importable so tests and the
benchmark can compare them side by side.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


def _env_disabled() -> bool:
    return os.environ.get("FTACL_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()


def set_backend(numba: bool) -> None:
    """Switch the dispatching wrappers between numba and numpy at runtime."""
    global USE_NUMBA
    USE_NUMBA = bool(numba) and NUMBA_AVAILABLE


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# masked softmax over the last axis; x is (R, n, n), mask is (n, n) bool
# ---------------------------------------------------------------------------


@njit(cache=True)
def _masked_softmax_nb(x, mask):
    R, n, m = x.shape
    y = np.zeros_like(x)
    for r in range(R):
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                if mask[i, j] and x[r, i, j] > mx:
                    mx = x[r, i, j]
            s = 0.0
            for j in range(m):
                if mask[i, j]:
                    e = np.exp(x[r, i, j] - mx)
                    y[r, i, j] = e
                    s += e
            for j in range(m):
                if mask[i, j]:
                    y[r, i, j] = y[r, i, j] / s
    return y


def _masked_softmax_np(x, mask):
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@njit(cache=True)
def _masked_softmax_bwd_nb(y, g):
    R, n, m = y.shape
    dx = np.empty_like(y)
    for r in range(R):
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += g[r, i, j] * y[r, i, j]
            for j in range(m):
                dx[r, i, j] = y[r, i, j] * (g[r, i, j] - s)
    return dx


def _masked_softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def masked_softmax_fwd(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    shape = x.shape
    x3 = np.ascontiguousarray(x.reshape((-1,) + shape[-2:]))
    if USE_NUMBA:
        y = _masked_softmax_nb(x3, np.ascontiguousarray(mask))
    else:
        y = _masked_softmax_np(x3, mask)
    return y.reshape(shape)


def masked_softmax_bwd(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    shape = y.shape
    y3 = np.ascontiguousarray(y.reshape((-1,) + shape[-2:]))
    g3 = np.ascontiguousarray(g.reshape((-1,) + shape[-2:]))
    if USE_NUMBA:
        dx = _masked_softmax_bwd_nb(y3, g3)
    else:
        dx = _masked_softmax_bwd_np(y3, g3)
    return dx.reshape(shape)


# ---------------------------------------------------------------------------
# conv2d; x is (B, cin, H, W) already zero-padded, w is (cout, cin, kh, kw)
# ---------------------------------------------------------------------------


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


@njit(cache=True)
def _im2col_nb(xp, kh, kw, stride, ho, wo):
    B, cin, _, _ = xp.shape
    cols = np.empty((B * ho * wo, cin * kh * kw), dtype=xp.dtype)
    for b in range(B):
        for i in range(ho):
            for j in range(wo):
                r = (b * ho + i) * wo + j
                c = 0
                for ci in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            cols[r, c] = xp[b, ci, i * stride + u, j * stride + v]
                            c += 1
    return cols


@njit(cache=True)
def _conv2d_fwd_nb(xp, w, stride, ho, wo):
    B = xp.shape[0]
    cout, cin, kh, kw = w.shape
    cols = _im2col_nb(xp, kh, kw, stride, ho, wo)
    out = np.dot(cols, w.reshape(cout, cin * kh * kw).T)  # (B*ho*wo, cout)
    return np.ascontiguousarray(out.reshape(B, ho, wo, cout).transpose(0, 3, 1, 2))


@njit(cache=True)
def _conv2d_bwd_nb(xp, w, g, stride):
    B, cin, _, _ = xp.shape
    cout, _, kh, kw = w.shape
    _, _, ho, wo = g.shape
    gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * ho * wo, cout)
    wm = w.reshape(cout, cin * kh * kw)
    cols = _im2col_nb(xp, kh, kw, stride, ho, wo)
    dw = np.dot(gm.T, cols).reshape(cout, cin, kh, kw)
    dcols = np.dot(gm, wm)
    dxp = np.zeros_like(xp)
    # col2im: scatter each window column back onto the input sites it read
    for b in range(B):
        for i in range(ho):
            for j in range(wo):
                r = (b * ho + i) * wo + j
                c = 0
                for ci in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            dxp[b, ci, i * stride + u, j * stride + v] += dcols[r, c]
                            c += 1
    return dxp, dw


def _windows(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, cin, ho, wo, kh, kw)


def _conv2d_fwd_np(xp, w, stride, ho, wo):
    win = _windows(xp, w.shape[2], w.shape[3], stride)[:, :, :ho, :wo]
    return np.einsum("bchwuv,ocuv->bohw", win, w, optimize=True)


def _conv2d_bwd_np(xp, w, g, stride):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    dw = np.einsum("bohw,bchwuv->ocuv", g, win, optimize=True)
    dxp = np.zeros_like(xp)
    # scatter each kernel tap back onto the strided input sites it touched
    cols = np.einsum("bohw,ocuv->bcuvhw", g, w, optimize=True)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += cols[:, :, u, v]
    return dxp, dw


def _pad(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    ho = conv_out_size(x.shape[2], w.shape[2], stride, padding)
    wo = conv_out_size(x.shape[3], w.shape[3], stride, padding)
    xp = _pad(x, padding)
    if USE_NUMBA:
        return _conv2d_fwd_nb(xp, np.ascontiguousarray(w), stride, ho, wo)
    return _conv2d_fwd_np(xp, w, stride, ho, wo)


def conv2d_bwd(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int, padding: int):
    """Return (dx, dw) for the forward ``conv2d_fwd(x, w, stride, padding)``."""
    xp = _pad(x, padding)
    if USE_NUMBA:
        dxp, dw = _conv2d_bwd_nb(xp, np.ascontiguousarray(w), np.ascontiguousarray(g), stride)
    else:
        dxp, dw = _conv2d_bwd_np(xp, w, g, stride)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw
