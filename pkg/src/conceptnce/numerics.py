"""Deterministic float64 kernels shared by training and inference.

Vectors and grids are plain ``numpy.ndarray`` objects of dtype float64.
Every kernel here is pure.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateNorm, EmptyGrid, NonFiniteInput

EPS_NORM = 1e-12


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    x = _as_f64(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise NonFiniteInput("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("softmax input contains NaN or inf")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def l2_norm(x, axis: int = -1) -> np.ndarray:
    return np.sqrt(np.sum(_as_f64(x) ** 2, axis=axis, keepdims=True))


def l2_normalize(x, axis: int = -1, eps: float = EPS_NORM) -> np.ndarray:
    """Scale ``x`` to unit Euclidean length along ``axis``.

    Raises :class:`DegenerateNorm` when any slice has norm below ``eps``;
    near-zero vectors are never clamped.
    """
    x = _as_f64(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("l2_normalize input contains NaN or inf")
    n = l2_norm(x, axis=axis)
    if np.any(n < eps):
        raise DegenerateNorm(f"vector norm below {eps:g}")
    return x / n


def _axis_taps(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(src, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D grid with bilinear weights and half-pixel centres.

    Output pixel ``(r, c)`` samples the source at
    ``y = (r + 0.5) * H / out_h - 0.5`` and ``x = (c + 0.5) * W / out_w - 0.5``,
    both clamped to the source extent.  Blending uses ``a + f * (b - a)``
    so constant inputs come back bit-exact.
    """
    src = _as_f64(src)
    if src.ndim != 2 or src.size == 0:
        raise EmptyGrid("bilinear_resize needs a non-empty 2-D grid")
    if out_h < 1 or out_w < 1:
        raise EmptyGrid(f"output size must be positive, got {out_h}x{out_w}")
    if not np.all(np.isfinite(src)):
        raise NonFiniteInput("bilinear_resize input contains NaN or inf")
    h, w = src.shape
    y0, y1, fy = _axis_taps(h, out_h)
    x0, x1, fx = _axis_taps(w, out_w)

    top_a, top_b = src[y0][:, x0], src[y0][:, x1]
    bot_a, bot_b = src[y1][:, x0], src[y1][:, x1]
    top = top_a + fx[None, :] * (top_b - top_a)
    bot = bot_a + fx[None, :] * (bot_b - bot_a)
    out = top + fy[:, None] * (bot - top)
    # guards 1-ulp overshoot from the subtraction in the lerp
    return np.clip(out, src.min(), src.max())


def first_argmax(grid) -> tuple[int, int]:
    """(row, col) of the first maximum in row-major order."""
    grid = _as_f64(grid)
    flat = int(np.argmax(grid))
    return divmod(flat, grid.shape[1])


def floats_to_hex(values) -> list[str]:
    """IEEE-754 bit patterns of float64 values as 16-digit hex strings."""
    bits = np.ascontiguousarray(_as_f64(values)).reshape(-1).view(np.uint64)
    return [format(int(b), "016x") for b in bits]


def hex_to_floats(codes, shape=None) -> np.ndarray:
    bits = np.array([int(c, 16) for c in codes], dtype=np.uint64)
    out = bits.view(np.float64).copy()
    return out.reshape(shape) if shape is not None else out
