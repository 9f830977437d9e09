"""Per-pixel inner loops: particle rasterization and separable Gaussian filtering.

Each kernel has a numba implementation and a pure-numpy twin. The public
names (``rain_alpha``, ``snow_alpha``, ``gaussian_filter_valid``) dispatch to
numba unless ``VLUR_DISABLE_NUMBA=1`` is set or numba cannot be imported.
Compositing is done with a running maximum, which is order independent, so
both paths agree to rounding of ``exp``.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("VLUR_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")

# sampling step along a rain streak, in pixels
STREAK_STEP = 0.5
# Gaussian flakes are truncated at this many sigmas
FLAKE_TRUNCATE = 3.0


# --------------------------------------------------------------------------
# numpy reference paths


def rain_alpha_numpy(h, w, x0, y0, dx, dy, length, intensity):
    alpha = np.zeros((h, w), dtype=np.float64)
    n = len(x0)
    if n == 0:
        return alpha
    nsteps = np.floor(length / STREAK_STEP).astype(np.int64) + 1
    smax = int(nsteps.max())
    s = np.arange(smax, dtype=np.float64) * STREAK_STEP
    valid = np.arange(smax)[None, :] < nsteps[:, None]
    px = x0[:, None] + s[None, :] * dx[:, None]
    py = y0[:, None] + s[None, :] * dy[:, None]
    val = np.broadcast_to(intensity[:, None], px.shape)
    px, py, val = px[valid], py[valid], val[valid]
    ix = np.floor(px).astype(np.int64)
    iy = np.floor(py).astype(np.int64)
    fx = px - ix
    fy = py - iy
    for oy, ox, wgt in (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yy = iy + oy
        xx = ix + ox
        m = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        np.maximum.at(alpha, (yy[m], xx[m]), val[m] * wgt[m])
    return alpha


def snow_alpha_numpy(h, w, xs, ys, radii, intensity):
    alpha = np.zeros((h, w), dtype=np.float64)
    for k in range(len(xs)):
        r = radii[k]
        reach = int(math.ceil(FLAKE_TRUNCATE * r))
        cx = int(math.floor(xs[k]))
        cy = int(math.floor(ys[k]))
        y_lo, y_hi = max(cy - reach, 0), min(cy + reach + 1, h)
        x_lo, x_hi = max(cx - reach, 0), min(cx + reach + 1, w)
        if y_lo >= y_hi or x_lo >= x_hi:
            continue
        gy = np.arange(y_lo, y_hi, dtype=np.float64)[:, None] - ys[k]
        gx = np.arange(x_lo, x_hi, dtype=np.float64)[None, :] - xs[k]
        patch = intensity[k] * np.exp(-(gx * gx + gy * gy) / (2.0 * r * r))
        np.maximum(alpha[y_lo:y_hi, x_lo:x_hi], patch, out=alpha[y_lo:y_hi, x_lo:x_hi])
    return alpha


def gaussian_filter_valid_numpy(img, kernel):
    """Separable 'valid' correlation of a 2-D array with a 1-D kernel."""
    k = len(kernel)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ kernel
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ kernel


# --------------------------------------------------------------------------
# numba paths

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def rain_alpha_numba(h, w, x0, y0, dx, dy, length, intensity):
        alpha = np.zeros((h, w), dtype=np.float64)
        for k in range(x0.shape[0]):
            nsteps = int(math.floor(length[k] / STREAK_STEP)) + 1
            for j in range(nsteps):
                s = j * STREAK_STEP
                px = x0[k] + s * dx[k]
                py = y0[k] + s * dy[k]
                ix = int(math.floor(px))
                iy = int(math.floor(py))
                fx = px - ix
                fy = py - iy
                for oy in range(2):
                    yy = iy + oy
                    if yy < 0 or yy >= h:
                        continue
                    wy = fy if oy == 1 else 1.0 - fy
                    for ox in range(2):
                        xx = ix + ox
                        if xx < 0 or xx >= w:
                            continue
                        wx = fx if ox == 1 else 1.0 - fx
                        v = intensity[k] * (wx * wy)
                        if v > alpha[yy, xx]:
                            alpha[yy, xx] = v
        return alpha

    @numba.njit(cache=True)
    def snow_alpha_numba(h, w, xs, ys, radii, intensity):
        alpha = np.zeros((h, w), dtype=np.float64)
        for k in range(xs.shape[0]):
            r = radii[k]
            reach = int(math.ceil(FLAKE_TRUNCATE * r))
            cx = int(math.floor(xs[k]))
            cy = int(math.floor(ys[k]))
            for yy in range(max(cy - reach, 0), min(cy + reach + 1, h)):
                gy = yy - ys[k]
                for xx in range(max(cx - reach, 0), min(cx + reach + 1, w)):
                    gx = xx - xs[k]
                    v = intensity[k] * math.exp(-(gx * gx + gy * gy) / (2.0 * r * r))
                    if v > alpha[yy, xx]:
                        alpha[yy, xx] = v
        return alpha

    @numba.njit(cache=True)
    def gaussian_filter_valid_numba(img, kernel):
        k = kernel.shape[0]
        h, w = img.shape
        ow = w - k + 1
        oh = h - k + 1
        rows = np.zeros((h, ow), dtype=np.float64)
        for y in range(h):
            for x in range(ow):
                acc = 0.0
                for t in range(k):
                    acc += img[y, x + t] * kernel[t]
                rows[y, x] = acc
        out = np.zeros((oh, ow), dtype=np.float64)
        for y in range(oh):
            for x in range(ow):
                acc = 0.0
                for t in range(k):
                    acc += rows[y + t, x] * kernel[t]
                out[y, x] = acc
        return out

else:  # pragma: no cover
    rain_alpha_numba = rain_alpha_numpy
    snow_alpha_numba = snow_alpha_numpy
    gaussian_filter_valid_numba = gaussian_filter_valid_numpy


def _f64(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def rain_alpha(h: int, w: int, x0, y0, dx, dy, length, intensity) -> np.ndarray:
    args = _f64(x0, y0, dx, dy, length, intensity)
    if USE_NUMBA:
        return rain_alpha_numba(int(h), int(w), *args)
    return rain_alpha_numpy(int(h), int(w), *args)


def snow_alpha(h: int, w: int, xs, ys, radii, intensity) -> np.ndarray:
    args = _f64(xs, ys, radii, intensity)
    if USE_NUMBA:
        return snow_alpha_numba(int(h), int(w), *args)
    return snow_alpha_numpy(int(h), int(w), *args)


def gaussian_filter_valid(img, kernel) -> np.ndarray:
    img, kernel = _f64(img, kernel)
    if USE_NUMBA:
        return gaussian_filter_valid_numba(img, kernel)
    return gaussian_filter_valid_numpy(img, kernel)
