"""Raster math shared by the simulator, the critic and the policies.

All rasters are square ``numpy`` arrays of side ``GRID_DIM`` indexed ``[row, col]``.
World x runs along columns and world y along rows. A rotated stack is an array of
shape ``(N_ROTATIONS, GRID_DIM, GRID_DIM)``; unless noted otherwise every stack in
this package is expressed in the (unrotated) workspace frame.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage

GRID_DIM = 112
PIXEL_SIZE = 0.004  # meters per pixel
WORKSPACE_SIZE = GRID_DIM * PIXEL_SIZE
N_ROTATIONS = 16
ANGLE_STEP = 360.0 / N_ROTATIONS
EDGE_THRESH = 0.01  # meters
BORDER_RADIUS = 4  # pixels
GROUND_HEIGHT = 0.0


def _check_index(k: int) -> int:
    if not 0 <= int(k) < N_ROTATIONS:
        raise ValueError(f"orientation index {k} outside [0, {N_ROTATIONS})")
    return int(k)


def inverse_index(k: int) -> int:
    """Orientation index whose frame rotation undoes frame ``k``."""
    return (N_ROTATIONS - _check_index(k)) % N_ROTATIONS


def angle(k: int) -> float:
    """Push direction of orientation ``k`` in radians (world frame)."""
    return np.deg2rad(_check_index(k) * ANGLE_STEP)


def direction(k: int) -> np.ndarray:
    """Unit vector ``(dx, dy)`` of orientation ``k`` in world coordinates."""
    a = angle(k)
    return np.array([np.cos(a), np.sin(a)])


@lru_cache(maxsize=None)
def _source_index(shape: tuple[int, int], k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For every output pixel of frame ``k``, the source pixel it samples.

    Returns (rows, cols, inside) with rows/cols clipped into range and ``inside``
    flagging samples that really lie in the source raster.
    """
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = np.deg2rad(k * ANGLE_STEP)
    c, s = np.cos(a), np.sin(a)
    rows, cols = np.indices(shape, dtype=np.float64)
    xf, yf = cols - cx, rows - cy
    xs = c * xf - s * yf + cx
    ys = s * xf + c * yf + cy
    src_c = np.floor(xs + 0.5).astype(np.int64)
    src_r = np.floor(ys + 0.5).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    src_r = np.clip(src_r, 0, h - 1)
    src_c = np.clip(src_c, 0, w - 1)
    for arr in (src_r, src_c, inside):
        arr.setflags(write=False)
    return src_r, src_c, inside


def rotate(r: np.ndarray, k: int, fill: float = 0.0) -> np.ndarray:
    """Express raster ``r`` in the frame rotated by ``k * ANGLE_STEP``.

    In frame ``k`` the world direction ``direction(k)`` points along +col.
    Nearest-neighbour resampling; pixels sampled from outside the workspace take
    ``fill``. Multiples of 90 degrees are exact pixel permutations.
    """
    k = _check_index(k)
    r = np.asarray(r)
    if r.ndim != 2:
        raise ValueError(f"expected a 2D raster, got shape {r.shape}")
    if k == 0:
        return r.copy()
    src_r, src_c, inside = _source_index(r.shape, k)
    out = r[src_r, src_c]
    if not inside.all():
        out = out.astype(np.result_type(out.dtype, np.asarray(fill).dtype), copy=False)
        out[~inside] = fill
    return out


def validity_mask(k: int, shape: tuple[int, int] = (GRID_DIM, GRID_DIM)) -> np.ndarray:
    """World pixels that have a counterpart inside frame ``k``."""
    return _source_index(tuple(shape), inverse_index(k))[2].copy()


def frame_pixel(pixel: tuple[int, int], k: int,
                shape: tuple[int, int] = (GRID_DIM, GRID_DIM)) -> tuple[int, int]:
    """Pixel of frame ``k`` whose value ``rotate(., inverse_index(k))`` puts at ``pixel``."""
    src_r, src_c, _ = _source_index(tuple(shape), inverse_index(k))
    row, col = pixel
    return int(src_r[row, col]), int(src_c[row, col])


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a * b


def dilate(mask: np.ndarray, radius: int = BORDER_RADIUS) -> np.ndarray:
    """Border ring of ``mask``: square dilation of half-width ``radius`` minus the mask."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros_like(m)
    grown = ndimage.maximum_filter(m, size=2 * radius + 1, mode="constant", cval=False)
    return grown & ~m


def grow(mask: np.ndarray, radius: int) -> np.ndarray:
    """Mask together with its dilation ring."""
    m = np.asarray(mask).astype(bool)
    if radius < 1 or not m.any():
        return m.copy()
    return m | dilate(m, radius)


def shift_diff(depth: np.ndarray, k: int, offset: int,
               thresh: float = EDGE_THRESH, ground: float = GROUND_HEIGHT) -> np.ndarray:
    """Pixels whose height differs by more than ``thresh`` from the pixel ``offset``
    steps ahead along orientation ``k``.

    This marks push starts in front of a rise as well as starts on top of a layer
    that ends within the push length. The depth map is taken into frame ``k``; the
    translated copy repeats its last column past the border so a plateau running
    off the grid is not mistaken for an edge. The mask is returned in the
    workspace frame.
    """
    if offset < 1:
        raise ValueError("offset must be >= 1")
    k = _check_index(k)
    d = rotate(np.asarray(depth, dtype=np.float64), k, fill=ground)
    ahead = np.empty_like(d)
    n = min(offset, d.shape[1])
    ahead[:, : d.shape[1] - n] = d[:, n:]
    ahead[:, d.shape[1] - n:] = d[:, -1:]
    marked = np.abs(ahead - d) > thresh
    if k == 0:
        return marked
    return rotate(marked, inverse_index(k), fill=False)


def box_filter(m: np.ndarray, side: int) -> np.ndarray:
    """Mean filter over a ``side`` x ``side`` window with zero padding, scaled to max 1."""
    if side < 1 or side % 2 == 0:
        raise ValueError("side must be a positive odd integer")
    a = np.asarray(m, dtype=np.float64)
    half = side // 2
    padded = np.pad(a, half + 1)
    # integral image: window sums are exact for integer-valued inputs
    integral = padded.cumsum(0).cumsum(1)
    h, w = a.shape
    r0, c0 = np.arange(h), np.arange(w)
    top, bottom = r0, r0 + side
    left, right = c0, c0 + side
    sums = (integral[np.ix_(bottom, right)] - integral[np.ix_(top, right)]
            - integral[np.ix_(bottom, left)] + integral[np.ix_(top, left)])
    peak = sums.max() if sums.size else 0.0
    if peak <= 0:
        return np.zeros_like(a)
    return sums / peak
