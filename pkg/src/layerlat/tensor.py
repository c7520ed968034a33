"""Deterministic float32 tensor helpers.

Everything here takes and returns ``numpy.ndarray`` in float32. The only
broadcast allowed is a single-channel mask (``h x w`` or ``1 x h x w``)
against a ``c x h x w`` tensor.
"""

import numpy as np

from .errors import DimensionError

DTYPE = np.float32


def as_tensor(x):
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 0 or any(s < 1 for s in arr.shape):
        raise DimensionError(f"tensor shape must be positive, got {arr.shape}")
    return arr


def matmul(a, b):
    """Matrix product with a fixed left-to-right summation order over k.

    Each partial product is rounded to float32 before it is accumulated, so
    a scalar loop that sums in the same order reproduces the result bitwise.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a[:, 0:1] * b[0:1, :]
    for p in range(1, a.shape[1]):
        out += a[:, p:p + 1] * b[p:p + 1, :]
    return out


def softmax_lastdim(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty last dimension")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _broadcast_pair(a, b):
    if a.shape == b.shape:
        return a, b
    # mask over channels: (h, w) or (1, h, w) against (c, h, w)
    if a.ndim == 3 and b.shape in (a.shape[1:], (1,) + a.shape[1:]):
        return a, b.reshape((1,) + a.shape[1:])
    if b.ndim == 3 and a.shape in (b.shape[1:], (1,) + b.shape[1:]):
        return a.reshape((1,) + b.shape[1:]), b
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


_OPS = {"mul": np.multiply, "add": np.add, "sub": np.subtract}


def elementwise(a, b, op):
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    a, b = _broadcast_pair(np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE))
    return _OPS[op](a, b).astype(DTYPE, copy=False)


def scale(a, s):
    return (np.asarray(a, dtype=DTYPE) * DTYPE(s)).astype(DTYPE, copy=False)


def reshape(a, shape):
    a = np.asarray(a, dtype=DTYPE)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}")
    return a.reshape(shape)


def permute(a, axes):
    return np.ascontiguousarray(np.transpose(np.asarray(a, dtype=DTYPE), axes))


def slice_region(a, top, left, height, width):
    """Spatial crop of the last two axes; out-of-range cells read as 0."""
    a = np.asarray(a, dtype=DTYPE)
    out = np.zeros(a.shape[:-2] + (height, width), dtype=DTYPE)
    return paste_region(out, a, -top, -left)


def paste_region(dst, src, top, left):
    """Write ``src`` into a copy of ``dst`` at (top, left), cropping at borders."""
    dst = np.array(dst, dtype=DTYPE)
    src = np.asarray(src, dtype=DTYPE)
    if dst.shape[:-2] != src.shape[:-2]:
        raise DimensionError(f"leading dims differ: {dst.shape} vs {src.shape}")
    H, W = dst.shape[-2:]
    h, w = src.shape[-2:]
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + h, H), min(left + w, W)
    if y0 < y1 and x0 < x1:
        dst[..., y0:y1, x0:x1] = src[..., y0 - top:y1 - top, x0 - left:x1 - left]
    return dst


def _nearest_index(src, dst):
    return (np.arange(dst) * src) // dst


def nearest_resize(x, new_h, new_w):
    """Nearest sampling with ``floor(i * src / dst)`` on the last two axes."""
    if new_h < 1 or new_w < 1:
        raise DimensionError(f"resize target must be positive, got {new_h}x{new_w}")
    x = np.asarray(x, dtype=DTYPE)
    h, w = x.shape[-2:]
    iy = _nearest_index(h, new_h)
    ix = _nearest_index(w, new_w)
    return np.ascontiguousarray(x[..., iy[:, None], ix[None, :]])


def _cover_groups(src, dst):
    # cell i covers every source index that nearest-upsampling maps back to i
    owner = (np.arange(src) * dst) // src
    groups = [np.flatnonzero(owner == i) for i in range(dst)]
    near = _nearest_index(src, dst)
    return [g if g.size else near[i:i + 1] for i, g in enumerate(groups)]


def maxpool_downsample(mask, new_h, new_w):
    """Output cell is 1 iff any input cell it covers is 1."""
    if new_h < 1 or new_w < 1:
        raise DimensionError(f"resize target must be positive, got {new_h}x{new_w}")
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got {mask.shape}")
    h, w = mask.shape
    rows = _cover_groups(h, new_h)
    cols = _cover_groups(w, new_w)
    out = np.zeros((new_h, new_w), dtype=DTYPE)
    for i, r in enumerate(rows):
        band = mask[r].max(axis=0)
        for j, c in enumerate(cols):
            out[i, j] = band[c].max()
    return out
