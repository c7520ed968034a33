"""Lossless image <-> latent codec and image-level adjustments.

The "latent" is a space-to-depth rearrangement of the image scaled to
[-1, 1]: every ``factor x factor`` pixel block becomes ``3 * factor**2``
channels at one latent cell. Images are ``H x W x 3`` uint8 arrays; masks
are float32 arrays of 0/1.
"""

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import maxpool_downsample, nearest_resize

DEFAULT_FACTOR = 4
DIRECTIONS = ("left", "right", "up", "down")
CANVAS_FILL = {"black": 0, "white": 255}


def round_half_up(x):
    """Round to nearest with halves away from zero (``round(2.5) == 3``)."""
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def check_image(img, factor=DEFAULT_FACTOR):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"image must be H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    if h < 8 or w < 8 or h % factor or w % factor:
        raise DimensionError(f"image {h}x{w} not divisible by codec factor {factor}")
    return img


def encode(img, factor=DEFAULT_FACTOR):
    img = check_image(img, factor)
    h, w, _ = img.shape
    x = (img.astype(np.float64) / 127.5 - 1.0).astype(np.float32)
    x = x.transpose(2, 0, 1).reshape(3, h // factor, factor, w // factor, factor)
    x = x.transpose(0, 2, 4, 1, 3).reshape(3 * factor * factor, h // factor, w // factor)
    return np.ascontiguousarray(x)


def decode(lat, factor=DEFAULT_FACTOR):
    lat = np.asarray(lat, dtype=np.float32)
    c, h, w = lat.shape
    if c != 3 * factor * factor:
        raise DimensionError(f"latent has {c} channels, codec factor {factor} needs {3 * factor * factor}")
    x = lat.reshape(3, factor, factor, h, w).transpose(0, 3, 1, 4, 2)
    x = x.reshape(3, h * factor, w * factor).transpose(1, 2, 0)
    x = (np.clip(x.astype(np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.rint(x).astype(np.uint8)


def mask_to_latent(mask, factor=DEFAULT_FACTOR):
    """Image-resolution mask -> latent-resolution mask without losing coverage."""
    mask = np.asarray(mask, dtype=np.float32)
    h, w = mask.shape
    return maxpool_downsample(mask, h // factor, w // factor)


# --- geometric sampling -------------------------------------------------

def _source_coords(size, ratio, center):
    # output pixel i samples the source at center + (i + 0.5 - center) / ratio
    return center + (np.arange(size) + 0.5 - center) / ratio - 0.5


def _bilinear(img, sy, sx):
    h, w = img.shape[:2]
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return np.clip(np.rint(top * (1 - fy) + bot * fy), 0, 255).astype(np.uint8)


def bilinear_resize(img, new_h, new_w):
    h, w = img.shape[:2]
    sy = (np.arange(new_h) + 0.5) * h / new_h - 0.5
    sx = (np.arange(new_w) + 0.5) * w / new_w - 0.5
    return _bilinear(img, sy, sx)


def _check_ratios(shape, h_ratio, w_ratio):
    if h_ratio <= 0 or w_ratio <= 0:
        raise ParameterError(f"resize ratios must be positive, got {h_ratio}, {w_ratio}")
    h, w = shape[:2]
    if round_half_up(h * h_ratio) < 1 or round_half_up(w * w_ratio) < 1:
        raise ParameterError(f"ratios {h_ratio}, {w_ratio} collapse a {h}x{w} image")


def resize_image(img, h_ratio, w_ratio, center=None):
    """Scale about ``center`` (pixel coords, default image centre) on the original canvas.

    Exposed border regions replicate the nearest edge pixel.
    """
    img = np.asarray(img)
    _check_ratios(img.shape, h_ratio, w_ratio)
    h, w = img.shape[:2]
    cy, cx = center if center is not None else (h / 2.0, w / 2.0)
    return _bilinear(img, _source_coords(h, h_ratio, cy), _source_coords(w, w_ratio, cx))


def resize_mask(mask, h_ratio, w_ratio, center=None):
    """Nearest-neighbour counterpart of :func:`resize_image`; outside reads as 0."""
    mask = np.asarray(mask, dtype=np.float32)
    _check_ratios(mask.shape, h_ratio, w_ratio)
    h, w = mask.shape
    cy, cx = center if center is not None else (h / 2.0, w / 2.0)
    sy = np.floor(_source_coords(h, h_ratio, cy) + 0.5).astype(int)
    sx = np.floor(_source_coords(w, w_ratio, cx) + 0.5).astype(int)
    valid = ((sy >= 0) & (sy < h))[:, None] & ((sx >= 0) & (sx < w))[None, :]
    out = mask[np.clip(sy, 0, h - 1)][:, np.clip(sx, 0, w - 1)]
    return np.where(valid, out, 0).astype(np.float32)


def _mirror_index(n, span):
    lo, hi = span if span is not None else (0, n - 1)
    return np.clip(lo + hi - np.arange(n), 0, n - 1)


def flip(arr, axis, span=None):
    """Mirror along ``axis`` ("horizontal" flips columns, "vertical" rows).

    ``span=(lo, hi)`` mirrors index ``i`` to ``lo + hi - i`` so an object's
    bounding box flips in place; the default is the full extent.
    """
    arr = np.asarray(arr)
    if axis in ("horizontal", "x", 1):
        return np.ascontiguousarray(arr[:, _mirror_index(arr.shape[1], span)])
    if axis in ("vertical", "y", 0):
        return np.ascontiguousarray(arr[_mirror_index(arr.shape[0], span)])
    raise ParameterError(f"unknown flip axis {axis!r}")


def _canvas_like(img, canvas):
    if canvas == "original":
        return np.array(img)
    if canvas in CANVAS_FILL:
        return np.full_like(img, CANVAS_FILL[canvas])
    raise ParameterError(f"unknown canvas init {canvas!r}")


def pan_shift(direction, scale, height, width):
    if direction not in DIRECTIONS:
        raise ParameterError(f"unknown pan direction {direction!r}")
    if not 0 < scale < 1:
        raise ParameterError(f"pan scale must be in (0, 1), got {scale}")
    dim = width if direction in ("left", "right") else height
    return round_half_up(scale * dim)


def pan_paste(img, direction, scale, canvas="original", cell=1):
    """Shift content away from ``direction`` as a camera pan would, over a canvas.

    Panning right moves content left and leaves a band on the right that
    keeps whatever the canvas holds there. With ``cell > 1`` the shift is a
    whole number of ``cell``-pixel blocks, matching a latent-grid mask.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    s = cell * pan_shift(direction, scale, h // cell, w // cell)
    out = _canvas_like(img, canvas)
    if direction == "right":
        out[:, :w - s] = img[:, s:]
    elif direction == "left":
        out[:, s:] = img[:, :w - s]
    elif direction == "up":
        out[s:] = img[:h - s]
    else:
        out[:h - s] = img[s:]
    return out


def zoom_box(scale, height, width):
    """(top, left, inner_h, inner_w) of the shrunken region for a zoom-out."""
    if scale <= 0:
        raise ParameterError(f"zoom scale must be positive, got {scale}")
    ih, iw = round_half_up(height / scale), round_half_up(width / scale)
    if ih < 1 or iw < 1:
        raise ParameterError(f"zoom scale {scale} collapses a {height}x{width} grid")
    return (height - ih) // 2, (width - iw) // 2, ih, iw


def zoom_paste(img, scale, canvas="original", cell=1):
    """Shrink the image about its centre and paste it over a canvas.

    ``cell`` snaps the pasted box to ``cell``-pixel blocks as for :func:`pan_paste`.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    top, left, ih, iw = (cell * v for v in zoom_box(scale, h // cell, w // cell))
    small = bilinear_resize(img, ih, iw)
    out = _canvas_like(img, canvas)
    # scale < 1 enlarges: keep the central crop
    sy, sx = max(-top, 0), max(-left, 0)
    ty, tx = max(top, 0), max(left, 0)
    ch, cw = min(ih - sy, h - ty), min(iw - sx, w - tx)
    out[ty:ty + ch, tx:tx + cw] = small[sy:sy + ch, sx:sx + cw]
    return out


def adjust_image(img, op, **kwargs):
    """Dispatch one image-level adjustment by name.

    ``op`` is one of ``resize``, ``flip``, ``pan_paste`` or ``zoom_paste``;
    keyword arguments are forwarded.
    """
    table = {"resize": resize_image, "flip": flip, "pan_paste": pan_paste, "zoom_paste": zoom_paste}
    if op not in table:
        raise ParameterError(f"unknown adjustment {op!r}")
    return table[op](img, **kwargs)


def build_pan_zoom_mask(op, scale, height, width, direction=None):
    """Mask of cells that need completion after a pan or zoom-out."""
    mask = np.zeros((height, width), dtype=np.float32)
    if op == "pan":
        s = pan_shift(direction, scale, height, width)
        if direction == "right":
            mask[:, width - s:] = 1
        elif direction == "left":
            mask[:, :s] = 1
        elif direction == "up":
            mask[:s] = 1
        else:
            mask[height - s:] = 1
        return mask
    if op == "zoom":
        top, left, ih, iw = zoom_box(scale, height, width)
        mask[:] = 1
        mask[max(top, 0):top + ih, max(left, 0):left + iw] = 0
        return mask
    raise ParameterError(f"unknown mask op {op!r}")


# --- latent-level variants (ablation only) --------------------------------

def resize_latent(lat, h_ratio, w_ratio, center=None):
    """Nearest resize of a latent about ``center`` (latent cell coords); outside is 0."""
    lat = np.asarray(lat, dtype=np.float32)
    _, h, w = lat.shape
    cy, cx = center if center is not None else (h / 2.0, w / 2.0)
    sy = np.floor(_source_coords(h, h_ratio, cy) + 0.5).astype(int)
    sx = np.floor(_source_coords(w, w_ratio, cx) + 0.5).astype(int)
    valid = ((sy >= 0) & (sy < h))[:, None] & ((sx >= 0) & (sx < w))[None, :]
    out = lat[:, np.clip(sy, 0, h - 1)][:, :, np.clip(sx, 0, w - 1)]
    return np.where(valid[None], out, 0).astype(np.float32)


def zoom_paste_latent(lat, scale, canvas_lat):
    """Shrink a latent by nearest sampling and paste it centred over ``canvas_lat``."""
    lat = np.asarray(lat, dtype=np.float32)
    _, h, w = lat.shape
    top, left, ih, iw = zoom_box(scale, h, w)
    small = nearest_resize(lat, ih, iw)
    out = np.array(canvas_lat, dtype=np.float32)
    sy, sx = max(-top, 0), max(-left, 0)
    ty, tx = max(top, 0), max(left, 0)
    ch, cw = min(ih - sy, h - ty), min(iw - sx, w - tx)
    out[:, ty:ty + ch, tx:tx + cw] = small[:, sy:sy + ch, sx:sx + cw]
    return out
