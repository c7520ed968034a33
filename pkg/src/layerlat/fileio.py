"""Binary NetPBM (P5/P6) and ``LLAT`` latent dump readers/writers."""

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError

LLAT_MAGIC = b"LLAT"
LLAT_VERSION = 1


def _read_header(data, magic):
    """Parse ``magic width height maxval`` and return (w, h, maxval, payload_offset)."""
    if data[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()}, found {data[:2]!r}", 0)
    fields = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header field", start)
        fields.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", pos)
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", pos)
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}", pos)
    return width, height, maxval, pos + 1


def _read_payload(path, magic, channels):
    data = Path(path).read_bytes()
    width, height, _, offset = _read_header(data, magic)
    need = width * height * channels
    if len(data) - offset < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(data) - offset}", len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return raw.reshape(shape).copy()


def load_ppm(path):
    """Read a binary P6 file into an ``H x W x 3`` uint8 array."""
    return _read_payload(path, b"P6", 3)


def save_ppm(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DimensionError(f"PPM needs HxWx3 uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def load_pgm_gray(path):
    return _read_payload(path, b"P5", 1)


def save_pgm_gray(path, gray):
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise DimensionError(f"PGM needs HxW uint8, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray).tobytes())


def load_pgm(path):
    """Read a mask; pixels >= 128 become 1, the rest 0."""
    return (load_pgm_gray(path) >= 128).astype(np.float32)


def save_pgm(path, mask):
    mask = np.asarray(mask)
    save_pgm_gray(path, np.where(mask > 0.5, 255, 0).astype(np.uint8))


def heatmap_to_gray(values):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def save_heatmap(path, values):
    save_pgm_gray(path, heatmap_to_gray(values))


def save_latent(path, lat):
    lat = np.asarray(lat, dtype="<f4")
    if lat.ndim != 3:
        raise DimensionError(f"latent must be c x h x w, got {lat.shape}")
    header = LLAT_MAGIC + struct.pack("<4I", LLAT_VERSION, *lat.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(lat).tobytes())


def load_latent(path):
    data = Path(path).read_bytes()
    if data[:4] != LLAT_MAGIC:
        raise FormatError(f"bad LLAT magic {data[:4]!r}", 0)
    if len(data) < 20:
        raise FormatError("truncated LLAT header", len(data))
    version, c, h, w = struct.unpack_from("<4I", data, 4)
    if version != LLAT_VERSION:
        raise FormatError(f"unsupported LLAT version {version}", 4)
    need = c * h * w * 4
    if len(data) - 20 < need:
        raise FormatError(f"truncated LLAT payload: need {need} bytes", len(data))
    arr = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=20)
    return arr.reshape(c, h, w).astype(np.float32)
