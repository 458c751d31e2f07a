"""Grayscale raster types, patch extraction and image sequence I/O.

Images are immutable float64 arrays with intensities in [0, 1].  The only
file format required at runtime is binary PGM (P5); grayscale PNG is read
through Pillow when it is installed (``pip install ovaltrack[png]``).
"""

from __future__ import annotations

import glob
import math
import os
from dataclasses import dataclass, field

import numpy as np


class RasterError(ValueError):
    """Raised for malformed image files or invalid raster arguments."""


@dataclass(frozen=True)
class GrayImage:
    """A grayscale image; ``data`` is a read-only (height, width) float64 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise RasterError(f"image data must be 2-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise RasterError("image intensities must lie in [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Patch:
    """A bilinearly resampled rotated rectangle cut out of a parent image.

    ``origin`` is the (x, y) subpixel center in the parent image,
    ``half_extents`` the (a, b) half sizes in pixels and ``orientation``
    the rotation angle in radians.  ``data`` has shape
    (2*ceil(b)+1, 2*ceil(a)+1).
    """

    origin: tuple[float, float]
    half_extents: tuple[float, float]
    orientation: float
    data: GrayImage = field(repr=False)


def read_pgm(path: str) -> GrayImage:
    """Read a binary (P5) PGM file and normalize intensities by its maxval."""
    with open(path, "rb") as fh:
        raw = fh.read()

    def next_token(pos):
        # skip whitespace and '#' comment lines
        while pos < len(raw):
            c = raw[pos:pos + 1]
            if c == b"#":
                pos = raw.find(b"\n", pos)
                if pos < 0:
                    raise RasterError(f"{path}: truncated PGM header")
                pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterError(f"{path}: truncated PGM header")
        return raw[start:pos], pos

    magic, pos = next_token(0)
    if magic != b"P5":
        raise RasterError(f"{path}: not a binary PGM (P5) file, magic={magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = next_token(pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise RasterError(f"{path}: bad PGM header token {tok!r}") from None
    width, height, maxval = fields
    if not (0 < maxval <= 65535):
        raise RasterError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    count = width * height
    pixels = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if pixels.size != count:
        raise RasterError(f"{path}: truncated PGM pixel data")
    data = pixels.reshape(height, width).astype(np.float64) / float(maxval)
    return GrayImage(data)


def write_pgm(image: GrayImage, path: str, maxval: int = 255) -> None:
    """Write a binary (P5) PGM file, quantizing intensities to maxval levels."""
    if not (0 < maxval <= 65535):
        raise RasterError(f"unsupported PGM maxval {maxval}")
    header = f"P5\n{image.width} {image.height}\n{maxval}\n".encode("ascii")
    q = np.rint(image.data * maxval)
    payload = q.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_png(path: str) -> GrayImage:
    """Read an 8/16-bit grayscale PNG (requires Pillow)."""
    try:
        from PIL import Image
    except ImportError:
        raise RasterError(
            f"{path}: PNG support requires Pillow (install ovaltrack[png])"
        ) from None
    with Image.open(path) as im:
        if im.mode == "L":
            maxval = 255
        elif im.mode in ("I;16", "I;16B", "I;16L"):
            maxval = 65535
        else:
            raise RasterError(f"{path}: not an 8/16-bit grayscale PNG (mode={im.mode})")
        data = np.asarray(im, dtype=np.float64) / float(maxval)
    return GrayImage(data)


def load_image(path: str) -> GrayImage:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".png":
        return read_png(path)
    raise RasterError(f"{path}: unsupported image format {ext!r}")


def load_sequence(path_pattern: str) -> list[GrayImage]:
    """Load all frames matching a glob pattern, ordered by filename."""
    paths = sorted(glob.glob(path_pattern))
    if not paths:
        raise RasterError(f"no frames matched pattern {path_pattern!r}")
    return [load_image(p) for p in paths]


def extract_patch(image: GrayImage, center, half_extents, orientation: float) -> Patch:
    """Resample the rotated rectangle around ``center`` with bilinear interpolation.

    Sample coordinates outside the image are clamped to the nearest border
    pixel, so every input is valid.  Patch pixel (u, v), with u along the
    first half extent, samples the image at
    center + (u*cos(t) - v*sin(t), u*sin(t) + v*cos(t)).
    """
    a, b = float(half_extents[0]), float(half_extents[1])
    if a <= 0 or b <= 0:
        raise RasterError(f"half extents must be positive, got ({a}, {b})")
    cx, cy = float(center[0]), float(center[1])
    u = np.arange(-math.ceil(a), math.ceil(a) + 1, dtype=np.float64)
    v = np.arange(-math.ceil(b), math.ceil(b) + 1, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    ct, st = math.cos(orientation), math.sin(orientation)
    xs = cx + uu * ct - vv * st
    ys = cy + uu * st + vv * ct
    data = sample_bilinear(image.data, xs, ys)
    return Patch((cx, cy), (a, b), orientation, GrayImage(data))


def sample_bilinear(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation with clamp-to-edge behavior outside the array."""
    h, w = data.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    ix0 = np.clip(x0.astype(np.int64), 0, w - 1)
    iy0 = np.clip(y0.astype(np.int64), 0, h - 1)
    ix1 = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    iy1 = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    top = data[iy0, ix0] * (1.0 - fx) + data[iy0, ix1] * fx
    bot = data[iy1, ix0] * (1.0 - fx) + data[iy1, ix1] * fx
    return top * (1.0 - fy) + bot * fy


def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Run-length encode a boolean mask, row-major, starting with a zero run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_to_mask(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`mask_to_rle`."""
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != flat.size:
        raise RasterError(f"run lengths sum to {pos}, expected {flat.size}")
    return flat.reshape(shape)
