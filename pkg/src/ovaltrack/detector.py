"""Sliding-template detection of oval objects in grayscale images.

A normalized DoG kernel is swept over the image at a grid of positions,
a small range of sizes around the nominal object size, and a set of
orientations.  The fit value of a position is the inner product of the
kernel with the (rotated, bilinearly resampled) image patch under it;
positions scoring above a threshold are refined to the best integer
position nearby, de-duplicated by ellipse overlap, and optionally fed to
the segmenter inside an iterative loop that lowers the threshold step by
step while masking out already-processed regions.

The sweep is evaluated as a bank of FFT cross-correlations: rotating the
patch sampling grid and correlating with the axis-aligned kernel is, by
linearity of bilinear interpolation, identical to correlating the image
with the kernel splatted onto the rotated integer grid.  The image is
edge-padded first so border scores match patch extraction exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import fft as sp_fft

from .dog import DogKernel, build_kernel
from .raster import GrayImage, Patch

RECOMMENDED_LAMBDA = (0.75, 0.85)
RECOMMENDED_TAU = (0.01, 0.02)


@dataclass
class Detection:
    """One located object: center (x, y), semi-axes (a, b), orientation, fit."""

    center: tuple[float, float]
    half_extents: tuple[float, float]
    orientation: float
    fit: float
    frame: int = 0
    id: int | None = None


@dataclass
class DetectorConfig:
    nominal_a: float
    nominal_b: float
    size_range: int = 2
    k: float = 0.9
    lambda0: float = 0.82
    tau: float = 0.01
    iterations: int = 4
    n_orientations: int = 8
    scan_stride: int = 2
    nms_iou: float = 0.3

    def validate(self) -> None:
        if not (self.nominal_a > 0 and self.nominal_b > 0):
            raise ValueError("nominal semi-axes must be positive")
        if self.size_range < 0:
            raise ValueError("size_range must be >= 0")
        if self.nominal_a - self.size_range <= 0 or self.nominal_b - self.size_range <= 0:
            raise ValueError("size_range exceeds nominal semi-axes")
        if not (0.0 < self.lambda0 <= 1.0):
            raise ValueError(f"lambda0 must lie in (0, 1], got {self.lambda0}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lambda0 - (self.iterations - 1) * self.tau <= 0:
            raise ValueError("threshold schedule reaches zero before the last iteration")
        if self.n_orientations < 1 or self.scan_stride < 1:
            raise ValueError("n_orientations and scan_stride must be >= 1")
        if not (0.0 <= self.nms_iou <= 1.0):
            raise ValueError("nms_iou must lie in [0, 1]")
        lo, hi = RECOMMENDED_LAMBDA
        if not (lo <= self.lambda0 <= hi):
            warnings.warn(f"lambda0={self.lambda0} outside recommended range [{lo}, {hi}]",
                          stacklevel=2)
        lo, hi = RECOMMENDED_TAU
        if self.tau and not (lo <= self.tau <= hi):
            warnings.warn(f"tau={self.tau} outside recommended range [{lo}, {hi}]",
                          stacklevel=2)

    def thresholds(self) -> list[float]:
        return [self.lambda0 - i * self.tau for i in range(self.iterations)]


def fit_value(kernel: DogKernel, patch: Patch) -> float:
    """Inner product of the normalized kernel with a patch; lies in [-1, 1]."""
    data = patch.data.data
    if data.shape != kernel.shape:
        raise ValueError(f"patch shape {data.shape} != kernel shape {kernel.shape}")
    return float((kernel.samples * data).sum())


def splat_rotated_kernel(kernel: DogKernel, theta: float) -> np.ndarray:
    """Distribute kernel samples onto the integer grid rotated by ``theta``.

    Correlating an image with the result equals extracting a patch rotated
    by ``theta`` at every integer position and scoring it with the
    axis-aligned kernel.
    """
    samples = kernel.samples
    kh, kw = samples.shape
    ca, cb = kw // 2, kh // 2
    u = np.arange(-ca, ca + 1, dtype=np.float64)
    v = np.arange(-cb, cb + 1, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    ct, st = math.cos(theta), math.sin(theta)
    xs = uu * ct - vv * st
    ys = uu * st + vv * ct
    hw = math.ceil(ca * abs(ct) + cb * abs(st)) + 1
    hh = math.ceil(ca * abs(st) + cb * abs(ct)) + 1
    out = np.zeros((2 * hh + 1, 2 * hw + 1))
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            np.add.at(out, (y0 + dy + hh, x0 + dx + hw), samples * wx * wy)
    return out


_SPLAT_CACHE: dict[tuple, np.ndarray] = {}


def _splat_cached(a: float, b: float, k: float, theta: float) -> np.ndarray:
    key = (round(a, 9), round(b, 9), round(k, 9), round(theta, 12))
    got = _SPLAT_CACHE.get(key)
    if got is None:
        got = splat_rotated_kernel(build_kernel(a, b, k), theta)
        if len(_SPLAT_CACHE) < 4096:
            _SPLAT_CACHE[key] = got
        return got
    return got


class _CorrelationBank:
    """Fit-value and footprint-hit maps for every (a, b, theta) combination.

    Holds the edge-padded image spectrum for one image and, when the
    total size fits the budget, caches per-combination kernel spectra so
    repeated scans of same-shape images stay cheap.
    """

    def __init__(self, config: DetectorConfig, shape: tuple[int, int],
                 spectra_budget: int = 256 * 1024 * 1024):
        offs = range(-config.size_range, config.size_range + 1)
        self.combos = [
            (config.nominal_a + da, config.nominal_b + db, i * math.pi / config.n_orientations)
            for da in offs for db in offs for i in range(config.n_orientations)
        ]
        self.k = config.k
        self.shape = shape
        kernels = [_splat_cached(a, b, self.k, t) for a, b, t in self.combos]
        self.pad_y = max(w.shape[0] // 2 for w in kernels)
        self.pad_x = max(w.shape[1] // 2 for w in kernels)
        h, w = shape
        self.fft_shape = (
            sp_fft.next_fast_len(h + 2 * self.pad_y + 2 * self.pad_y),
            sp_fft.next_fast_len(w + 2 * self.pad_x + 2 * self.pad_x),
        )
        spectrum_bytes = self.fft_shape[0] * (self.fft_shape[1] // 2 + 1) * 16
        self.cache_spectra = 2 * len(self.combos) * spectrum_bytes <= spectra_budget
        self._kernel_fft: dict[int, np.ndarray] = {}
        self._support_fft: dict[int, np.ndarray] = {}
        self._image_id = None
        self._image_fft = None
        self._mask_id = None
        self._mask_fft = None

    def _corr(self, field_fft: np.ndarray, idx: int, support: bool) -> np.ndarray:
        cache = self._support_fft if support else self._kernel_fft
        ker_fft = cache.get(idx)
        if ker_fft is None:
            w = _splat_cached(*self.combos[idx][:2], self.k, self.combos[idx][2])
            w = (w != 0.0).astype(np.float64) if support else w
            ker_fft = sp_fft.rfft2(w[::-1, ::-1], s=self.fft_shape)
            if self.cache_spectra:
                cache[idx] = ker_fft
        full = sp_fft.irfft2(field_fft * ker_fft, s=self.fft_shape)
        a, b, theta = self.combos[idx]
        w_shape = _splat_cached(a, b, self.k, theta).shape
        oy = w_shape[0] // 2 + self.pad_y
        ox = w_shape[1] // 2 + self.pad_x
        h, w = self.shape
        return full[oy:oy + h, ox:ox + w]

    def fit_map(self, image: GrayImage, idx: int) -> np.ndarray:
        if self._image_id != id(image):
            padded = np.pad(image.data, (self.pad_y, self.pad_x), mode="edge")
            self._image_fft = sp_fft.rfft2(padded, s=self.fft_shape)
            self._image_id = id(image)
        return self._corr(self._image_fft, idx, support=False)

    def skip_map(self, mask: np.ndarray, idx: int) -> np.ndarray:
        """True where the kernel footprint overlaps any mask pixel."""
        if self._mask_id != id(mask):
            padded = np.pad(mask.astype(np.float64), (self.pad_y, self.pad_x))
            self._mask_fft = sp_fft.rfft2(padded, s=self.fft_shape)
            self._mask_id = id(mask)
        return self._corr(self._mask_fft, idx, support=True) > 0.5


def scan(image: GrayImage, config: DetectorConfig, threshold: float,
         processed_mask: np.ndarray | None = None, frame: int = 0,
         _bank: _CorrelationBank | None = None) -> list[Detection]:
    """All above-threshold, position-refined template hits, unsuppressed.

    Fit values are evaluated on the stride grid for every size and
    orientation combination; positions whose kernel footprint touches
    ``processed_mask`` are skipped.  Every evaluated grid position is
    refined to the best unskipped integer position within +-stride of it,
    refined scores are thresholded, and duplicates from one combination
    are merged.  Hits come back sorted by descending fit, then position.
    """
    h, w = image.data.shape
    if processed_mask is not None and processed_mask.shape != (h, w):
        raise ValueError("processed_mask shape does not match image")
    bank = _bank or _CorrelationBank(config, (h, w))
    stride = config.scan_stride
    use_mask = processed_mask is not None and bool(processed_mask.any())
    hits: list[Detection] = []
    for idx, (a, b, theta) in enumerate(bank.combos):
        fit = bank.fit_map(image, idx)
        if use_mask:
            allowed = ~bank.skip_map(processed_mask, idx)
            usable = np.where(allowed, fit, -np.inf)
        else:
            usable = fit
        # a refined hit can only come from a stride tile whose best pixel
        # beats the threshold, so tiles prefilter the argmax windows
        pad_y = -h % stride
        pad_x = -w % stride
        tiled = np.pad(usable, ((0, pad_y), (0, pad_x)), constant_values=-np.inf)
        tiles = tiled.reshape((h + pad_y) // stride, stride,
                              (w + pad_x) // stride, stride).max(axis=(1, 3))
        ty, tx = np.nonzero(tiles > threshold)
        if ty.size == 0:
            continue
        seen = set()
        for gy, gx in zip(ty * stride, tx * stride):
            y0, y1 = max(gy - stride, 0), min(gy + stride + 1, h)
            x0, x1 = max(gx - stride, 0), min(gx + stride + 1, w)
            window = usable[y0:y1, x0:x1]
            flat = int(np.argmax(window))
            ry = y0 + flat // window.shape[1]
            rx = x0 + flat % window.shape[1]
            if usable[ry, rx] <= threshold or (rx, ry) in seen:
                continue
            seen.add((rx, ry))
            hits.append(Detection((float(rx), float(ry)), (a, b), theta,
                                  float(usable[ry, rx]), frame))
    hits.sort(key=_hit_order)
    return hits


def _hit_order(d: Detection):
    return (-d.fit, d.center[1], d.center[0], d.half_extents[0],
            d.half_extents[1], d.orientation)


def ellipse_iou(d1: Detection, d2: Detection) -> float:
    """Intersection over union of two elliptical footprints (rasterized)."""
    r1 = max(d1.half_extents)
    r2 = max(d2.half_extents)
    dx = d1.center[0] - d2.center[0]
    dy = d1.center[1] - d2.center[1]
    if math.hypot(dx, dy) > r1 + r2:
        return 0.0
    x0 = math.floor(min(d1.center[0] - r1, d2.center[0] - r2))
    x1 = math.ceil(max(d1.center[0] + r1, d2.center[0] + r2))
    y0 = math.floor(min(d1.center[1] - r1, d2.center[1] - r2))
    y1 = math.ceil(max(d1.center[1] + r1, d2.center[1] + r2))
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    xx, yy = np.meshgrid(xs, ys)
    m1 = _inside_ellipse(xx, yy, d1)
    m2 = _inside_ellipse(xx, yy, d2)
    union = int((m1 | m2).sum())
    if union == 0:
        return 0.0
    return float((m1 & m2).sum()) / union


def _inside_ellipse(xx, yy, d: Detection):
    ct, st = math.cos(d.orientation), math.sin(d.orientation)
    dx = xx - d.center[0]
    dy = yy - d.center[1]
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    a, b = d.half_extents
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def suppress_overlaps(hits: list[Detection], nms_iou: float) -> list[Detection]:
    """Greedy overlap suppression in descending fit order.

    A hit survives iff its ellipse IoU with every already-kept hit is at
    most ``nms_iou``.
    """
    kept: list[Detection] = []
    for hit in sorted(hits, key=_hit_order):
        if all(ellipse_iou(hit, other) <= nms_iou for other in kept):
            kept.append(hit)
    return kept


def detect_iterative(image: GrayImage, config: DetectorConfig,
                     segment: Callable | None = None,
                     frame: int = 0, threads: int = 1,
                     _bank: _CorrelationBank | None = None) -> list[tuple[Detection, "SegmentMask"]]:
    """Detect-and-segment with a decreasing threshold schedule.

    Runs ``iterations`` passes with thresholds lambda0, lambda0 - tau, ...
    Every accepted detection is segmented (``segment(image, detection)``
    must return a patch-level SegmentMask) and its frame pixels join the
    processed mask, which excludes those regions from later passes.  Masks
    of accepted detections are clipped against already-claimed pixels in
    descending fit order, so the returned masks are pairwise disjoint;
    detections whose mask is fully claimed are dropped.
    """
    from . import segmenter as seg_mod

    config.validate()
    if segment is None:
        def segment(img, det):
            mask, _ = seg_mod.segment_detection(img, det, config.k)
            return mask
    h, w = image.data.shape
    bank = _bank or _CorrelationBank(config, (h, w))
    processed = np.zeros((h, w), dtype=bool)
    results = []
    for threshold in config.thresholds():
        kept = suppress_overlaps(
            scan(image, config, threshold, processed, frame, _bank=bank),
            config.nms_iou)
        if not kept:
            continue
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=threads) as pool:
                masks = list(pool.map(lambda d: segment(image, d), kept))
        else:
            masks = [segment(image, det) for det in kept]
        for det, segmask in zip(kept, masks):
            clipped = _clip_mask(segmask, det, processed)
            if clipped is None:
                continue
            segmask, frame_xy = clipped
            processed[frame_xy[:, 1], frame_xy[:, 0]] = True
            results.append((det, segmask))
    return results


def _clip_mask(segmask, det: Detection, processed: np.ndarray):
    """Drop mask pixels already claimed or out of frame; None if empty."""
    from . import segmenter as seg_mod

    ix, iy, valid = seg_mod.patch_frame_coords(det, segmask.mask.shape,
                                               processed.shape)
    keep = segmask.mask & valid
    keep[keep] = ~processed[iy[keep], ix[keep]]
    if not keep.any():
        return None
    stats = seg_mod.mask_stats(keep)
    pts = np.stack([ix[stats.mask], iy[stats.mask]], axis=1)
    return stats, np.unique(pts, axis=0)
