"""Pairwise features scoring how likely two segmented objects are the same.

Eight numbers are derived per pair: center distance, pixel overlap, size
difference, three ray-descriptor shape distances, an intensity-histogram
texture distance and the deflection between principal axes.  All fields
are symmetric in the pair and, except for center distance and overlap,
translation invariant; the ray descriptor is anchored to the mask's
principal axis, which makes it rotation invariant as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .detector import Detection
from .raster import Patch
from .segmenter import SegmentMask, patch_frame_coords

FEATURE_NAMES = ("center_dist", "iou", "size_diff", "ray_dist_sim",
                 "ray_diff_sim", "ray_norm_sim", "texture_dist", "deflection")


class Observation(NamedTuple):
    """One segmented detection: the unit tracked across frames."""

    detection: Detection
    mask: SegmentMask
    patch: Patch


@dataclass(frozen=True)
class RayFeatures:
    """Centroid-to-boundary ray lengths (mean-normalized), their circular
    first differences, and the raw mean length in pixels."""

    distances: np.ndarray
    diffs: np.ndarray
    norm: float


@dataclass(frozen=True)
class FeatureVector:
    center_dist: float
    iou: float
    size_diff: float
    ray_dist_sim: float
    ray_diff_sim: float
    ray_norm_sim: float
    texture_dist: float
    deflection: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES])


def ray_descriptor(mask: SegmentMask, rays: int = 16) -> RayFeatures:
    """Cast ``rays`` rays from the centroid, anchored at the principal axis.

    The recorded length of a ray is the distance to the last mask pixel
    along it, so concavities shorten rays only when the far side is truly
    empty.  Lengths are normalized by their mean; anchoring ray zero to
    the principal axis makes the descriptor independent of orientation.
    """
    if rays < 8:
        raise ValueError(f"need at least 8 rays, got {rays}")
    grid = mask.mask
    if not grid.any():
        raise ValueError("cannot describe an empty mask")
    h, w = grid.shape
    cx, cy = mask.centroid
    t_max = math.hypot(h, w)
    ts = np.arange(0.0, t_max, 0.25)
    angles = mask.principal_axis + 2.0 * np.pi * np.arange(rays) / rays
    dists = np.zeros(rays)
    for r, ang in enumerate(angles):
        xs = np.rint(cx + ts * math.cos(ang)).astype(np.int64)
        ys = np.rint(cy + ts * math.sin(ang)).astype(np.int64)
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        on = np.zeros(ts.size, dtype=bool)
        on[ok] = grid[ys[ok], xs[ok]]
        hit = np.nonzero(on)[0]
        dists[r] = ts[hit[-1]] if hit.size else 0.0
    mean = float(dists.mean())
    normalized = dists / mean if mean > 0 else dists
    diffs = np.roll(normalized, -1) - normalized
    return RayFeatures(normalized, diffs, mean)


def texture_histogram(patch: Patch, mask: SegmentMask, bins: int = 16) -> np.ndarray:
    """Normalized intensity histogram of the mask pixels, bins over [0, 1]."""
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if not mask.mask.any():
        raise ValueError("cannot build a histogram from an empty mask")
    values = patch.data.data[mask.mask]
    idx = np.minimum((values * bins).astype(np.int64), bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    return hist / hist.sum()


@dataclass(frozen=True)
class ObjectDescriptor:
    """Cached per-object quantities backing :func:`pair_features`."""

    centroid: tuple[float, float]
    axis: float
    area: int
    pixel_keys: np.ndarray
    rays: RayFeatures
    histogram: np.ndarray


def describe(obs: Observation, rays: int = 16, bins: int = 16) -> ObjectDescriptor:
    """Frame-coordinate descriptor of one observation."""
    det, mask, patch = obs
    kh, kw = mask.mask.shape
    du = mask.centroid[0] - kw // 2
    dv = mask.centroid[1] - kh // 2
    ct, st = math.cos(det.orientation), math.sin(det.orientation)
    centroid = (det.center[0] + du * ct - dv * st,
                det.center[1] + du * st + dv * ct)
    axis = (mask.principal_axis + det.orientation) % (2.0 * math.pi)
    ix, iy, _ = patch_frame_coords(det, mask.mask.shape)
    offset, stride = 1 << 20, 1 << 21
    keys = (ix[mask.mask] + offset) * stride + (iy[mask.mask] + offset)
    return ObjectDescriptor(centroid, axis, mask.area,
                            np.unique(keys), ray_descriptor(mask, rays),
                            texture_histogram(patch, mask, bins))


def axial_deflection(axis_i: float, axis_j: float) -> float:
    """Angle between two undirected axes, folded into [0, pi/2]."""
    d = abs(axis_i - axis_j) % math.pi
    return min(d, math.pi - d)


def pair_features(obs_i: Observation, obs_j: Observation,
                  rays: int = 16, bins: int = 16,
                  cache: dict | None = None) -> FeatureVector:
    """Feature vector for one candidate assignment between two observations.

    ``cache`` (keyed by observation identity) avoids recomputing the
    per-object descriptors when scoring many pairs.
    """
    descs = []
    for obs in (obs_i, obs_j):
        if cache is None:
            descs.append(describe(obs, rays, bins))
        else:
            key = id(obs)
            if key not in cache:
                cache[key] = describe(obs, rays, bins)
            descs.append(cache[key])
    return features_from_descriptors(descs[0], descs[1])


def features_from_descriptors(di: ObjectDescriptor, dj: ObjectDescriptor) -> FeatureVector:
    inter = np.intersect1d(di.pixel_keys, dj.pixel_keys, assume_unique=True).size
    union = di.pixel_keys.size + dj.pixel_keys.size - inter
    return FeatureVector(
        center_dist=math.hypot(di.centroid[0] - dj.centroid[0],
                               di.centroid[1] - dj.centroid[1]),
        iou=inter / union if union else 0.0,
        size_diff=abs(di.area - dj.area) / max(di.area, dj.area),
        ray_dist_sim=float(np.linalg.norm(di.rays.distances - dj.rays.distances)),
        ray_diff_sim=float(np.linalg.norm(di.rays.diffs - dj.rays.diffs)),
        ray_norm_sim=abs(di.rays.norm - dj.rays.norm),
        texture_dist=float(np.linalg.norm(di.histogram - dj.histogram)),
        deflection=axial_deflection(di.axis, dj.axis),
    )
