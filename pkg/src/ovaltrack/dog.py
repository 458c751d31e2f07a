"""Closed-form difference-of-Gaussians (DoG) math for elliptical blob templates.

A DoG built from two concentric, axis-aligned, unit-integral Gaussians has
elliptical level sets.  For semi-axes (a, b) and a width ratio k in (0, 1)
there is exactly one choice of the four standard deviations such that the
zero level set is the ellipse with semi-axes (a, b) and the most negative
ring is the ellipse with semi-axes (sqrt(2)*a, sqrt(2)*b):

    sigma_x1 = sqrt((k^2 - 1) * a^2 / (4 ln k))      sigma_x2 = sigma_x1 / k
    sigma_y1 = sqrt((k^2 - 1) * b^2 / (4 ln k))      sigma_y2 = sigma_y1 / k

The narrower Gaussian minus the wider one is then positive exactly inside
the (a, b) ellipse and negative between it and infinity, which makes the
discretized, normalized kernel a matched template for bright ovals with
darker corner regions.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

_SQRT2 = math.sqrt(2.0)


class ParameterError(ValueError):
    """Raised when (a, b, k) lie outside the valid parameter domain."""


@dataclass(frozen=True)
class DogParams:
    """Geometry (a, b, k) plus the four derived Gaussian standard deviations."""

    a: float
    b: float
    k: float
    sigma_x1: float
    sigma_y1: float
    sigma_x2: float
    sigma_y2: float

    @property
    def outer_a(self) -> float:
        """Semi-axis of the most-negative ring along x: sqrt(2) * a."""
        return _SQRT2 * self.a

    @property
    def outer_b(self) -> float:
        """Semi-axis of the most-negative ring along y: sqrt(2) * b."""
        return _SQRT2 * self.b


@dataclass(frozen=True)
class DogKernel:
    """Discretized detection kernel over the rectangle [-a, a] x [-b, b].

    ``samples`` holds the DoG sampled on the integer grid covering
    [-ceil(a), ceil(a)] x [-ceil(b), ceil(b)] (shape (2*ceil(b)+1,
    2*ceil(a)+1)), shifted to zero mean and scaled so the positive part
    sums to one.  Fit values against intensities in [0, 1] therefore lie
    in [-1, 1] and uniform patches score exactly zero.
    """

    half_extents: tuple[float, float]
    samples: np.ndarray
    mean_offset: float
    positive_mass: float

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape


def solve_variances(a: float, b: float, k: float) -> DogParams:
    """Solve for the four standard deviations realizing the (a, b, k) geometry."""
    if not (a > 0 and b > 0):
        raise ParameterError(f"semi-axes must be positive, got a={a}, b={b}")
    if not (0.0 < k < 1.0):
        raise ParameterError(f"k must lie strictly in (0, 1), got k={k}")
    scale = math.sqrt((k * k - 1.0) / (4.0 * math.log(k)))
    sx1 = scale * a
    sy1 = scale * b
    return DogParams(a, b, k, sx1, sy1, sx1 / k, sy1 / k)


def eval_dog(params: DogParams, x, y):
    """Evaluate the signed DoG at (x, y); accepts scalars or arrays.

    Positive at the origin, zero on the (a, b) ellipse, most negative on
    the (sqrt(2)a, sqrt(2)b) ellipse.  Both Gaussians integrate to one;
    the wider, lower-peaked one is subtracted from the narrower one.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx1, sy1 = params.sigma_x1, params.sigma_y1
    sx2, sy2 = params.sigma_x2, params.sigma_y2
    g1 = np.exp(-0.5 * (x / sx1) ** 2 - 0.5 * (y / sy1) ** 2) / (2.0 * np.pi * sx1 * sy1)
    g2 = np.exp(-0.5 * (x / sx2) ** 2 - 0.5 * (y / sy2) ** 2) / (2.0 * np.pi * sx2 * sy2)
    out = g1 - g2
    return float(out) if out.ndim == 0 else out


def build_kernel(a: float, b: float, k: float, pad: int = 0) -> DogKernel:
    """Sample the DoG on the integer grid and normalize it for fit scoring.

    ``pad`` extends the grid beyond the [-a, a] x [-b, b] rectangle by
    whole pixels on every side; detection uses the tight grid, while the
    segmenter pads it to keep more of the negative ring in view.
    """
    params = solve_variances(a, b, k)
    ca, cb = math.ceil(a) + pad, math.ceil(b) + pad
    xs = np.arange(-ca, ca + 1, dtype=np.float64)
    ys = np.arange(-cb, cb + 1, dtype=np.float64)
    grid = eval_dog(params, xs[np.newaxis, :], ys[:, np.newaxis])
    mean = float(grid.mean())
    grid = grid - mean
    pos = float(grid[grid > 0.0].sum())
    grid = grid / pos
    return DogKernel((float(a), float(b)), grid, mean, pos)


build_kernel_cached = functools.lru_cache(maxsize=512)(build_kernel)
