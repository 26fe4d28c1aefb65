"""Random geometric augmentation of (patch, ternary target) pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .masks import BACKGROUND, BOUNDARY, INSIDE


@dataclass
class AugmentParams:
    elastic_alpha_range: tuple = (100.0, 200.0)
    elastic_sigma: float = 12.0
    rescale_range: tuple = (0.5, 1.5)
    shift_max: int = 16
    rotation_step: float = 0.0  # 0 = continuous angle, 90 = quarter turns only
    elastic: bool = True
    rotate: bool = True
    flip: bool = True
    shift: bool = True
    rescale: bool = True

    def __post_init__(self):
        lo, hi = self.rescale_range
        if not (0 < lo <= hi):
            raise InvalidArgumentError(f"rescale_range must satisfy 0 < lo <= hi, got {self.rescale_range}")
        alo, ahi = self.elastic_alpha_range
        if not (0 <= alo <= ahi):
            raise InvalidArgumentError(f"elastic_alpha_range must be non-negative and ordered, got {self.elastic_alpha_range}")
        if self.elastic_sigma <= 0:
            raise InvalidArgumentError("elastic_sigma must be positive")

    @classmethod
    def disabled(cls, **kw):
        base = dict(elastic=False, rotate=False, flip=False, shift=False, rescale=False)
        base.update(kw)
        return cls(**base)


def elastic_field(h: int, w: int, alpha: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement field, shape (h, w, 2) holding (dx, dy).

    Uniform [-1, 1] noise per component, Gaussian-smoothed (std ``sigma``,
    truncated at 4 sigma, reflect boundary) and scaled by ``alpha``.
    """
    if h < 1 or w < 1 or sigma <= 0:
        raise InvalidArgumentError(f"bad elastic field request h={h} w={w} sigma={sigma}")
    noise = rng.uniform(-1.0, 1.0, size=(2, h, w))
    dx = ndimage.gaussian_filter(noise[0], sigma, mode="reflect", truncate=4.0) * alpha
    dy = ndimage.gaussian_filter(noise[1], sigma, mode="reflect", truncate=4.0) * alpha
    return np.stack([dx, dy], axis=-1)


def _sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear lookup at fractional (rows, cols), reflecting out of range."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [rows, cols], order=1, mode="mirror")
    return np.stack(
        [ndimage.map_coordinates(img[..., c], [rows, cols], order=1, mode="mirror") for c in range(img.shape[-1])],
        axis=-1,
    )


def warp_bilinear(image: np.ndarray, field: np.ndarray) -> np.ndarray:
    """``out(p) = image(p + field(p))`` with bilinear interpolation."""
    h, w = image.shape[:2]
    if field.shape != (h, w, 2):
        raise InvalidArgumentError(f"field shape {field.shape} does not match image {h}x{w}")
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return _sample(image, rr + field[..., 1], cc + field[..., 0])


def binarize_target(t_inside, t_boundary, t_background=None) -> np.ndarray:
    """Re-binarise interpolated target channels into a one-hot triple.

    boundary = t_boundary > 0.5; inside = t_inside > 0 and not boundary;
    background is everything else. Returned in class order
    (background, boundary, inside).
    """
    ti = np.asarray(t_inside, dtype=np.float64)
    tb = np.asarray(t_boundary, dtype=np.float64)
    boundary = tb > 0.5
    inside = (ti > 0) & ~boundary
    out = np.zeros(ti.shape + (3,), dtype=np.float32)
    out[..., BOUNDARY] = boundary
    out[..., INSIDE] = inside
    out[..., BACKGROUND] = ~(boundary | inside)
    return out


def _rotation(deg: float):
    q = deg / 90.0
    if q == int(q):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


def random_augment(patch: np.ndarray, target: np.ndarray, params: AugmentParams, rng: np.random.Generator):
    """Apply rescale, rotation, flip, shift and elastic warp to both arrays.

    The transforms are composed into one backward coordinate map and each
    output is resampled once (bilinear, reflecting borders). When only
    flips, quarter-turns and integer shifts are active every sample lands
    on a pixel centre, so the result is an exact permutation of the input.
    """
    patch = np.asarray(patch)
    target = np.asarray(target)
    h, w = patch.shape[:2]
    if target.shape[:2] != (h, w):
        raise InvalidArgumentError(f"patch {patch.shape} and target {target.shape} are not congruent")
    if not any((params.elastic, params.rotate, params.flip, params.shift, params.rescale)):
        return patch.copy(), target.copy()

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    # Draws happen in a fixed order regardless of which transforms are on.
    scale = rng.uniform(*params.rescale_range)
    if params.rotation_step:
        angle = params.rotation_step * int(rng.integers(0, int(round(360 / params.rotation_step))))
    else:
        angle = rng.uniform(0.0, 360.0)
    flip_v, flip_h = rng.random() < 0.5, rng.random() < 0.5
    sy, sx = (int(v) for v in rng.integers(-params.shift_max, params.shift_max + 1, size=2))
    alpha = rng.uniform(*params.elastic_alpha_range)
    field = elastic_field(h, w, alpha, params.elastic_sigma, rng) if params.elastic else None

    # Walk backwards from output coordinates to source coordinates.
    y, x = rr, cc
    if field is not None:
        y, x = y + field[..., 1], x + field[..., 0]
    if params.shift:
        y, x = y - sy, x - sx
    if params.flip:
        if flip_v:
            y = 2 * cy - y
        if flip_h:
            x = 2 * cx - x
    if params.rotate:
        cos_a, sin_a = _rotation(angle)
        dy, dx = y - cy, x - cx
        y, x = cy + cos_a * dy - sin_a * dx, cx + sin_a * dy + cos_a * dx
    if params.rescale:
        y, x = cy + (y - cy) / scale, cx + (x - cx) / scale

    exact = (
        np.array_equal(y, np.round(y)) and np.array_equal(x, np.round(x))
        and y.min() >= 0 and y.max() <= h - 1 and x.min() >= 0 and x.max() <= w - 1
    )
    if exact:
        yi, xi = y.astype(np.intp), x.astype(np.intp)
        return patch[yi, xi].copy(), target[yi, xi].copy()

    out_img = _sample(patch, y, x).astype(patch.dtype if patch.dtype.kind == "f" else np.float64)
    warped_t = _sample(target.astype(np.float64), y, x)
    out_t = binarize_target(warped_t[..., INSIDE], warped_t[..., BOUNDARY], warped_t[..., BACKGROUND])
    return out_img, out_t.astype(target.dtype if target.dtype.kind == "f" else np.float32)
