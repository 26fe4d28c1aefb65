"""Patch weight map, overlapped patch planning and weighted-vote assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InvalidArgumentError


def _center_distance(n: int) -> np.ndarray:
    idx = np.arange(n)
    if n % 2:
        return np.abs(idx - (n - 1) // 2)
    lo, hi = n // 2 - 1, n // 2
    return np.minimum(np.abs(idx - lo), np.abs(idx - hi))


def loss_weight_map(h: int, w: int) -> np.ndarray:
    """Per-pixel loss / vote weights for an h x w patch.

    ``W = alpha * De / (Dc + De)`` where ``De`` is the Chebyshev distance to
    the nearest patch edge and ``Dc`` the Chebyshev distance to the central
    pixel set (1, 2 or 4 pixels). ``alpha`` rescales the map to mean 1.
    Border pixels get weight 0, the centre the maximum.
    """
    if h < 3 or w < 3:
        raise InvalidArgumentError(f"weight map needs h, w >= 3 (a 2-wide map is all border), got {h}x{w}")
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    de = np.minimum(np.minimum(i, h - 1 - i), np.minimum(j, w - 1 - j))
    dc = np.maximum(_center_distance(h)[:, None], _center_distance(w)[None, :])
    denom = de + dc
    ratio = np.where(denom > 0, de / np.where(denom > 0, denom, 1), 0.0)
    alpha = (h * w) / math.fsum(ratio.ravel().tolist())
    return alpha * ratio


@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    origins: list
    image_shape: tuple
    pad: int
    padded_shape: tuple
    padding_mode: str = "reflect"


def _axis_origins(length: int, patch: int, stride: int):
    out = list(range(0, length - patch + 1, stride))
    if out[-1] + patch < length:
        out.append(length - patch)
    return out


def plan_patches(image_h: int, image_w: int, patch_size: int = 128, stride: int = 64, padding_mode="reflect") -> PatchGrid:
    """Sliding-window origins over the image padded by ``patch_size // 2``."""
    if not 1 <= stride <= patch_size:
        raise InvalidArgumentError(f"stride must be in [1, patch_size={patch_size}], got {stride}")
    if image_h < 1 or image_w < 1:
        raise InvalidArgumentError(f"empty image {image_h}x{image_w}")
    pad = patch_size // 2
    ph, pw = image_h + 2 * pad, image_w + 2 * pad
    rows = _axis_origins(ph, patch_size, stride)
    cols = _axis_origins(pw, patch_size, stride)
    origins = [(r, c) for r in rows for c in cols]
    return PatchGrid(patch_size, stride, origins, (image_h, image_w), pad, (ph, pw), padding_mode)


def pad_image(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    p = grid.pad
    widths = ((p, p), (p, p)) + ((0, 0),) * (image.ndim - 2)
    return np.pad(image, widths, mode=grid.padding_mode)


def extract_patches(image: np.ndarray, grid: PatchGrid):
    """Yield patches of the padded image in grid order."""
    padded = pad_image(image, grid)
    s = grid.patch_size
    for r, c in grid.origins:
        yield padded[r:r + s, c:c + s]


def assemble(patch_predictions: Iterable[np.ndarray], grid: PatchGrid, weight_map: np.ndarray | None = None) -> np.ndarray:
    """Weighted-vote reassembly of per-patch probability maps.

    Each pixel is ``sum_k W_k * p_k / sum_k W_k`` over the patches covering
    it, accumulated in grid (row-major) order. Pixels whose total weight is
    zero fall back to the plain mean of the covering patches.
    """
    s = grid.patch_size
    if weight_map is None:
        weight_map = loss_weight_map(s, s)
    weight_map = np.asarray(weight_map, dtype=np.float64)
    if weight_map.shape != (s, s):
        raise InvalidArgumentError(f"weight map shape {weight_map.shape} != patch {s}x{s}")
    ph, pw = grid.padded_shape
    acc = wsum = plain = count = None
    n = 0
    for pred in patch_predictions:
        if n >= len(grid.origins):
            raise InvalidArgumentError(f"got more than {len(grid.origins)} patch predictions")
        pred = np.asarray(pred)
        if pred.shape[:2] != (s, s):
            raise InvalidArgumentError(f"patch prediction {n} has shape {pred.shape}, expected {s}x{s}xC")
        if acc is None:
            c = pred.shape[2]
            acc = np.zeros((ph, pw, c))
            plain = np.zeros((ph, pw, c))
            wsum = np.zeros((ph, pw))
            count = np.zeros((ph, pw))
        r, cc = grid.origins[n]
        acc[r:r + s, cc:cc + s] += weight_map[:, :, None] * pred
        wsum[r:r + s, cc:cc + s] += weight_map
        plain[r:r + s, cc:cc + s] += pred
        count[r:r + s, cc:cc + s] += 1
        n += 1
    if n != len(grid.origins):
        raise InvalidArgumentError(f"got {n} patch predictions for {len(grid.origins)} grid origins")
    zero = wsum <= 0
    out = np.where(zero[..., None], plain / np.maximum(count, 1)[..., None], acc / np.where(zero, 1, wsum)[..., None])
    p = grid.pad
    h, w = grid.image_shape
    return out[p:p + h, p:p + w]


def coverage_weight(grid: PatchGrid, weight_map: np.ndarray | None = None) -> np.ndarray:
    """Total vote weight each original pixel receives."""
    s = grid.patch_size
    if weight_map is None:
        weight_map = loss_weight_map(s, s)
    total = np.zeros(grid.padded_shape)
    for r, c in grid.origins:
        total[r:r + s, c:c + s] += weight_map
    p = grid.pad
    h, w = grid.image_shape
    return total[p:p + h, p:p + w]


def sample_training_patches(images, targets, count: int, patch_size: int, rng: np.random.Generator):
    """Random (patch, target) crops; images chosen uniformly, origins uniform."""
    if len(images) != len(targets):
        raise InvalidArgumentError("images and targets differ in length")
    for k, im in enumerate(images):
        if im.shape[0] < patch_size or im.shape[1] < patch_size:
            raise InvalidArgumentError(f"image {k} is {im.shape[0]}x{im.shape[1]}, smaller than patch {patch_size}")
    out = []
    for _ in range(count):
        k = int(rng.integers(len(images)))
        im, tg = images[k], targets[k]
        r = int(rng.integers(im.shape[0] - patch_size + 1))
        c = int(rng.integers(im.shape[1] - patch_size + 1))
        out.append((im[r:r + patch_size, c:c + patch_size], tg[r:r + patch_size, c:c + patch_size]))
    return out
