"""Probability map -> instance label map: threshold, label, dilate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .masks import INSIDE, _shifted, compact_labels, disk_offsets

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class PostprocConfig:
    inside_threshold: float = 0.5
    min_component_area: int = 20
    dilation_radius: float = 2

    def __post_init__(self):
        if not 0 < self.inside_threshold < 1:
            raise InvalidArgumentError(f"inside_threshold must be in (0, 1), got {self.inside_threshold}")
        if self.dilation_radius < 0 or self.min_component_area < 0:
            raise InvalidArgumentError("dilation_radius and min_component_area must be non-negative")


def threshold_inside(probs: np.ndarray, threshold: float = 0.5, inside_channel: int = INSIDE) -> np.ndarray:
    # >= so an exact 0.5 counts as inside
    return np.asarray(probs)[..., inside_channel] >= threshold


def label_components(binary: np.ndarray, min_area: int = 0) -> np.ndarray:
    """8-connected components numbered 1..N in row-major first-pixel order,
    after dropping components smaller than ``min_area`` pixels."""
    labels, n = ndimage.label(np.asarray(binary, dtype=bool), structure=EIGHT_CONNECTED)
    if n and min_area > 0:
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        small = areas < min_area
        small[0] = False
        labels[small[labels]] = 0
    return compact_labels(labels).astype(np.int32)


def dilate_instances(labels: np.ndarray, radius: float) -> np.ndarray:
    """Grow every instance into background pixels within ``radius``.

    Each background pixel within Euclidean distance ``radius`` of some
    instance takes the label of the nearest one (ties: smaller label).
    Labelled pixels keep their label, so instances never merge.
    """
    if radius < 0:
        raise InvalidArgumentError(f"radius must be >= 0, got {radius}")
    labels = np.asarray(labels)
    out = labels.copy()
    if radius == 0 or not labels.any():
        return out
    bg = labels == 0
    best_d = np.full(labels.shape, np.iinfo(np.int64).max, dtype=np.int64)
    best_l = np.zeros_like(labels)
    for dy, dx in disk_offsets(radius):
        if dy == 0 and dx == 0:
            continue
        d2 = dy * dy + dx * dx
        nb = _shifted(labels, dy, dx, fill=0)
        cand = bg & (nb > 0) & ((d2 < best_d) | ((d2 == best_d) & (nb < best_l)))
        best_d[cand] = d2
        best_l[cand] = nb[cand]
    grow = bg & (best_l > 0)
    out[grow] = best_l[grow]
    return out


def segment(probs: np.ndarray, config: PostprocConfig | None = None, inside_channel: int = INSIDE) -> np.ndarray:
    config = config or PostprocConfig()
    binary = threshold_inside(probs, config.inside_threshold, inside_channel)
    labels = label_components(binary, config.min_component_area)
    return dilate_instances(labels, config.dilation_radius)


def overlay_rgb(labels: np.ndarray, image: np.ndarray | None = None, seed: int = 0, opacity: float = 0.5) -> np.ndarray:
    """uint8 rendering with a random colour per instance."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    colours = rng.integers(40, 256, size=(int(labels.max(initial=0)) + 1, 3)).astype(np.float64)
    colours[0] = 0
    rgb = colours[labels]
    if image is not None:
        base = np.asarray(image, dtype=np.float64)[..., :3] * 255.0
        fg = (labels > 0)[..., None]
        rgb = np.where(fg, (1 - opacity) * base + opacity * rgb, base)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)
