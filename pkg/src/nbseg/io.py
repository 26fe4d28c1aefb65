"""PNG reading and writing for images, label maps, masks and probability maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError
from .masks import instance_to_ternary, rgb_to_ternary, ternary_to_rgb

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")
LABEL_SUFFIX = "_label"
MASK_SUFFIX = "_mask"


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def base_stem(path) -> str:
    """File stem without a trailing ``_label`` / ``_mask`` / ``_prob`` tag."""
    stem = Path(path).stem
    for tag in (LABEL_SUFFIX, MASK_SUFFIX, "_prob", "_overlay"):
        if stem.endswith(tag):
            return stem[: -len(tag)]
    return stem


def read_rgb(path) -> np.ndarray:
    """Float64 RGB image in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            a = np.asarray(im, dtype=np.float64) / 65535.0
            return np.repeat(a[..., None], 3, axis=-1)
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image)
    if a.dtype == np.uint8:
        return a
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)[..., :3], mode="RGB").save(path)


def write_labels(path, labels: np.ndarray) -> None:
    """Single-channel 16-bit PNG, pixel value = instance label."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > 65535 or labels.min(initial=0) < 0:
        raise InvalidArgumentError(f"labels must fit in 16 bits, got range [{labels.min()}, {labels.max()}]")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def read_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P"):
            raise InvalidArgumentError(f"{path}: expected a single-channel label image, got mode {im.mode}")
        return np.asarray(im).astype(np.int32)


def write_mask(path, ternary: np.ndarray) -> None:
    Image.fromarray(ternary_to_rgb(ternary), mode="RGB").save(path)


def read_target(path) -> np.ndarray:
    """Ternary target from either a palette mask or an instance label map."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im.convert("RGB") if mode in ("RGBA", "P") else im)
    if arr.ndim == 3:
        return rgb_to_ternary(arr)
    return instance_to_ternary(arr.astype(np.int32))


def write_probs(path, probs: np.ndarray) -> None:
    """Probability map rendered as RGB (background red, boundary green, inside blue)."""
    write_rgb(path, probs)


def find_partner(directory, stem: str, tags=(MASK_SUFFIX, LABEL_SUFFIX, "")) -> Path:
    """First existing ``<stem><tag><ext>`` in ``directory``."""
    d = Path(directory)
    for tag in tags:
        for ext in IMAGE_SUFFIXES:
            p = d / f"{stem}{tag}{ext}"
            if p.is_file():
                return p
    raise FileNotFoundError(f"no file for {stem!r} in {d}")
