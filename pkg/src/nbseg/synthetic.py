"""Synthetic H&E-like tiles with known nucleus instances.

Images are rendered through the Beer-Lambert stain model: haematoxylin
concentration is high inside nuclei, eosin fills the cytoplasm, both are
modulated by smooth noise for texture.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


H_VECTOR = np.array([0.65, 0.70, 0.29])
E_VECTOR = np.array([0.07, 0.99, 0.11])


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def ellipse_mask(shape, cy, cx, a, b, theta):
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    dy, dx = rr - cy, cc - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def random_layout(shape, n, rng, axes=(5.0, 11.0), separation=2, max_tries=4000, margin=0):
    """Instance label map of up to ``n`` non-overlapping ellipses.

    Distinct nuclei are at least ``separation`` background pixels apart
    (Chebyshev gap).
    """
    labels = np.zeros(shape, dtype=np.int32)
    grown = np.zeros(shape, dtype=bool)
    k = 0
    tries = 0
    while k < n and tries < max_tries:
        tries += 1
        a = rng.uniform(*axes)
        b = rng.uniform(*axes)
        theta = rng.uniform(0, np.pi)
        r = max(a, b)
        cy = rng.uniform(margin + r, shape[0] - margin - r) if shape[0] > 2 * (margin + r) else shape[0] / 2
        cx = rng.uniform(margin + r, shape[1] - margin - r) if shape[1] > 2 * (margin + r) else shape[1] / 2
        # work in a window holding the ellipse plus its separation halo
        pad = int(np.ceil(r)) + separation + 1
        y0, y1 = max(int(cy) - pad, 0), min(int(cy) + pad + 1, shape[0])
        x0, x1 = max(int(cx) - pad, 0), min(int(cx) + pad + 1, shape[1])
        m = ellipse_mask((y1 - y0, x1 - x0), cy - y0, cx - x0, a, b, theta)
        win = (slice(y0, y1), slice(x0, x1))
        if not m.any() or (m & grown[win]).any():
            continue
        k += 1
        labels[win][m] = k
        grown[win] |= ndimage.binary_dilation(m, structure=np.ones((3, 3), bool), iterations=separation)
    return labels


def render_he(labels, rng, h_vector=H_VECTOR, e_vector=E_VECTOR, texture=0.25, noise=0.01):
    """RGB float image in [0, 1] for an instance map."""
    shape = labels.shape
    fg = labels > 0

    def smooth(sigma):
        f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
        return f / (f.std() + 1e-12)

    h_conc = np.where(fg, 1.0, 0.08) * (1 + texture * smooth(1.5))
    e_conc = np.where(fg, 0.25, 0.45) * (1 + texture * smooth(4.0))
    # darker rim, as in real chromatin margins
    rim = fg & ~ndimage.binary_erosion(fg, iterations=1)
    h_conc = h_conc + 0.3 * rim
    od = np.clip(h_conc, 0, None)[..., None] * unit(h_vector) + np.clip(e_conc, 0, None)[..., None] * unit(e_vector)
    img = 10.0 ** (-od)
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_tile(size=256, n_nuclei=30, seed=0, **layout_kw):
    """(image, labels) pair; ``size`` is an int or (h, w)."""
    rng = np.random.default_rng(seed)
    shape = (size, size) if np.isscalar(size) else tuple(size)
    labels = random_layout(shape, n_nuclei, rng, **layout_kw)
    return render_he(labels, rng), labels


def two_stain_image(h_vector, e_vector, shape=(64, 64), seed=0, pure_fraction=0.15):
    """Image rendered from known stain vectors with pure-H and pure-E pixels."""
    rng = np.random.default_rng(seed)
    n = shape[0] * shape[1]
    ch = rng.uniform(0.2, 1.2, n)
    ce = rng.uniform(0.2, 1.0, n)
    kind = rng.random(n)
    ce[kind < pure_fraction] = 0.0
    ch[(kind >= pure_fraction) & (kind < 2 * pure_fraction)] = 0.0
    od = ch[:, None] * unit(h_vector) + ce[:, None] * unit(e_vector)
    return (10.0 ** (-od)).reshape(shape + (3,)), np.stack([ch, ce], axis=1).reshape(shape + (2,))


def ideal_probs(ternary: np.ndarray) -> np.ndarray:
    return np.asarray(ternary, dtype=np.float64)
