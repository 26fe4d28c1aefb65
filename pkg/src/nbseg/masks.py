"""Instance annotations <-> ternary {background, boundary, inside} targets.

Class indices are fixed: 0 background, 1 boundary, 2 inside. The RGB palette
follows the same order (red, green, blue).
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidAnnotationError, InvalidArgumentError, InvalidMaskError

BACKGROUND, BOUNDARY, INSIDE = 0, 1, 2
PALETTE = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)


def _polygon_coverage(poly: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test for grid points, edges inclusive."""
    px = xs[None, :].astype(np.float64)
    py = ys[:, None].astype(np.float64)
    inside = np.zeros((ys.size, xs.size), dtype=bool)
    on_edge = np.zeros_like(inside)
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        # ray crossing to +x
        if y1 != y2:
            straddles = (y1 > py) != (y2 > py)
            xcross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddles & (px < xcross)
        # on-segment test
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        within = (
            (px >= min(x1, x2) - 1e-9) & (px <= max(x1, x2) + 1e-9)
            & (py >= min(y1, y2) - 1e-9) & (py <= max(y1, y2) + 1e-9)
        )
        on_edge |= (np.abs(cross) <= 1e-9 * max(1.0, abs(x2 - x1) + abs(y2 - y1))) & within
    return inside | on_edge


def rasterize_annotations(polygons, width: int, height: int, return_overlap=False):
    """Fill closed polygons into an instance label map.

    Pixel (row r, col c) is sampled at the point (x=c, y=r). A pixel belongs
    to a polygon when that point is inside it (even-odd rule) or on one of
    its edges. Polygon ``k`` gets label ``k + 1``; later polygons overwrite
    earlier ones. With ``return_overlap`` a boolean map of pixels claimed by
    more than one polygon is returned as well.
    """
    labels = np.zeros((height, width), dtype=np.int32)
    hits = np.zeros((height, width), dtype=np.int32)
    for idx, poly in enumerate(polygons):
        poly = np.asarray(poly, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
            raise InvalidAnnotationError("needs at least 3 (x, y) vertices", index=idx)
        x0 = max(int(np.floor(poly[:, 0].min())), 0)
        x1 = min(int(np.ceil(poly[:, 0].max())), width - 1)
        y0 = max(int(np.floor(poly[:, 1].min())), 0)
        y1 = min(int(np.ceil(poly[:, 1].max())), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        cover = _polygon_coverage(poly, np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        labels[y0:y1 + 1, x0:x1 + 1][cover] = idx + 1
        hits[y0:y1 + 1, x0:x1 + 1] += cover
    if return_overlap:
        return labels, hits > 1
    return labels


def disk_offsets(radius: float):
    """Integer (dy, dx) offsets with Euclidean length <= radius, nearest first."""
    r = int(np.floor(radius))
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= radius * radius]
    offs.sort(key=lambda o: (o[0] * o[0] + o[1] * o[1], o))
    return offs


def _shifted(a: np.ndarray, dy: int, dx: int, fill):
    """``out[r, c] = a[r + dy, c + dx]`` with ``fill`` outside the array."""
    h, w = a.shape
    out = np.full_like(a, fill)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = a[ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def instance_to_ternary(labels: np.ndarray, boundary_width: float = 2, overlap=None) -> np.ndarray:
    """Ternary one-hot target (H, W, 3) from an instance label map.

    A nucleus pixel is boundary when some pixel with a different label lies
    within Euclidean distance ``boundary_width``; other nucleus pixels are
    inside. Pixels beyond the image edge are ignored. Pixels flagged in
    ``overlap`` are forced to boundary.
    """
    if boundary_width < 1:
        raise InvalidArgumentError(f"boundary_width must be >= 1, got {boundary_width}")
    labels = np.asarray(labels)
    fg = labels > 0
    boundary = np.zeros(labels.shape, dtype=bool)
    for dy, dx in disk_offsets(boundary_width):
        if dy == 0 and dx == 0:
            continue
        nb = _shifted(labels, dy, dx, fill=-1)
        boundary |= (nb != -1) & (nb != labels)
    boundary &= fg
    if overlap is not None:
        boundary |= np.asarray(overlap, dtype=bool) & fg
    cls = np.full(labels.shape, BACKGROUND, dtype=np.int64)
    cls[fg] = INSIDE
    cls[boundary] = BOUNDARY
    return np.eye(3, dtype=np.float32)[cls]


def ternary_classes(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask).argmax(axis=-1)


def ternary_to_rgb(mask: np.ndarray) -> np.ndarray:
    """uint8 RGB rendering: background red, boundary green, inside blue."""
    return PALETTE[ternary_classes(mask)]


def rgb_to_ternary(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8) if img.dtype.kind == "f" else img.astype(np.uint8)
    img = img[..., :3]
    match = (img[:, :, None, :] == PALETTE[None, None, :, :]).all(axis=-1)
    bad = ~match.any(axis=-1)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise InvalidMaskError(f"off-palette colour {tuple(int(v) for v in img[r, c])}", row=int(r), col=int(c))
    return match.astype(np.float32)


def compact_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber labels to 0..N preserving the order of first appearance."""
    labels = np.asarray(labels)
    flat = labels.ravel()
    vals, first = np.unique(flat, return_index=True)
    order = vals[np.argsort(first)]
    order = order[order != 0]
    lut = np.zeros(int(labels.max(initial=0)) + 1, dtype=labels.dtype)
    lut[order] = np.arange(1, order.size + 1)
    return lut[labels]


def parse_annotation_text(text: str):
    """One polygon per non-empty line: ``x y, x y, x y, ...``."""
    polys = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        pts = []
        for pair in line.split(","):
            parts = pair.split()
            if len(parts) != 2:
                raise InvalidAnnotationError(f"line {lineno}: expected 'x y' pair, got {pair.strip()!r}")
            pts.append((float(parts[0]), float(parts[1])))
        polys.append(pts)
    return polys


def format_annotation_text(polygons) -> str:
    return "".join(", ".join(f"{x:g} {y:g}" for x, y in poly) + "\n" for poly in polygons)
