"""H&E colour normalisation in optical-density space (Macenko-style).

A :class:`StainProfile` holds the haematoxylin and eosin OD vectors of an
image plus the 99th-percentile concentration of each stain. Normalising maps
per-pixel stain concentrations of a source image onto the target profile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientTissueError, InvalidArgumentError

OD_FLOOR = 1.0 / 255.0
BETA = 0.15
ALPHA_PERCENTILE = 1.0
MAX_CONC_PERCENTILE = 99.0
MIN_TISSUE_FRACTION = 0.01
MIN_STAIN_ANGLE_DEG = 1.0


@dataclass
class StainProfile:
    stain_matrix: np.ndarray  # (2, 3): row 0 haematoxylin, row 1 eosin
    max_concentrations: np.ndarray  # (2,)

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64).reshape(2, 3)
        self.max_concentrations = np.asarray(self.max_concentrations, dtype=np.float64).reshape(2)

    def to_text(self) -> str:
        lines = []
        for name, row in zip(("h", "e"), self.stain_matrix):
            for ch, v in zip("rgb", row):
                lines.append(f"{name}_{ch}={float(v)!r}")
        lines.append(f"h_max={float(self.max_concentrations[0])!r}")
        lines.append(f"e_max={float(self.max_concentrations[1])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StainProfile":
        vals = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgumentError(f"stain profile line {lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            try:
                vals[k.strip()] = float(v)
            except ValueError:
                raise InvalidArgumentError(f"stain profile line {lineno}: {v.strip()!r} is not a number") from None
        keys = [f"{s}_{c}" for s in "he" for c in "rgb"] + ["h_max", "e_max"]
        missing = [k for k in keys if k not in vals]
        if missing:
            raise InvalidArgumentError(f"stain profile missing keys: {', '.join(missing)}")
        m = [[vals[f"{s}_{c}"] for c in "rgb"] for s in "he"]
        return cls(np.array(m), np.array([vals["h_max"], vals["e_max"]]))


def rgb_to_od(image: np.ndarray) -> np.ndarray:
    return -np.log10(np.maximum(np.asarray(image, dtype=np.float64), OD_FLOOR))


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.clip(10.0 ** (-np.asarray(od, dtype=np.float64)), 0.0, 1.0)


def _unit(v):
    return v / np.linalg.norm(v)


def concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Per-pixel non-negative least squares for OD ~ c @ stain_matrix.

    Two unknowns, so NNLS is solved exactly: take the unconstrained solution
    when it is non-negative, otherwise the better of the two one-stain fits.
    """
    od = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    m = np.asarray(stain_matrix, dtype=np.float64)
    c = np.linalg.lstsq(m.T, od.T, rcond=None)[0].T
    feasible = np.all(c >= 0, axis=1)
    if not feasible.all():
        sub = od[~feasible]
        best_c = np.zeros((sub.shape[0], 2))
        best_r = np.einsum("ij,ij->i", sub, sub)
        for k in range(2):
            v = m[k]
            ck = np.maximum(sub @ v / (v @ v), 0.0)
            resid = sub - ck[:, None] * v
            r = np.einsum("ij,ij->i", resid, resid)
            better = r < best_r
            best_r = np.where(better, r, best_r)
            best_c[better] = 0.0
            best_c[better, k] = ck[better]
        c[~feasible] = best_c
    return c


def estimate_stain_profile(image: np.ndarray, beta: float = BETA, alpha: float = ALPHA_PERCENTILE) -> StainProfile:
    """Estimate H and E OD vectors from the angular extremes of the tissue OD cloud."""
    img = np.asarray(image, dtype=np.float64)[..., :3]
    od = rgb_to_od(img).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) >= beta]
    if tissue.shape[0] < max(MIN_TISSUE_FRACTION * od.shape[0], 2):
        raise InsufficientTissueError(
            f"only {tissue.shape[0]} of {od.shape[0]} pixels have OD norm >= {beta}"
        )
    _, svals, vt = np.linalg.svd(tissue, full_matrices=False)
    if svals[1] <= 1e-6 * svals[0]:
        raise InsufficientTissueError("optical densities are rank-1; cannot separate two stains")
    plane = vt[:2]
    if plane[0].sum() < 0:
        plane[0] = -plane[0]
    if plane[1].sum() < 0:
        plane[1] = -plane[1]
    proj = tissue @ plane.T
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100 - alpha])
    v1 = _unit(np.array([np.cos(lo), np.sin(lo)]) @ plane)
    v2 = _unit(np.array([np.cos(hi), np.sin(hi)]) @ plane)
    angle = np.degrees(np.arccos(np.clip(abs(v1 @ v2), -1.0, 1.0)))
    if angle < MIN_STAIN_ANGLE_DEG:
        raise InsufficientTissueError(f"stain directions only {angle:.3f} deg apart; a second stain is not present")
    v1 = _unit(np.clip(v1, 0.0, None))
    v2 = _unit(np.clip(v2, 0.0, None))
    # haematoxylin absorbs more red light than eosin
    h, e = (v1, v2) if v1[0] >= v2[0] else (v2, v1)
    m = np.stack([h, e])
    conc = concentrations(rgb_to_od(img), m)
    maxc = np.percentile(conc, MAX_CONC_PERCENTILE, axis=0)
    maxc = np.where(maxc > 0, maxc, 1.0)
    return StainProfile(m, maxc)


def normalize_to_profile(image: np.ndarray, source: StainProfile, target: StainProfile) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)[..., :3]
    shape = img.shape
    conc = concentrations(rgb_to_od(img), source.stain_matrix)
    conc *= target.max_concentrations / source.max_concentrations
    od = conc @ target.stain_matrix
    return od_to_rgb(od).reshape(shape)


def normalize(image: np.ndarray, target: StainProfile) -> np.ndarray:
    return normalize_to_profile(image, estimate_stain_profile(image), target)


def angular_error_deg(a, b) -> float:
    a, b = _unit(np.asarray(a, float)), _unit(np.asarray(b, float))
    return float(np.degrees(np.arccos(np.clip(a @ b, -1.0, 1.0))))
