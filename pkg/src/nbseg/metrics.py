"""Object- and pixel-level segmentation scores.

Objects are matched one-to-one by greedy descending Dice; unmatched objects
are then split into missed / under-segmented (ground truth side) and false /
over-segmented (prediction side) by how much of each object is covered by
the other map's foreground.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

MATCH_THRESHOLD = 0.2


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class Matching:
    pairs: list  # (gt label, pred label, dice)
    unmatched_gt: list
    unmatched_pred: list
    threshold: float = MATCH_THRESHOLD

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def fn(self):
        return len(self.unmatched_gt)

    @property
    def fp(self):
        return len(self.unmatched_pred)


def _labels_and_areas(m):
    ids = np.unique(m)
    ids = ids[ids != 0]
    return [int(v) for v in ids], np.bincount(m.ravel())


def pair_dice(gt: np.ndarray, pred: np.ndarray) -> dict:
    """Dice for every overlapping (gt label, pred label) pair."""
    g = gt.ravel().astype(np.int64)
    p = pred.ravel().astype(np.int64)
    both = (g > 0) & (p > 0)
    if not both.any():
        return {}
    ga = np.bincount(g)
    pa = np.bincount(p)
    keys, inter = np.unique(np.stack([g[both], p[both]], axis=1), axis=0, return_counts=True)
    return {(int(a), int(b)): 2.0 * int(n) / (int(ga[a]) + int(pa[b])) for (a, b), n in zip(keys, inter)}


def match_objects(gt: np.ndarray, pred: np.ndarray, threshold: float = MATCH_THRESHOLD) -> Matching:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise InvalidArgumentError(f"label maps differ in shape: {gt.shape} vs {pred.shape}")
    gt_ids, _ = _labels_and_areas(gt)
    pred_ids, _ = _labels_and_areas(pred)
    cands = sorted(((d, a, b) for (a, b), d in pair_dice(gt, pred).items() if d >= threshold),
                   key=lambda t: (-t[0], t[1], t[2]))
    used_g, used_p, pairs = set(), set(), []
    for d, a, b in cands:
        if a in used_g or b in used_p:
            continue
        used_g.add(a)
        used_p.add(b)
        pairs.append((a, b, d))
    return Matching(
        pairs=pairs,
        unmatched_gt=[a for a in gt_ids if a not in used_g],
        unmatched_pred=[b for b in pred_ids if b not in used_p],
        threshold=threshold,
    )


@dataclass
class ObjectScores:
    precision: float
    recall: float
    f1: float
    zero_division: bool = False


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def object_scores(m: Matching) -> ObjectScores:
    p, z1 = _ratio(m.tp, m.tp + m.fp)
    r, z2 = _ratio(m.tp, m.fn + m.tp)
    f, z3 = _ratio(2 * p * r, p + r)
    return ObjectScores(p, r, f, z1 or z2 or z3)


@dataclass
class ErrorDecomposition:
    tp: int
    fp: int
    fn: int
    md: int
    fd: int
    us: int
    os: int
    p_denominator: int
    s_denominator: int
    mdr: float
    fdr: float
    usr: float
    osr: float
    zero_division: list = field(default_factory=list)


def _coverage(labels: np.ndarray, other_fg: np.ndarray, ids) -> dict:
    if not ids:
        return {}
    area = np.bincount(labels.ravel())
    hit = np.bincount(labels.ravel(), weights=other_fg.ravel().astype(np.float64), minlength=area.size)
    return {i: hit[i] / area[i] for i in ids}


def error_decomposition(gt, pred, m: Matching, md_overlap_threshold: float = MATCH_THRESHOLD) -> ErrorDecomposition:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    gcov = _coverage(gt, pred > 0, m.unmatched_gt)
    pcov = _coverage(pred, gt > 0, m.unmatched_pred)
    md = sum(1 for v in gcov.values() if v < md_overlap_threshold)
    us = len(gcov) - md
    fd = sum(1 for v in pcov.values() if v < md_overlap_threshold)
    os_ = len(pcov) - fd
    tp, fn, fp = m.tp, m.fn, m.fp
    p_den = fn + tp - md
    s_den = tp + fp - fd
    flags = []
    rates = {}
    for name, num, den in (("mdr", md, fn + tp), ("fdr", fd, tp + fp), ("usr", us, p_den), ("osr", os_, s_den)):
        rates[name], z = _ratio(num, den)
        if z:
            flags.append(name)
    return ErrorDecomposition(tp, fp, fn, md, fd, us, os_, p_den, s_den, zero_division=flags, **rates)


def aggregate_dice(m: Matching, gt=None, pred=None) -> float:
    """Mean Dice over matched pairs (0 when nothing matched)."""
    if not m.pairs:
        return 0.0
    return float(np.mean([d for _, _, d in m.pairs]))


def pixel_dice(gt, pred) -> float:
    """Dice of the foreground unions."""
    return dice(np.asarray(gt) > 0, np.asarray(pred) > 0)


REPORT_KEYS = ("tp", "fp", "fn", "precision", "recall", "f1", "dice", "pixel_dice",
               "md", "fd", "us", "os", "mdr", "fdr", "usr", "osr")


def evaluate_pair(gt, pred, threshold: float = MATCH_THRESHOLD, md_overlap_threshold: float = MATCH_THRESHOLD) -> dict:
    m = match_objects(gt, pred, threshold)
    s = object_scores(m)
    e = error_decomposition(gt, pred, m, md_overlap_threshold)
    return {
        "tp": m.tp, "fp": m.fp, "fn": m.fn,
        "precision": s.precision, "recall": s.recall, "f1": s.f1,
        "dice": aggregate_dice(m), "pixel_dice": pixel_dice(gt, pred),
        "md": e.md, "fd": e.fd, "us": e.us, "os": e.os,
        "mdr": e.mdr, "fdr": e.fdr, "usr": e.usr, "osr": e.osr,
    }


def aggregate_rows(rows: dict) -> dict:
    """Image-mean of every score (counts are summed)."""
    if not rows:
        return {k: 0 for k in REPORT_KEYS}
    out = {}
    for k in REPORT_KEYS:
        vals = [r[k] for r in rows.values()]
        out[k] = int(sum(vals)) if k in ("tp", "fp", "fn", "md", "fd", "us", "os") else float(np.mean(vals))
    return out


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:.4f}"


def format_report(rows: dict) -> str:
    """Human table followed by ``image=... key=value`` lines and an aggregate line."""
    agg = aggregate_rows(rows)
    names = list(rows) + ["MEAN"]
    width = max([len(n) for n in names] + [5])
    head = "image".ljust(width) + " " + " ".join(k.rjust(10) for k in REPORT_KEYS)
    lines = [head, "-" * len(head)]
    for name in names:
        r = rows[name] if name in rows else agg
        lines.append(name.ljust(width) + " " + " ".join(_fmt(r[k]).rjust(10) for k in REPORT_KEYS))
    lines.append("")
    for name, r in rows.items():
        lines.append(f"image={name} " + " ".join(f"{k}={_fmt(r[k])}" for k in REPORT_KEYS))
    lines.append("aggregate=mean " + " ".join(f"{k}={_fmt(agg[k])}" for k in REPORT_KEYS))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Read back the key=value lines of :func:`format_report`."""
    out = {}
    for line in text.splitlines():
        if not (line.startswith("image=") or line.startswith("aggregate=")):
            continue
        fields = dict(tok.split("=", 1) for tok in line.split())
        name = fields.pop("image", None) or "aggregate"
        fields.pop("aggregate", None)
        out[name] = {k: (int(v) if k in ("tp", "fp", "fn", "md", "fd", "us", "os") else float(v)) for k, v in fields.items()}
    return out
