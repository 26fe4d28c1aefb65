"""Pure-Python reference implementations of the object metrics.

Written from the definitions with dictionaries and sets only, so they share
no code with ``nbseg.metrics``.
"""

from itertools import permutations


def objects(label_map):
    out = {}
    for r, row in enumerate(label_map):
        for c, v in enumerate(row):
            if v:
                out.setdefault(int(v), set()).add((r, c))
    return out


def set_dice(a, b):
    if not a and not b:
        return 0.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def greedy_match(gt, pred, threshold=0.2):
    g, p = objects(gt), objects(pred)
    cands = []
    for a, sa in g.items():
        for b, sb in p.items():
            d = set_dice(sa, sb)
            if d >= threshold and d > 0:
                cands.append((-d, a, b))
    cands.sort()
    used_g, used_p, pairs = set(), set(), []
    for nd, a, b in cands:
        if a not in used_g and b not in used_p:
            used_g.add(a)
            used_p.add(b)
            pairs.append((a, b, -nd))
    return pairs, sorted(set(g) - used_g), sorted(set(p) - used_p)


def optimal_tp(gt, pred, threshold=0.2):
    """Largest number of one-to-one pairs with Dice >= threshold (exhaustive)."""
    g, p = objects(gt), objects(pred)
    gl, pl = sorted(g), sorted(p)
    ok = {(a, b) for a in gl for b in pl if set_dice(g[a], p[b]) >= threshold and set_dice(g[a], p[b]) > 0}
    best = 0
    small, large = (gl, pl) if len(gl) <= len(pl) else (pl, gl)
    flip = len(gl) > len(pl)
    for perm in permutations(large + [None] * len(small), len(small)):
        n = 0
        for s, t in zip(small, perm):
            if t is None:
                continue
            pair = (t, s) if flip else (s, t)
            n += pair in ok
        best = max(best, n)
    return best


def decomposition(gt, pred, threshold=0.2, cover=0.2):
    pairs, ug, up = greedy_match(gt, pred, threshold)
    g, p = objects(gt), objects(pred)
    g_union = set().union(*g.values()) if g else set()
    p_union = set().union(*p.values()) if p else set()
    md = sum(1 for a in ug if len(g[a] & p_union) / len(g[a]) < cover)
    fd = sum(1 for b in up if len(p[b] & g_union) / len(p[b]) < cover)
    return dict(tp=len(pairs), fn=len(ug), fp=len(up), md=md, us=len(ug) - md, fd=fd, os=len(up) - fd)
