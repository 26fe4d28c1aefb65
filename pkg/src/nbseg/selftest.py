"""Fast built-in checks run by ``nbseg selftest``.

Each check returns (name, passed, detail). The gradient checks compare the
hand-written backward passes against central differences; the rest compare
fast implementations against direct, loop-based evaluations.
"""

from __future__ import annotations

import math

import numpy as np

from . import masks, metrics, nbnet, postproc, synthetic, tiler
from . import tensorcore as tc

TOLERANCE = {np.float32: 1e-3, np.float64: 1e-5}
# central-difference steps; smaller 64-bit steps let roundoff in f(x+e)-f(x-e)
# dominate for outputs with small gradients (softmax)
STEP = {np.float32: 1e-3, np.float64: 1e-4}


def _shape(rng, channels=None):
    b = int(rng.integers(1, 3))
    h = 2 * int(rng.integers(1, 5))
    w = 2 * int(rng.integers(1, 5))
    c = channels or int(rng.integers(1, 5))
    return (b, h, w, c)


def gradient_cases(rng, dtype):
    """(name, op, tensor, probe) tuples over random shapes up to (2, 8, 8, 4)."""
    def t(shape, scale=1.0):
        return tc.Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)

    def const(shape):
        return tc.Tensor(rng.standard_normal(shape).astype(dtype))

    cases = []
    s = _shape(rng)
    # keep inputs clear of the kink at 0, where central differences straddle
    # two different slopes
    xs = t(s)
    xs.data = np.where(np.abs(xs.data) < 0.05, np.copysign(0.05, xs.data), xs.data).astype(dtype)
    cases.append(("selu", tc.selu, xs, rng.random(s)))

    s = _shape(rng)
    cout = int(rng.integers(1, 5))
    x, w, b = const(s), const((3, 3, s[3], cout)), const((cout,))
    probe = rng.random(s[:3] + (cout,))
    cases.append(("conv2d_same/x", lambda v, w=w, b=b: tc.conv2d_same(v, w, b), t(s), probe))
    cases.append(("conv2d_same/w", lambda v, x=x, b=b: tc.conv2d_same(x, v, b), t((3, 3, s[3], cout)), probe))
    cases.append(("conv2d_same/b", lambda v, x=x, w=w: tc.conv2d_same(x, w, v), t((cout,)), probe))

    s = _shape(rng)
    cases.append(("max_pool2", tc.max_pool2, t(s), rng.random((s[0], s[1] // 2, s[2] // 2, s[3]))))

    s = (int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    cout = int(rng.integers(1, 5))
    x, w, b = const(s), const((2, 2, s[3], cout)), const((cout,))
    probe = rng.random((s[0], 2 * s[1], 2 * s[2], cout))
    cases.append(("transposed_conv2/x", lambda v, w=w, b=b: tc.transposed_conv2(v, w, b), t(s), probe))
    cases.append(("transposed_conv2/w", lambda v, x=x, b=b: tc.transposed_conv2(x, v, b), t((2, 2, s[3], cout)), probe))
    cases.append(("transposed_conv2/b", lambda v, x=x, w=w: tc.transposed_conv2(x, w, v), t((cout,)), probe))

    s = _shape(rng)
    other = const(s[:3] + (2,))
    cases.append(("concat_channels", lambda v: tc.concat_channels([v, other]), t(s), rng.random(s[:3] + (s[3] + 2,))))

    s = _shape(rng, channels=3)
    cases.append(("softmax_channels", tc.softmax_channels, t(s), rng.random(s)))

    s = _shape(rng, channels=3)
    target = np.eye(3, dtype=dtype)[rng.integers(0, 3, size=s[:3])]
    weights = rng.random(s[1:3]).astype(dtype) + 0.5
    cases.append(("weighted_cross_entropy", lambda v: tc.weighted_cross_entropy(tc.softmax_channels(v), target, weights),
                  t(s), None))

    s = _shape(rng)
    seed = int(rng.integers(1 << 30))
    cases.append(("dropout", lambda v: tc.dropout(v, 0.2, tc.make_rng(seed), True), t(s), rng.random(s)))
    return cases


def tiny_network_case(rng):
    """Loss of a depth-1, base-2 network as a function of each parameter (64-bit)."""
    model = nbnet.build_network(nbnet.NetworkConfig(input_size=4, depth=1, base_channels=2, dtype="float64"), rng)
    x = rng.random((2, 4, 4, 3))
    target = np.eye(3)[rng.integers(0, 3, size=(2, 4, 4))]
    weights = tiler.loss_weight_map(4, 4)

    def loss(_):
        return tc.weighted_cross_entropy(nbnet.forward(model, x), target, weights)

    return model, loss


def check_gradients(seed=0, repeats=3):
    out = []
    for dtype in (np.float32, np.float64):
        tol = TOLERANCE[dtype]
        worst = {}
        for r in range(repeats):
            rng = tc.make_rng(seed, r, np.dtype(dtype).itemsize)
            for name, op, x, probe in gradient_cases(rng, dtype):
                worst[name] = max(worst.get(name, 0.0), tc.finite_diff_check(op, x, eps=STEP[dtype], probe=probe))
        for name, err in worst.items():
            out.append((f"gradient {name} ({np.dtype(dtype).name})", err < tol, f"max rel err {err:.2e} (< {tol:g})"))
    model, loss = tiny_network_case(tc.make_rng(seed, 99))
    err = max(tc.finite_diff_check(loss, p, eps=STEP[np.float64]) for p in model.parameters())
    out.append(("gradient tiny network (float64)", err < 1e-5, f"max rel err {err:.2e} (< 1e-05)"))
    return out


def _brute_weight_map(h, w):
    rows = [(h - 1) // 2] if h % 2 else [h // 2 - 1, h // 2]
    cols = [(w - 1) // 2] if w % 2 else [w // 2 - 1, w // 2]
    ratio = []
    for i in range(h):
        for j in range(w):
            de = min(i, j, h - 1 - i, w - 1 - j)
            dc = min(max(abs(i - r), abs(j - c)) for r in rows for c in cols)
            ratio.append(de / (de + dc) if de + dc else 0.0)
    alpha = h * w / math.fsum(ratio)
    return np.array([alpha * v for v in ratio]).reshape(h, w)


def check_weight_map():
    ok = np.array_equal(tiler.loss_weight_map(4, 4), _brute_weight_map(4, 4))
    big = tiler.loss_weight_map(64, 64)
    ok2 = abs(big.mean() - 1) < 1e-6 and np.array_equal(big, np.rot90(big))
    return [("weight map 4x4 equals loop evaluation", ok, "bitwise"),
            ("weight map 64x64 mean 1 and symmetric", ok2, f"mean {big.mean():.9f}")]


def check_seams():
    grid = tiler.plan_patches(300, 300, 128, 64)
    const = np.broadcast_to(np.array([0.2, 0.3, 0.5]), (128, 128, 3))
    dev = float(np.abs(tiler.assemble((const for _ in grid.origins), grid) - [0.2, 0.3, 0.5]).max())
    return [("constant patches assemble seam-free", dev < 1e-6, f"max deviation {dev:.1e}")]


def check_round_trip(n=5):
    worst, count_ok = 1.0, True
    for k in range(n):
        lab = synthetic.random_layout((96, 96), 10, tc.make_rng(k))
        out = postproc.segment(masks.instance_to_ternary(lab))
        count_ok &= out.max() == lab.max()
        for j in range(1, lab.max() + 1):
            best = np.bincount(out[lab == j]).argmax()
            worst = min(worst, metrics.dice(out == best, lab == j))
    return [("mask -> ideal probabilities -> segment round trip", count_ok and worst >= 0.95, f"min Dice {worst:.3f}")]


def check_metrics(n=200):
    rng = tc.make_rng(7)
    ok = True
    for _ in range(n):
        gt = rng.integers(0, 4, size=(8, 8)) * (rng.random((8, 8)) < 0.5)
        pred = rng.integers(0, 4, size=(8, 8)) * (rng.random((8, 8)) < 0.5)
        r = metrics.evaluate_pair(gt, pred)
        ok &= r["md"] + r["us"] == r["fn"] and r["fd"] + r["os"] == r["fp"]
        ok &= all(0 <= r[k] <= 1 for k in ("mdr", "fdr", "usr", "osr"))
    perfect = metrics.evaluate_pair(gt, gt)
    ok_p = perfect["f1"] == 1.0 and perfect["mdr"] == perfect["usr"] == 0.0 if gt.any() else True
    return [("error decomposition partitions FN and FP", bool(ok), f"{n} random pairs"),
            ("perfect prediction scores", bool(ok_p), "F1 1, rates 0")]


def run_all(seed=0):
    results = []
    for fn in (lambda: check_gradients(seed), check_weight_map, check_seams, check_round_trip, check_metrics):
        results.extend(fn())
    return results
