import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbseg import tiler
from nbseg.errors import InvalidArgumentError
from nbseg.tensorcore import make_rng


def brute_weight_map(h, w):
    """Direct evaluation of W = alpha * De / (Dc + De) with explicit loops."""
    centre_rows = [(h - 1) // 2] if h % 2 else [h // 2 - 1, h // 2]
    centre_cols = [(w - 1) // 2] if w % 2 else [w // 2 - 1, w // 2]
    ratio = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            de = min(i, j, h - 1 - i, w - 1 - j)
            dc = min(max(abs(i - ci), abs(j - cj)) for ci in centre_rows for cj in centre_cols)
            ratio[i][j] = de / (de + dc) if de + dc else 0.0
    alpha = h * w / math.fsum(v for row in ratio for v in row)
    return np.array([[alpha * v for v in row] for row in ratio])


def brute_assemble(preds, origins, wmap, padded_shape):
    """Per-pixel weighted average by explicit iteration over covering patches."""
    s = wmap.shape[0]
    ph, pw = padded_shape
    c = preds[0].shape[2]
    out = np.zeros((ph, pw, c))
    for y in range(ph):
        for x in range(pw):
            num = np.zeros(c)
            den = 0.0
            plain = np.zeros(c)
            n = 0
            for p, (r0, c0) in zip(preds, origins):
                if r0 <= y < r0 + s and c0 <= x < c0 + s:
                    wt = wmap[y - r0, x - c0]
                    num += wt * p[y - r0, x - c0]
                    den += wt
                    plain += p[y - r0, x - c0]
                    n += 1
            out[y, x] = num / den if den > 0 else (plain / n if n else 0)
    return out


# -- weight map --------------------------------------------------------------


def test_4x4_matches_brute_force_bitwise():
    w = tiler.loss_weight_map(4, 4)
    oracle = brute_weight_map(4, 4)
    assert np.array_equal(w, oracle)
    # hand values: inner 2x2 has De=1, Dc=0 -> ratio 1; ring ratio 0; alpha = 16/4
    np.testing.assert_array_equal(w[1:3, 1:3], 4.0)
    assert w.sum() == 16.0


@pytest.mark.parametrize("shape", [(3, 3), (3, 8), (5, 5), (6, 9), (17, 12), (32, 32)])
def test_matches_brute_force(shape):
    np.testing.assert_allclose(tiler.loss_weight_map(*shape), brute_weight_map(*shape), rtol=0, atol=1e-12)


def test_odd_centre_takes_alpha():
    w = tiler.loss_weight_map(7, 7)
    ratio = brute_weight_map(7, 7) / w[3, 3]
    assert ratio[3, 3] == 1.0
    assert w[3, 3] == w.max()


@settings(max_examples=80, deadline=None)
@given(st.integers(3, 160), st.integers(3, 160))
def test_weight_map_invariants(h, w):
    m = tiler.loss_weight_map(h, w)
    assert abs(m.mean() - 1.0) < 1e-6
    assert (m >= 0).all()
    assert (m[0] == 0).all() and (m[-1] == 0).all() and (m[:, 0] == 0).all() and (m[:, -1] == 0).all()
    assert np.array_equal(m, m[::-1]) and np.array_equal(m, m[:, ::-1])
    ch, cw = (h - 1) // 2, (w - 1) // 2
    assert m[ch, cw] == m.max()
    if h == w:
        assert np.array_equal(m, np.rot90(m))


@pytest.mark.parametrize("shape", [(2, 2), (1, 5), (5, 2), (0, 4)])
def test_weight_map_rejects_tiny(shape):
    with pytest.raises(InvalidArgumentError):
        tiler.loss_weight_map(*shape)


# -- planning ----------------------------------------------------------------


def test_128_image_stride_64_gives_nine_origins():
    g = tiler.plan_patches(128, 128)
    assert g.padded_shape == (256, 256)
    assert len(g.origins) == 9
    assert g.origins == sorted(set(g.origins))


def test_clamped_last_origin():
    g = tiler.plan_patches(100, 100, patch_size=64, stride=48)
    rows = sorted({r for r, _ in g.origins})
    assert rows[-1] + 64 == g.padded_shape[0]
    assert all(b - a <= 48 for a, b in zip(rows, rows[1:]))


def test_non_overlapping_tiling_covers_once():
    g = tiler.plan_patches(64, 96, patch_size=32, stride=32)
    count = np.zeros(g.padded_shape, dtype=int)
    for r, c in g.origins:
        count[r:r + 32, c:c + 32] += 1
    assert (count == 1).all()


@pytest.mark.parametrize("stride", [0, 129, -3])
def test_bad_stride(stride):
    with pytest.raises(InvalidArgumentError):
        tiler.plan_patches(200, 200, 128, stride)


def test_1000_image_every_pixel_has_positive_weight():
    g = tiler.plan_patches(1000, 1000)
    assert tiler.coverage_weight(g).min() > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 90), st.integers(1, 90), st.sampled_from([8, 16, 32]), st.data())
def test_every_pixel_covered_with_positive_weight(h, w, s, data):
    # with stride s-1 or s, a pixel can sit on the zero-weight border of every
    # patch covering it; assembly then falls back to the plain mean
    stride = data.draw(st.integers(1, s - 2))
    g = tiler.plan_patches(h, w, s, stride)
    assert tiler.coverage_weight(g).min() > 0


# -- assembly ----------------------------------------------------------------


@pytest.mark.parametrize("stride", [16, 32, 64, 128])
def test_constant_predictions_assemble_constant(stride):
    g = tiler.plan_patches(300, 260, 128, stride)
    const = np.broadcast_to(np.array([0.2, 0.3, 0.5]), (128, 128, 3))
    out = tiler.assemble((const for _ in g.origins), g)
    assert out.shape == (300, 260, 3)
    assert np.abs(out - [0.2, 0.3, 0.5]).max() < 1e-12


def test_single_patch_reproduces_prediction_interior():
    g = tiler.PatchGrid(8, 8, [(0, 0)], image_shape=(8, 8), pad=0, padded_shape=(8, 8))
    pred = make_rng(0).dirichlet(np.ones(3), size=(8, 8))
    out = tiler.assemble([pred], g)
    np.testing.assert_allclose(out, pred, atol=1e-12)


def test_zero_weight_pixels_fall_back_to_plain_mean():
    g = tiler.plan_patches(1, 15, 16, 15)
    assert tiler.coverage_weight(g).min() == 0
    rng = make_rng(5)
    preds = [rng.dirichlet(np.ones(3), size=(16, 16)) for _ in g.origins]
    out = tiler.assemble(preds, g)
    ref = brute_assemble(preds, g.origins, tiler.loss_weight_map(16, 16), g.padded_shape)[8:9, 8:23]
    np.testing.assert_allclose(out, ref, atol=1e-12)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


def test_two_overlapping_4x4_patches_match_oracle():
    wmap = tiler.loss_weight_map(4, 4)
    grid = tiler.PatchGrid(4, 2, [(0, 0), (0, 2)], image_shape=(4, 6), pad=0, padded_shape=(4, 6))
    rng = make_rng(3)
    preds = [rng.dirichlet(np.ones(3), size=(4, 4)) for _ in range(2)]
    out = tiler.assemble(preds, grid, wmap)
    np.testing.assert_allclose(out, brute_assemble(preds, grid.origins, wmap, (4, 6)), atol=1e-15)
    # column 0 is only covered by the first patch's zero-weight border: plain mean fallback
    np.testing.assert_allclose(out[:, 0], preds[0][:, 0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 30), st.integers(5, 30), st.integers(2, 8))
def test_random_assembly_matches_oracle_and_sums_to_one(seed, h, w, stride):
    g = tiler.plan_patches(h, w, 8, stride)
    rng = make_rng(seed)
    preds = [rng.dirichlet(np.ones(3), size=(8, 8)) for _ in g.origins]
    out = tiler.assemble(preds, g)
    p = g.pad
    ref = brute_assemble(preds, g.origins, tiler.loss_weight_map(8, 8), g.padded_shape)[p:p + h, p:p + w]
    np.testing.assert_allclose(out, ref, atol=1e-12)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-5)


def test_prediction_count_mismatch():
    g = tiler.plan_patches(50, 50, 16, 8)
    p = np.zeros((16, 16, 3))
    with pytest.raises(InvalidArgumentError):
        tiler.assemble([p] * (len(g.origins) - 1), g)
    with pytest.raises(InvalidArgumentError):
        tiler.assemble([p] * (len(g.origins) + 1), g)


def test_extract_then_assemble_identity():
    img = make_rng(9).random((37, 53, 3))
    g = tiler.plan_patches(37, 53, 16, 8)
    out = tiler.assemble(tiler.extract_patches(img, g), g)
    np.testing.assert_allclose(out, img, atol=1e-12)


# -- training patches --------------------------------------------------------


def test_sample_zero():
    img = np.zeros((20, 20, 3))
    assert tiler.sample_training_patches([img], [img], 0, 16, make_rng(0)) == []


def test_sample_exact_size_is_whole_image():
    img = make_rng(1).random((16, 16, 3))
    tgt = make_rng(2).random((16, 16, 3))
    for p, t in tiler.sample_training_patches([img], [tgt], 5, 16, make_rng(0)):
        assert np.array_equal(p, img) and np.array_equal(t, tgt)


def test_sample_deterministic():
    img = make_rng(1).random((40, 50, 3))
    a = tiler.sample_training_patches([img], [img], 6, 16, make_rng(4))
    b = tiler.sample_training_patches([img], [img], 6, 16, make_rng(4))
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))


def test_sample_undersized_names_image():
    ok = np.zeros((32, 32, 3))
    small = np.zeros((10, 40, 3))
    with pytest.raises(InvalidArgumentError, match="image 1"):
        tiler.sample_training_patches([ok, small], [ok, small], 3, 16, make_rng(0))
