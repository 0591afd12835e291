import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdfl.freq import (
    EPSILON_STD,
    ChannelStats,
    ChannelStatsAccumulator,
    FrequencyTensor,
    PreprocessError,
    block_dct2d,
    block_idct2d,
    channel_index,
    compute_channel_stats,
    load_cached_tensor,
    normalize,
    preprocess_image,
    regroup,
    rgb_to_ycbcr,
    save_cached_tensor,
    ungroup,
)


def naive_dct8(block):
    """O(N^4) orthonormal DCT-II by the textbook double sum."""
    out = np.zeros((8, 8))
    for u in range(8):
        for v in range(8):
            cu = np.sqrt(1 / 8) if u == 0 else np.sqrt(2 / 8)
            cv = np.sqrt(1 / 8) if v == 0 else np.sqrt(2 / 8)
            s = 0.0
            for x in range(8):
                for y in range(8):
                    s += block[x, y] * np.cos((2 * x + 1) * u * np.pi / 16) * np.cos((2 * y + 1) * v * np.pi / 16)
            out[u, v] = cu * cv * s
    return out


# -- color conversion ----------------------------------------------------------


def test_gray_pixel_has_neutral_chroma():
    for v in (0.0, 17.0, 128.0, 255.0):
        ycc = rgb_to_ycbcr(np.full((1, 1, 3), v))
        np.testing.assert_allclose(ycc[0, 0], [v, 128, 128], atol=1e-9)


def test_black_pixel():
    np.testing.assert_allclose(rgb_to_ycbcr(np.zeros((1, 1, 3)))[0, 0], [0, 128, 128], atol=1e-12)


def test_ycbcr_matches_scalar_formulas():
    rng = np.random.default_rng(0)
    px = rng.uniform(0, 255, size=(1000, 1, 3))
    got = rgb_to_ycbcr(px)
    for i in range(1000):
        r, g, b = px[i, 0]
        expect = (
            0.299 * r + 0.587 * g + 0.114 * b,
            128 - 0.168736 * r - 0.331264 * g + 0.5 * b,
            128 + 0.5 * r - 0.418688 * g - 0.081312 * b,
        )
        np.testing.assert_allclose(got[i, 0], expect, atol=1e-9)


# -- block DCT -------------------------------------------------------------------


def test_constant_block_only_dc():
    out = block_dct2d(np.full((8, 8), 3.5))
    assert out[0, 0] == pytest.approx(8 * 3.5)
    ac = out.copy()
    ac[0, 0] = 0
    np.testing.assert_allclose(ac, 0, atol=1e-12)


def test_zero_plane():
    np.testing.assert_array_equal(block_dct2d(np.zeros((16, 24))), 0)


def test_dct_matches_naive_double_sum():
    rng = np.random.default_rng(1)
    for _ in range(20):
        block = rng.uniform(-128, 128, size=(8, 8))
        np.testing.assert_allclose(block_dct2d(block), naive_dct8(block), atol=1e-8)


def test_dct_blocks_are_independent_and_positioned():
    rng = np.random.default_rng(2)
    plane = rng.normal(size=(16, 24))
    out = block_dct2d(plane)
    for bi in range(2):
        for bj in range(3):
            blk = plane[8 * bi : 8 * bi + 8, 8 * bj : 8 * bj + 8]
            np.testing.assert_allclose(out[8 * bi : 8 * bi + 8, 8 * bj : 8 * bj + 8], naive_dct8(blk), atol=1e-8)


@pytest.mark.parametrize("shape", [(7, 8), (8, 12), (10, 10)])
def test_dct_rejects_non_multiple_of_8(shape):
    with pytest.raises(PreprocessError):
        block_dct2d(np.zeros(shape))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (16, 8), elements=st.floats(-255, 255)))
def test_dct_energy_and_inverse(plane):
    coeffs = block_dct2d(plane)
    for bi in range(2):
        e_in = np.sum(plane[8 * bi : 8 * bi + 8] ** 2)
        e_out = np.sum(coeffs[8 * bi : 8 * bi + 8] ** 2)
        assert e_out == pytest.approx(e_in, rel=1e-6, abs=1e-9)
    np.testing.assert_allclose(block_idct2d(coeffs), plane, atol=1e-6)


# -- regrouping -----------------------------------------------------------------


def test_regroup_shape():
    planes = np.zeros((3, 64, 64))
    assert regroup(planes).coeffs.shape == (8, 8, 192)


def test_regroup_index_arithmetic():
    planes = np.zeros((3, 64, 64))
    planes[0, 2 * 8 + 1, 5 * 8 + 3] = 7.0  # Y plane, block (2, 5), coefficient (1, 3)
    t = regroup(planes)
    assert channel_index(0, 1, 3) == 11
    assert t.coeffs[2, 5, 11] == 7.0
    assert np.count_nonzero(t.coeffs) == 1


def test_regroup_full_mapping():
    rng = np.random.default_rng(3)
    planes = rng.normal(size=(3, 16, 24))
    t = regroup(planes).coeffs
    for p in range(3):
        for i in range(2):
            for j in range(3):
                for u in range(8):
                    for v in range(8):
                        assert t[i, j, p * 64 + u * 8 + v] == planes[p, 8 * i + u, 8 * j + v]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_regroup_roundtrip_exact(bh, bw, seed):
    planes = np.random.default_rng(seed).normal(size=(3, 8 * bh, 8 * bw))
    np.testing.assert_array_equal(ungroup(regroup(planes)), planes)


def test_regroup_rejects_mismatched_planes():
    with pytest.raises(PreprocessError):
        regroup([np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((16, 8))])


def test_plane_major_channel_separation():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 255, size=(32, 32, 3))
    ycc = rgb_to_ycbcr(img)
    base = regroup([block_dct2d(ycc[..., p]) for p in range(3)]).coeffs
    for p in range(3):
        pert = ycc.copy()
        pert[..., p] += rng.normal(size=(32, 32))
        out = regroup([block_dct2d(pert[..., q]) for q in range(3)]).coeffs
        changed = np.any(out != base, axis=(0, 1))
        assert changed[p * 64 : (p + 1) * 64].any()
        others = np.r_[0 : p * 64, (p + 1) * 64 : 192]
        assert not changed[others].any()


# -- statistics -----------------------------------------------------------------


def test_stats_zero_variance_floor():
    t = np.zeros((4, 4, 192))
    t[..., 5] = 3.0
    stats = compute_channel_stats([t])
    assert stats.mean[5] == 3.0
    assert stats.std[5] == EPSILON_STD
    assert stats.count == 1


def test_stats_two_point_mean():
    stats = compute_channel_stats([np.zeros((2, 2, 192)), np.full((2, 2, 192), 2.0)])
    np.testing.assert_allclose(stats.mean, 1.0)
    np.testing.assert_allclose(stats.std, 1.0)


def test_stats_match_two_pass():
    rng = np.random.default_rng(5)
    corpus = [rng.normal(loc=rng.normal(size=192) * 50, scale=rng.uniform(0.1, 30, 192), size=(4, 6, 192))
              for _ in range(10)]
    stats = compute_channel_stats(corpus)
    allv = np.concatenate([c.reshape(-1, 192) for c in corpus])
    np.testing.assert_allclose(stats.mean, allv.mean(0), atol=1e-7)
    np.testing.assert_allclose(stats.std, np.maximum(allv.std(0), EPSILON_STD), atol=1e-7)


def test_stats_merge_equals_single_pass():
    rng = np.random.default_rng(6)
    corpus = [rng.normal(scale=10, size=(2, 3, 192)) for _ in range(9)]
    a, b = ChannelStatsAccumulator(), ChannelStatsAccumulator()
    for t in corpus[:4]:
        a.update(t)
    for t in corpus[4:]:
        b.update(t)
    merged = a.merge(b).finalize()
    single = compute_channel_stats(corpus)
    np.testing.assert_allclose(merged.mean, single.mean, atol=1e-7)
    np.testing.assert_allclose(merged.std, single.std, atol=1e-7)
    assert merged.count == single.count == 9


def test_stats_empty_stream():
    with pytest.raises(PreprocessError):
        compute_channel_stats([])


def test_stats_shape_mismatch():
    with pytest.raises(PreprocessError):
        compute_channel_stats([np.zeros((2, 2, 192)), np.zeros((3, 2, 192))])


def test_stats_json_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    stats = ChannelStats(rng.normal(size=192), rng.uniform(1, 2, 192), 3)
    path = tmp_path / "stats.json"
    stats.save(path)
    d = json.loads(path.read_text())
    assert d["layout"] == "plane_major_uv" and len(d["mean"]) == 192 and d["count"] == 3
    back = ChannelStats.load(path)
    np.testing.assert_array_equal(back.mean, stats.mean)
    np.testing.assert_array_equal(back.std, stats.std)


# -- normalization / pipeline ----------------------------------------------------


def test_normalize_centering_and_identity():
    rng = np.random.default_rng(8)
    mean = rng.normal(size=192)
    t = FrequencyTensor(np.broadcast_to(mean, (3, 3, 192)).copy())
    out = normalize(t, ChannelStats(mean, rng.uniform(1, 2, 192), 1))
    np.testing.assert_allclose(out.coeffs, 0, atol=1e-12)
    assert out.normalized
    x = rng.normal(size=(3, 3, 192))
    ident = normalize(FrequencyTensor(x), ChannelStats(np.zeros(192), np.ones(192), 1))
    np.testing.assert_array_equal(ident.coeffs, x)


def test_normalize_errors():
    stats = ChannelStats(np.zeros(192), np.ones(192), 1)
    with pytest.raises(PreprocessError):
        normalize(FrequencyTensor(np.zeros((2, 2, 192)), normalized=True), stats)
    with pytest.raises(PreprocessError):
        normalize(FrequencyTensor(np.zeros((2, 2, 64))), stats)


def test_self_normalized_corpus_has_zero_mean():
    rng = np.random.default_rng(9)
    corpus = [FrequencyTensor(rng.normal(loc=40, scale=7, size=(4, 4, 192))) for _ in range(10)]
    stats = compute_channel_stats(corpus)
    normed = np.stack([normalize(t, stats).coeffs for t in corpus])
    np.testing.assert_allclose(normed.reshape(-1, 192).mean(0), 0, atol=1e-6)


def test_preprocess_shape():
    assert preprocess_image(np.zeros((256, 256, 3), dtype=np.uint8)).coeffs.shape == (32, 32, 192)


def test_preprocess_black_image_no_stats():
    # chroma planes sit at 128, so their DC terms are 8*128; luma is all zero
    t = preprocess_image(np.zeros((16, 16, 3))).coeffs
    np.testing.assert_allclose(t[..., :64], 0, atol=1e-9)
    np.testing.assert_allclose(t[..., 64], 8 * 128)
    np.testing.assert_allclose(t[..., 128], 8 * 128)
    np.testing.assert_allclose(np.delete(t, [64, 128], axis=-1), 0, atol=1e-9)


def test_preprocess_is_composition():
    rng = np.random.default_rng(10)
    img = rng.integers(0, 256, size=(24, 16, 3)).astype(np.uint8)
    stats = ChannelStats(rng.normal(size=192), rng.uniform(1, 3, 192), 1)
    ycc = rgb_to_ycbcr(img)
    manual = normalize(regroup([block_dct2d(ycc[..., p]) for p in range(3)]), stats)
    got = preprocess_image(img, stats)
    np.testing.assert_array_equal(got.coeffs, manual.coeffs)
    np.testing.assert_array_equal(preprocess_image(img, stats).coeffs, got.coeffs)


def test_preprocess_rejects_bad_dims():
    with pytest.raises(PreprocessError):
        preprocess_image(np.zeros((20, 16, 3)))


def test_tensor_cache_roundtrip(tmp_path):
    x = np.random.default_rng(11).normal(size=(4, 4, 192)).astype(np.float32)
    raw = save_cached_tensor(tmp_path, "abc", x)
    assert raw.stat().st_size == x.size * 4
    assert json.loads((tmp_path / "abc.json").read_text())["shape"] == [4, 4, 192]
    np.testing.assert_array_equal(load_cached_tensor(tmp_path, "abc"), x)
    assert load_cached_tensor(tmp_path, "missing") is None
