import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biomeshift.calibration import DEFAULT_TEMPERATURES, TransferGrid
from biomeshift.errors import DataError, ShapeError, UndefinedCorrelationError
from biomeshift.shift import (BiomeStats, average_ranks, biome_stats, build_shift_report, composition_vector,
                              cosine_similarity, frechet_distance, frechet_similarity, image_embeddings,
                              similarity_matrices, spearman_rho, spectral_stats)
from biomeshift.vit import ViTConfig, ViTEncoder

from oracles import brute_ranks, brute_spearman, random_psd


def test_spectral_stats_examples(rng):
    const = np.full((3, 2, 2, 2), 0.7)
    mean, cov = spectral_stats(const)
    np.testing.assert_allclose(mean, 0.7)
    np.testing.assert_array_equal(cov, 0.0)
    two = np.array([[[[0.0, 0.0], [2.0, 2.0]]]])
    mean, cov = spectral_stats(two)
    np.testing.assert_array_equal(mean, [1.0, 1.0])
    np.testing.assert_array_equal(cov, [[1.0, 1.0], [1.0, 1.0]])
    data = rng.random((5, 3, 3, 2))
    m1, c1 = spectral_stats(data)
    m2, c2 = spectral_stats(data[::-1])
    np.testing.assert_allclose(m1, m2, rtol=1e-12)
    np.testing.assert_allclose(c1, c2, rtol=1e-12)


def _tiny_encoder():
    return ViTEncoder(ViTConfig(image_size=4, patch=2, channels=1, depth=0, width=4, heads=1,
                                final_norm=False), np.random.default_rng(0))


def test_feature_stats_single_and_duplicated(rng):
    from biomeshift.shift import feature_stats

    enc = _tiny_encoder()
    images = rng.random((3, 4, 4, 1))
    mean1, cov1 = feature_stats(images[:1], enc, [0.0], [1.0])
    np.testing.assert_allclose(cov1, 0.0, atol=1e-12)
    m, c = feature_stats(images, enc, [0.0], [1.0])
    m2, c2 = feature_stats(np.concatenate([images, images]), enc, [0.0], [1.0])
    np.testing.assert_allclose(m, m2, rtol=1e-6)
    np.testing.assert_allclose(c, c2, rtol=1e-6, atol=1e-12)


def test_pooled_embedding_hand_computed():
    enc = ViTEncoder(ViTConfig(image_size=2, patch=1, channels=1, depth=0, width=4, heads=1,
                               final_norm=False), np.random.default_rng(0))
    # 2x2 image, patch 1 -> 4 patches; identity-like projection onto the first coordinate
    enc.patch_weight.data = np.array([[1.0, 0.0, 0.0, 0.0]], np.float32)
    enc.patch_bias.data[:] = 0
    image = np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]])
    from biomeshift.patching import sincos_pos_embed

    pos = sincos_pos_embed(2, 2, 4).mean(axis=0)
    expected = pos + np.array([2.5, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(image_embeddings(image, enc, [0.0], [1.0])[0], expected, atol=1e-6)


def test_composition_examples():
    lab = np.array([0, 0, 0, 2] + [255] * 6, np.uint8)
    np.testing.assert_allclose(composition_vector(lab, 5), [0.75, 0, 0.25, 0, 0])
    np.testing.assert_array_equal(composition_vector(np.full(7, 3, np.uint8), 4), [0, 0, 0, 1])
    with pytest.raises(DataError):
        composition_vector(np.full(3, 255, np.uint8), 4)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40))
def test_composition_sums_to_one(labels):
    assert abs(composition_vector(np.array(labels, np.uint8), 6).sum() - 1.0) <= 1e-9


def test_cosine_examples(rng):
    v = rng.standard_normal(5)
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(DataError):
        cosine_similarity([0, 0], [1, 1])


def test_frechet_examples(rng):
    s = random_psd(rng, 4)
    mu = rng.standard_normal(4)
    assert frechet_distance(mu, s, mu, s) == pytest.approx(0.0, abs=1e-6)
    assert frechet_distance([0.0], [[1.0]], [3.0], [[4.0]]) == pytest.approx(math.sqrt(10), abs=1e-12)
    assert frechet_similarity([0.0], [[1.0]], [0.0], [[1.0]]) == 1.0


def test_frechet_one_dimensional_closed_form(rng):
    for _ in range(100):
        m1, m2 = rng.normal(size=2) * 3
        s1, s2 = rng.uniform(0.01, 4, size=2)
        expected = math.sqrt((m1 - m2) ** 2 + (s1 - s2) ** 2)
        assert frechet_distance([m1], [[s1 * s1]], [m2], [[s2 * s2]]) == pytest.approx(expected, abs=1e-9)


def test_frechet_symmetric_on_random_psd(rng):
    for i in range(100):
        dim = int(rng.integers(1, 7))
        rank = int(rng.integers(1, dim + 1))
        a = (rng.standard_normal(dim), random_psd(rng, dim, rank))
        b = (rng.standard_normal(dim), random_psd(rng, dim))
        assert abs(frechet_distance(*a, *b) - frechet_distance(*b, *a)) <= 1e-9


def test_frechet_diagonal_mode_matches_diagonal_inputs(rng):
    v1, v2 = rng.uniform(0.1, 2, 3), rng.uniform(0.1, 2, 3)
    mu1, mu2 = rng.standard_normal(3), rng.standard_normal(3)
    full = frechet_distance(mu1, np.diag(v1), mu2, np.diag(v2))
    assert frechet_distance(mu1, np.diag(v1), mu2, np.diag(v2), diagonal=True) == pytest.approx(full, abs=1e-9)


def test_frechet_errors():
    with pytest.raises(ShapeError):
        frechet_distance([0, 0], np.eye(2), [0], np.eye(1))
    with pytest.raises(DataError):
        frechet_distance([0, 0], [[1, 0.5], [0, 1]], [0, 0], np.eye(2))
    with pytest.raises(DataError):
        frechet_distance([0, np.nan], np.eye(2), [0, 0], np.eye(2))


def test_spearman_examples():
    x = np.array([0.3, 1.2, -4.0, 2.2, 5.0])
    assert spearman_rho(x, np.exp(x)) == pytest.approx(1.0, abs=1e-12)
    assert spearman_rho(x, -x) == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_array_equal(average_ranks([1, 2, 2, 4]), [1, 2.5, 2.5, 4])
    assert spearman_rho([1, 2, 2, 4], [10, 20, 30, 40]) == pytest.approx(0.9487, abs=1e-4)
    with pytest.raises(UndefinedCorrelationError):
        spearman_rho([1, 1, 1], [1, 2, 3])


def test_spearman_matches_brute_force_with_ties(rng):
    for i in range(100):
        n = int(rng.integers(3, 25))
        x = rng.integers(0, 6, n).astype(float)  # heavy ties
        y = rng.standard_normal(n) if i % 2 else rng.integers(0, 4, n).astype(float)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        np.testing.assert_array_equal(average_ranks(x), brute_ranks(x))
        assert spearman_rho(x, y) == pytest.approx(brute_spearman(x, y), abs=1e-9)


def test_similarity_vs_negative_distance_ranks_identical(rng):
    for _ in range(100):
        d = rng.uniform(0, 5, 12)
        d[rng.integers(0, 12, 3)] = d[0]  # ties survive the monotone map
        acc = rng.random(12)
        assert spearman_rho(1.0 / (1.0 + d), acc) == spearman_rho(-d, acc)


def _stats(mu, comp):
    return BiomeStats(np.asarray(mu, float), np.eye(2) * 0.1, None, None, np.asarray(comp, float), 10, 1)


def test_similarity_matrices_structure():
    stats = {"a": _stats([1, 0], [1, 0]), "b": _stats([0.5, 0.5], [0.5, 0.5]), "c": _stats([0, 1], [0, 1])}
    sims = similarity_matrices(stats)
    assert set(sims) == {"spectral_cosine", "spectral_frechet", "composition_cosine"}
    for m in sims.values():
        np.testing.assert_array_equal(m, m.T)
        assert (np.diag(m)[:, None] >= m).all()
    np.testing.assert_allclose(np.diag(sims["spectral_frechet"]), 1.0)
    np.testing.assert_allclose(np.diag(sims["composition_cosine"]), 1.0)


def test_shift_report_on_ordered_grid():
    stats = {k: _stats([1 + 0.5 * i, 1], [1, 1]) for i, k in enumerate("abcd")}
    dist = np.abs(np.subtract.outer(np.arange(4), np.arange(4)))
    acc = 1.0 - 0.1 * dist
    g = TransferGrid(list("abcd"), DEFAULT_TEMPERATURES, acc, np.zeros((4, 4, 7)), np.ones((4, 4)),
                     np.ones((4, 4)), label="m")
    rep = build_shift_report(stats, g)
    assert rep.spearman["m"]["spectral_frechet"] == pytest.approx(1.0)
    assert math.isnan(rep.spearman["m"]["composition_cosine"])  # constant similarity
    assert len(rep.per_source["m"]["spectral_frechet"]) == 4


def test_biome_stats_with_features(rng):
    enc = _tiny_encoder()
    st_ = biome_stats(rng.random((3, 4, 4, 1)), rng.integers(0, 2, (3, 4, 4)).astype(np.uint8), 2, enc,
                      [0.0], [1.0])
    assert st_.feature_mean.shape == (4,) and st_.feature_cov.shape == (4, 4)
