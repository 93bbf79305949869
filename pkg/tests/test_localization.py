import numpy as np
import pytest

from wpal.imageio import bilinear_resize
from wpal.layers import FsppResult
from wpal.localization import (
    CorrelationStats,
    bin_fusion_weights,
    body_region,
    estimate_relationship,
    estimate_shape,
    gaussian_mask,
    locate,
    rank_bins,
    read_stats_csv,
    write_stats_csv,
)
from wpal.tensor import Tensor


def brute_force_relationship(scores, labels):
    """Two explicit passes over the score matrix, one per label class."""
    n, bins = scores.shape
    pave = np.zeros(bins)
    nave = np.zeros(bins)
    npos = nneg = 0
    for i in range(n):
        if labels[i] == 1:
            npos += 1
            pave += scores[i]
    for i in range(n):
        if labels[i] == 0:
            nneg += 1
            nave += scores[i]
    pave /= npos
    nave /= nneg
    return pave, nave, pave / np.maximum(nave, 1e-9)


class TestRelationshipStrength:
    def test_strong_detector(self):
        labels = np.array([1, 1, 0, 0])
        scores = np.array([[1.0], [1.0], [0.1], [0.1]])
        stats = estimate_relationship(scores, labels)
        assert stats.pave[0] == 1.0 and stats.nave[0] == pytest.approx(0.1)
        assert stats.rs[0] == pytest.approx(10.0)

    def test_label_independent_detector_is_neutral(self):
        scores = np.full((6, 3), 0.7)
        stats = estimate_relationship(scores, np.array([1, 0, 1, 0, 1, 0]))
        np.testing.assert_allclose(stats.rs, 1.0)

    def test_two_sample_case(self):
        stats = estimate_relationship(np.array([[0.8], [0.2]]), np.array([1, 0]))
        assert (stats.pave[0], stats.nave[0]) == (0.8, 0.2)
        assert stats.rs[0] == pytest.approx(4.0)

    def test_single_class_labels_rejected(self):
        with pytest.raises(ValueError, match="positive and negative"):
            estimate_relationship(np.ones((3, 2)), np.array([1, 1, 1]))

    def test_matches_brute_force_exactly(self, rng):
        scores = rng.uniform(0, 2, (50, 200))
        labels = rng.integers(0, 2, 50)
        labels[0], labels[1] = 1, 0
        stats = estimate_relationship(scores, labels)
        pave, nave, rs = brute_force_relationship(scores, labels)
        np.testing.assert_allclose(stats.pave, pave, rtol=1e-12, atol=0)
        np.testing.assert_allclose(stats.nave, nave, rtol=1e-12, atol=0)
        np.testing.assert_allclose(stats.rs, rs, rtol=1e-12, atol=0)

    def test_label_swap_inverts_rs(self, rng):
        scores = rng.uniform(0.05, 2, (30, 40))
        labels = rng.integers(0, 2, 30)
        labels[0], labels[1] = 1, 0
        a = estimate_relationship(scores, labels)
        b = estimate_relationship(scores, 1 - labels)
        np.testing.assert_array_equal(b.pave, a.nave)
        np.testing.assert_array_equal(b.nave, a.pave)
        np.testing.assert_array_equal(b.rs, a.nave / a.pave)
        np.testing.assert_allclose(a.rs * b.rs, 1.0, rtol=1e-12)


class TestGaussianMask:
    def test_center_value_is_one(self):
        mask = gaussian_mask((7, 5), (3, 2), var=4.0)
        assert mask[3, 2] == 1.0
        assert np.all(mask > 0) and np.all(mask <= 1)

    def test_variance_rule_from_image_and_detector_sizes(self):
        var = (96 * 48) / (12 * 6)
        assert var == 64.0
        mask = gaussian_mask((12, 6), (5, 3), var)
        assert mask[5, 3] == 1.0

    def test_value_at_two_var_distance(self):
        var = 8.0
        mask = gaussian_mask((40, 40), (20, 20), var)
        assert mask[24, 20] == pytest.approx(np.exp(-1.0))  # squared distance 16 = 2*var

    def test_nonpositive_var_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            gaussian_mask((4, 4), (1, 1), 0.0)


def _single_bin_setup(score, amap_value, pave, nave, rs, loc=(1, 2), shape=(3, 4)):
    scores = Tensor(np.array([score]))
    locations = np.array([loc], dtype=np.int64)
    detections = [FsppResult(scores, locations)]
    activation_maps = [Tensor(np.full((1,) + shape, amap_value))]
    stats = CorrelationStats(np.array([pave]), np.array([nave]), np.array([rs]))
    return detections, activation_maps, stats


class TestShapeEstimation:
    def test_fusion_weights_sum_to_one(self, rng):
        scores = Tensor(rng.uniform(0.1, 1.0, 6))
        detections = [FsppResult(scores, np.zeros((6, 2), dtype=np.int64))]
        stats = CorrelationStats(rng.uniform(0.2, 1.0, 6), rng.uniform(0.2, 1.0, 6),
                                 rng.uniform(0.5, 4.0, 6))
        for pred in (0.9, 0.1):
            w = bin_fusion_weights(detections, stats, pred)
            assert w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_rs_ratio_splits_weights(self):
        scores = Tensor(np.array([0.5, 0.5]))
        detections = [FsppResult(scores, np.zeros((2, 2), dtype=np.int64))]
        stats = CorrelationStats(np.array([0.5, 0.5]), np.array([0.1, 0.1]),
                                 np.array([10.0, 1.0]))
        w = bin_fusion_weights(detections, stats, pred := 0.8)
        assert pred >= 0.5
        np.testing.assert_allclose(w, [10 / 11, 1 / 11])

    def test_negative_prediction_uses_negative_average(self):
        scores = Tensor(np.array([0.4, 0.4]))
        detections = [FsppResult(scores, np.zeros((2, 2), dtype=np.int64))]
        stats = CorrelationStats(np.array([0.1, 0.4]), np.array([0.4, 0.1]),
                                 np.array([1.0, 1.0]))
        w_pos = bin_fusion_weights(detections, stats, 0.9)
        w_neg = bin_fusion_weights(detections, stats, 0.1)
        assert w_pos[0] > w_pos[1]  # normalizes by pave: low pave -> high norm score
        assert w_neg[0] < w_neg[1]

    def test_single_bin_map_is_resized_gaussian(self):
        detections, amaps, stats = _single_bin_setup(
            score=0.8, amap_value=2.0, pave=0.8, nave=0.2, rs=4.0, loc=(1, 2), shape=(3, 4)
        )
        image_shape = (12, 16)
        heat = estimate_shape(0.9, detections, amaps, stats, image_shape)
        var = (16 * 12) / (4 * 3)
        expected = bilinear_resize(2.0 * gaussian_mask((3, 4), (1, 2), var), image_shape)
        np.testing.assert_allclose(heat, expected, rtol=1e-12)
        peak_y, peak_x = np.unravel_index(np.argmax(heat), heat.shape)
        exp_y, exp_x = np.unravel_index(np.argmax(expected), expected.shape)
        assert (peak_y, peak_x) == (exp_y, exp_x)

    def test_all_zero_activation_rejected(self):
        detections, amaps, stats = _single_bin_setup(
            score=0.0, amap_value=0.0, pave=0.5, nave=0.5, rs=1.0
        )
        with pytest.raises(ValueError, match="no active bins"):
            estimate_shape(0.9, detections, amaps, stats, (8, 8))

    def test_map_is_nonnegative_and_finite(self, rng):
        scores = Tensor(rng.uniform(0.1, 1.0, 4))
        locs = np.stack([rng.integers(0, 3, 4), rng.integers(0, 5, 4)], axis=1)
        detections = [FsppResult(scores, locs.astype(np.int64))]
        amaps = [Tensor(rng.uniform(0, 1, (2, 3, 5)))]
        stats = CorrelationStats(rng.uniform(0.2, 1, 4), rng.uniform(0.2, 1, 4),
                                 rng.uniform(0.5, 3, 4))
        heat = estimate_shape(0.7, detections, amaps, stats, (9, 15))
        assert np.all(heat >= 0) and np.all(np.isfinite(heat))


def _two_blob_map(h=40, w=30, c1=(10, 8), c2=(30, 22), sigma=2.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    blob = lambda c: np.exp(-((yy - c[0]) ** 2 + (xx - c[1]) ** 2) / (2 * sigma**2))
    return blob(c1) + blob(c2)


class TestLocate:
    def test_point_mass(self):
        heat = np.zeros((9, 9))
        heat[4, 6] = 1.0
        result = locate(heat, 1)
        np.testing.assert_allclose(result.centroids[0], [4.0, 6.0])
        assert not result.truncated

    def test_two_blobs_recovered_within_one_pixel(self):
        result = locate(_two_blob_map(), 2)
        got = sorted(map(tuple, result.centroids))
        assert abs(got[0][0] - 10) <= 1 and abs(got[0][1] - 8) <= 1
        assert abs(got[1][0] - 30) <= 1 and abs(got[1][1] - 22) <= 1

    def test_masses_are_nonincreasing(self, rng):
        heat = rng.uniform(0, 1, (20, 20)) ** 3
        result = locate(heat, 3)
        assert np.all(np.diff(result.masses) <= 0)

    def test_single_blob_with_k2_reports_split(self):
        heat = _two_blob_map(c1=(20, 15), c2=(20, 15))
        result = locate(heat, 2)
        assert np.linalg.norm(result.centroids[0] - result.centroids[1]) < 6.0
        assert result.masses.sum() > 0

    def test_truncation_flagged_when_too_few_points(self):
        heat = np.zeros((6, 6))
        heat[2, 2] = 1.0
        result = locate(heat, 2)
        assert result.truncated and len(result.centroids) == 1

    def test_constant_map_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            locate(np.full((5, 5), 0.3), 1)

    def test_deterministic(self, rng):
        heat = rng.uniform(0, 1, (25, 18)) ** 2
        a = locate(heat, 3)
        b = locate(heat, 3)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        np.testing.assert_array_equal(a.masses, b.masses)

    def test_scaling_heat_leaves_centroids_unchanged(self):
        heat = _two_blob_map()
        base = locate(heat, 2)
        for c in (7.5, 0.031):
            scaled = locate(c * heat, 2)
            assert np.max(np.abs(scaled.centroids - base.centroids)) <= 0.5


class TestBodyRegion:
    def test_single_map_thresholded_at_its_mean(self):
        heat = _two_blob_map()
        region = body_region([heat])
        scale = region.max() / heat.max()
        expected = np.where(heat > heat.mean(), heat, 0.0)
        np.testing.assert_allclose(region, expected / expected.max(), rtol=1e-9)
        assert np.all(region[heat <= heat.mean()] == 0)
        assert scale > 0

    def test_two_identical_maps_idempotent(self):
        heat = _two_blob_map()
        np.testing.assert_allclose(body_region([heat, heat]), body_region([heat]), rtol=1e-12)

    def test_no_maps_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            body_region([])

    def test_off_center_mass_stays_off_center(self):
        heat = np.zeros((30, 20))
        heat[10:20, 12:18] = 1.0
        region = body_region([heat])
        ys, xs = np.nonzero(region)
        assert xs.mean() > 10  # right half


class TestRankBins:
    def test_sorted_by_strength(self):
        stats = CorrelationStats(np.ones(3), np.ones(3), np.array([1.0, 5.0, 3.0]))
        ranked = rank_bins(stats, np.array([1, 2, 3]), 2)
        assert [(b, lvl) for b, lvl, _ in ranked] == [(1, 2), (2, 3)]

    def test_ties_break_by_bin_index(self):
        stats = CorrelationStats(np.ones(4), np.ones(4), np.full(4, 2.0))
        ranked = rank_bins(stats, np.ones(4, dtype=int), 4)
        assert [b for b, _, _ in ranked] == [0, 1, 2, 3]


class TestStatsCsv:
    def test_round_trip(self, rng, tmp_path):
        bins = 12
        per_attr = {
            "hat": CorrelationStats(rng.uniform(0, 1, bins), rng.uniform(0.1, 1, bins),
                                    rng.uniform(0.5, 3, bins)),
            "bag": CorrelationStats(rng.uniform(0, 1, bins), rng.uniform(0.1, 1, bins),
                                    rng.uniform(0.5, 3, bins)),
        }
        branch_index = np.repeat([1, 2, 3], 4)
        path = tmp_path / "stats.csv"
        write_stats_csv(path, per_attr, branch_index)
        back, branches = read_stats_csv(path)
        assert set(back) == {"hat", "bag"}
        np.testing.assert_array_equal(branches, branch_index)
        for name in per_attr:
            np.testing.assert_array_equal(back[name].pave, per_attr[name].pave)
            np.testing.assert_array_equal(back[name].rs, per_attr[name].rs)
