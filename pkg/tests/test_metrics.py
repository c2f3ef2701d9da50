"""Tests for segmentation metrics and landmark evaluation."""

import math

import numpy as np
import pytest
import torch

import reference
from hpcap.metrics import (
    Landmarks,
    LandmarkPredictor,
    append_metrics_csv,
    centroid_features,
    encode_segmentation,
    fit_centroid_mapping,
    metric_record,
    ncd,
    nme,
    predict_landmarks_deep,
    predict_landmarks_linear,
    train_landmark_predictor,
    write_metrics_json,
)


def random_labels(rng, size, num_parts, blob=3):
    """Label map with one square blob per part at random positions."""
    labels = np.zeros((size, size), dtype=np.int64)
    for n in range(1, num_parts + 1):
        i, j = rng.integers(0, size - blob, size=2)
        labels[i : i + blob, j : j + blob] = n
    return labels


class TestNCD:
    def test_single_pixel_part(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[3, 4] = 1
        assert ncd(labels, 1) == pytest.approx(0.0)

    def test_two_pixels_distance_two(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[2, 2] = 1
        labels[2, 4] = 1
        assert ncd(labels, 1) == pytest.approx(1.0)

    def test_upsampling_doubles_distance(self):
        rng = np.random.default_rng(0)
        labels = random_labels(rng, 32, 3, blob=6)
        up = np.kron(labels, np.ones((2, 2), dtype=np.int64))
        assert ncd(up, 3) == pytest.approx(2 * ncd(labels, 3), rel=0.02)
        # and the upsampled value still matches the scalar oracle exactly
        assert ncd(up, 3) == pytest.approx(reference.ncd_ref(up.tolist(), 3), rel=1e-9)

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        labels = random_labels(rng, 24, 2)
        shifted = np.roll(labels, (3, 5), axis=(0, 1))
        assert ncd(labels, 2) == pytest.approx(ncd(shifted, 2), rel=1e-9)

    def test_part_permutation_invariance(self):
        rng = np.random.default_rng(2)
        labels = random_labels(rng, 24, 3)
        permuted = np.zeros_like(labels)
        for old, new in ((1, 3), (2, 1), (3, 2)):
            permuted[labels == old] = new
        assert ncd(labels, 3) == pytest.approx(ncd(permuted, 3), rel=1e-9)

    def test_empty_parts_skipped(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[1, 1] = 2  # part 1 and 3 empty
        assert ncd(labels, 3) == pytest.approx(0.0)

    def test_fully_empty_raises(self):
        with pytest.raises(ValueError, match="empty segmentation"):
            ncd(np.zeros((8, 8), dtype=np.int64), 2)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            labels = rng.integers(0, 4, size=(8, 8))
            if (labels > 0).sum() == 0:
                continue
            assert ncd(labels, 3) == pytest.approx(
                reference.ncd_ref(labels.tolist(), 3), rel=1e-9
            )


class TestNME:
    def test_perfect_prediction(self):
        pts = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert nme(pts, Landmarks(pts.copy(), 10.0)) == pytest.approx(0.0)

    def test_single_landmark_off_by_interocular(self):
        gt = Landmarks(np.array([[0.0, 0.0]]), 5.0)
        assert nme(np.array([[0.0, 5.0]]), gt) == pytest.approx(100.0)

    def test_half_average(self):
        gt = Landmarks(np.array([[0.0, 0.0], [10.0, 10.0]]), 4.0)
        pred = np.array([[0.0, 4.0], [10.0, 10.0]])
        assert nme(pred, gt) == pytest.approx(50.0)

    def test_zero_interocular_raises(self):
        gt = Landmarks(np.array([[0.0, 0.0]]), 0.0)
        with pytest.raises(ValueError):
            nme(np.array([[1.0, 1.0]]), gt)

    def test_similarity_transform_invariance(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(0, 50, (5, 2))
        gt_pts = rng.uniform(0, 50, (5, 2))
        d = float(np.linalg.norm(gt_pts[0] - gt_pts[1]))
        base = nme(pred, Landmarks(gt_pts, d))

        angle, scale = 0.7, 2.3
        rot = scale * np.array(
            [[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]
        )
        shift = np.array([13.0, -4.0])
        pred_t = pred @ rot.T + shift
        gt_t = gt_pts @ rot.T + shift
        d_t = float(np.linalg.norm(gt_t[0] - gt_t[1]))
        assert nme(pred_t, Landmarks(gt_t, d_t)) == pytest.approx(base, rel=1e-9)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            pred = rng.uniform(0, 32, (5, 2))
            gt = rng.uniform(0, 32, (5, 2))
            d = rng.uniform(1.0, 10.0)
            assert nme(pred, Landmarks(gt, d)) == pytest.approx(
                reference.nme_ref(pred.tolist(), gt.tolist(), d), rel=1e-9
            )


class TestCentroidMapping:
    def test_identity_recovered(self):
        rng = np.random.default_rng(0)
        pairs = []
        for _ in range(50):
            labels = random_labels(rng, 32, 3, blob=1)
            feats = centroid_features(labels, 3)
            pairs.append((labels, Landmarks(feats.reshape(-1, 2).copy(), 10.0)))
        mapping = fit_centroid_mapping(pairs, 3)
        for labels, lm in pairs[:10]:
            pred = predict_landmarks_linear(labels, mapping)
            assert float(np.abs(pred - lm.points).max()) < 1e-8

    def test_constant_offset_in_bias(self):
        rng = np.random.default_rng(1)
        offset = np.array([2.5, -1.5])
        pairs = []
        for _ in range(50):
            labels = random_labels(rng, 32, 2, blob=1)
            feats = centroid_features(labels, 2).reshape(-1, 2)
            pairs.append((labels, Landmarks(feats + offset, 10.0)))
        mapping = fit_centroid_mapping(pairs, 2)
        pred = predict_landmarks_linear(pairs[0][0], mapping)
        assert np.allclose(pred, pairs[0][1].points, atol=1e-7)

    def test_beats_shuffled_label_baseline(self):
        rng = np.random.default_rng(2)
        mat = rng.normal(0, 0.5, (6, 10)) + np.eye(6, 10)
        pairs = []
        for _ in range(200):
            labels = random_labels(rng, 32, 3, blob=1)
            feats = centroid_features(labels, 3)
            pts = (feats @ mat).reshape(-1, 2) + rng.normal(0, 0.3, (5, 2))
            pairs.append((labels, Landmarks(pts, 12.0)))
        train, test = pairs[:150], pairs[150:]

        mapping = fit_centroid_mapping(train, 3)
        real = np.mean(
            [nme(predict_landmarks_linear(lbl, mapping), lm) for lbl, lm in test]
        )

        perm = rng.permutation(len(train))
        shuffled = [(train[i][0], train[perm[i]][1]) for i in range(len(train))]
        mapping_shuf = fit_centroid_mapping(shuffled, 3)
        shuf = np.mean(
            [nme(predict_landmarks_linear(lbl, mapping_shuf), lm) for lbl, lm in test]
        )
        assert real < shuf

    def test_empty_part_uses_center_fallback(self):
        labels = np.zeros((16, 16), dtype=np.int64)
        labels[2, 2] = 1  # part 2 missing
        feats = centroid_features(labels, 2)
        assert feats.tolist() == [2.0, 2.0, 7.5, 7.5]

    def test_empty_training_set_raises(self):
        with pytest.raises(ValueError):
            fit_centroid_mapping([], 2)


class TestLandmarkPredictor:
    def make_pairs(self, rng, n, size=64, num_parts=3):
        pairs = []
        for _ in range(n):
            labels = random_labels(rng, size, num_parts, blob=4)
            feats = centroid_features(labels, num_parts).reshape(-1, 2)
            pts = np.vstack([feats, feats.mean(axis=0, keepdims=True)])
            pairs.append((labels, Landmarks(pts, 10.0)))
        return pairs

    def test_single_sample_memorization(self):
        rng = np.random.default_rng(0)
        pairs = self.make_pairs(rng, 1)
        model = train_landmark_predictor(pairs, "1resblock", 4, 64, seed=0)
        pred = predict_landmarks_deep(pairs[0][0], model, 4, 64)
        assert nme(pred, pairs[0][1]) < 1.0

    def test_all_architectures_finite(self):
        rng = np.random.default_rng(1)
        pairs = self.make_pairs(rng, 12)
        for arch in ("2conv", "1resblock", "2resblocks"):
            model = train_landmark_predictor(pairs, arch, 4, 64, epochs=3, seed=0)
            pred = predict_landmarks_deep(pairs[0][0], model, 4, 64)
            value = nme(pred, pairs[0][1])
            assert math.isfinite(value)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(2)
        pairs = self.make_pairs(rng, 8)
        m1 = train_landmark_predictor(pairs, "2conv", 4, 64, epochs=3, seed=5)
        m2 = train_landmark_predictor(pairs, "2conv", 4, 64, epochs=3, seed=5)
        p1 = predict_landmarks_deep(pairs[0][0], m1, 4, 64)
        p2 = predict_landmarks_deep(pairs[0][0], m2, 4, 64)
        assert np.array_equal(p1, p2)

    def test_empty_training_set_raises(self):
        with pytest.raises(ValueError, match="empty training set"):
            train_landmark_predictor([], "2conv", 4, 64)

    def test_unknown_architecture_raises(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            LandmarkPredictor("resnet50", 4, 5)

    def test_encoding_shape(self):
        labels = np.zeros((64, 64), dtype=np.int64)
        enc = encode_segmentation(labels, 5)
        assert enc.shape == (5, 32, 32)
        assert torch.allclose(enc.sum(dim=0), torch.ones(32, 32), atol=1e-6)


def test_metric_records_roundtrip(tmp_path):
    records = [
        metric_record("ncd", "test", 3.25, "abc123"),
        metric_record("nme_l", "test", 8.5, "abc123"),
    ]
    jpath = tmp_path / "metrics.json"
    cpath = tmp_path / "metrics.csv"
    write_metrics_json(jpath, records)
    append_metrics_csv(cpath, records)
    append_metrics_csv(cpath, records)

    import json

    loaded = json.loads(jpath.read_text())
    assert loaded == records
    lines = cpath.read_text().strip().splitlines()
    assert lines[0] == "metric,split,value,config_hash"
    assert len(lines) == 5  # header + 2 records appended twice
