"""Tests for the synthetic dataset generator and loaders."""

import numpy as np
import pytest

from hpcap.synth import (
    GenSpec,
    SyntheticSample,
    _sample_transforms,
    _apply,
    generate,
    generate_sample,
    generate_two_class,
    load_dataset,
    save_dataset,
    split,
)


def assert_samples_equal(a: SyntheticSample, b: SyntheticSample):
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.foreground, b.foreground)
    assert np.array_equal(a.part_masks, b.part_masks)
    assert np.array_equal(a.landmarks, b.landmarks)


class TestGenerate:
    def test_deterministic_per_seed(self):
        spec = GenSpec(seed=0)
        for a, b in zip(generate(spec, 5), generate(GenSpec(seed=0), 5)):
            assert_samples_equal(a, b)

    def test_seed_changes_output(self):
        a = generate(GenSpec(seed=0), 1)[0]
        b = generate(GenSpec(seed=1), 1)[0]
        assert not np.array_equal(a.image, b.image)

    def test_zero_jitter_all_identical(self):
        spec = GenSpec(
            seed=3,
            part_scale_jitter=0.0,
            part_rotation_jitter=0.0,
            part_translation_jitter=0.0,
            global_scale_jitter=0.0,
            global_rotation_jitter=0.0,
            global_translation_jitter=0.0,
        )
        samples = generate(spec, 4)
        for other in samples[1:]:
            assert_samples_equal(samples[0], other)

    def test_masks_disjoint_and_inside_foreground(self):
        for sample in generate(GenSpec(seed=4), 10):
            union = sample.part_masks.sum(axis=0)
            assert union.max() <= 1
            assert np.all(union <= sample.foreground)

    def test_landmarks_inside_foreground(self):
        for sample in generate(GenSpec(seed=5), 10):
            for r, c in sample.landmarks:
                assert sample.foreground[int(round(r)), int(round(c))] == 1

    def test_landmarks_match_transform_arithmetic(self):
        from hpcap.synth import (
            _LEFT_EYE,
            _MOUTH_CENTER,
            _MOUTH_HALF_LEN,
            _NOSE_APEX,
            _RIGHT_EYE,
        )

        spec = GenSpec(seed=6)
        for idx in range(5):
            sample = generate_sample(spec, idx)
            rng = np.random.default_rng((spec.seed, idx))
            part_mats, global_mat = _sample_transforms(spec, rng)
            s = spec.canvas_size
            base = {
                0: ("left_eye", _LEFT_EYE),
                1: ("right_eye", _RIGHT_EYE),
                2: ("nose", _NOSE_APEX),
                3: ("mouth", (_MOUTH_CENTER[0], _MOUTH_CENTER[1] - _MOUTH_HALF_LEN)),
                4: ("mouth", (_MOUTH_CENTER[0], _MOUTH_CENTER[1] + _MOUTH_HALF_LEN)),
            }
            for n, (name, frac) in base.items():
                pt = np.array([frac[0] * s, frac[1] * s])
                want = _apply(global_mat, _apply(part_mats[name], pt))[0]
                assert np.allclose(sample.landmarks[n], want, atol=1e-12)

    def test_zero_jitter_landmarks_at_base_layout(self):
        spec = GenSpec(
            seed=0,
            part_scale_jitter=0.0,
            part_rotation_jitter=0.0,
            part_translation_jitter=0.0,
            global_scale_jitter=0.0,
            global_rotation_jitter=0.0,
            global_translation_jitter=0.0,
        )
        sample = generate(spec, 1)[0]
        s = spec.canvas_size
        want = np.array(
            [[0.38 * s, 0.38 * s], [0.38 * s, 0.62 * s], [0.46 * s, 0.50 * s],
             [0.72 * s, 0.38 * s], [0.72 * s, 0.62 * s]]
        )
        assert np.allclose(sample.landmarks, want, atol=1e-9)

    def test_eye_landmarks_near_mask_centroids(self):
        for sample in generate(GenSpec(seed=7), 5):
            for n, part in ((0, 1), (1, 2)):  # landmark idx, part mask idx
                mask = sample.part_masks[part]
                ii, jj = np.nonzero(mask)
                centroid = np.array([ii.mean(), jj.mean()])
                assert np.linalg.norm(centroid - sample.landmarks[n]) < 1.5

    def test_excessive_jitter_rejected(self):
        with pytest.raises(ValueError, match="off canvas"):
            GenSpec(global_translation_jitter=20.0)

    def test_image_range(self):
        sample = generate(GenSpec(seed=8), 1)[0]
        assert sample.image.min() >= -1.0
        assert sample.image.max() <= 1.0


class TestTwoClass:
    def test_class_difference_is_one_sprite(self):
        base = dict(seed=9)
        spec_a = GenSpec(**base)
        spec_b = GenSpec(**base, nose_intensity=None)
        samples = generate_two_class(spec_a, spec_b, 6)
        assert [s.class_id for s in samples] == [0, 1, 0, 1, 0, 1]
        for s in samples:
            if s.class_id == 1:
                assert s.part_masks[3].sum() == 0  # nose mask empty
            else:
                assert s.part_masks[3].sum() > 0

    def test_mismatched_canvas_rejected(self):
        with pytest.raises(ValueError, match="canvas"):
            generate_two_class(GenSpec(), GenSpec(canvas_size=32), 2)


class TestStorage:
    def test_roundtrip(self, tmp_path):
        spec = GenSpec(seed=10)
        samples = generate(spec, 3)
        save_dataset(samples, tmp_path / "ds", spec)
        loaded = load_dataset(tmp_path / "ds")
        assert len(loaded) == 3
        for a, b in zip(samples, loaded):
            assert np.allclose(a.image, b.image, atol=1.0 / 127.5 + 1e-6)
            assert np.array_equal(a.foreground, b.foreground)
            assert np.array_equal(a.part_masks, b.part_masks)
            assert np.allclose(a.landmarks, b.landmarks)
            assert np.allclose(a.global_affine, b.global_affine)

    def test_rerun_is_byte_identical(self, tmp_path):
        spec = GenSpec(seed=11)
        for name in ("a", "b"):
            save_dataset(generate(spec, 2), tmp_path / name, spec)
        for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")):
            fa, fb = tmp_path / "a" / rel, tmp_path / "b" / rel
            if fa.is_file():
                assert fa.read_bytes() == fb.read_bytes(), rel

    def test_missing_file_error_names_it(self, tmp_path):
        spec = GenSpec(seed=12)
        save_dataset(generate(spec, 2), tmp_path / "ds", spec)
        victim = tmp_path / "ds" / "foregrounds" / "sample_00001.png"
        victim.unlink()
        with pytest.raises(FileNotFoundError, match="sample_00001"):
            load_dataset(tmp_path / "ds")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            load_dataset(tmp_path)


class TestSplit:
    def test_ninety_ten_exact(self):
        samples = generate(GenSpec(seed=13), 100)
        train, test = split(samples, 0.9, seed=0)
        assert len(train) == 90
        assert len(test) == 10

    def test_same_seed_same_split(self):
        samples = generate(GenSpec(seed=14), 20)
        t1, e1 = split(samples, 0.9, seed=5)
        t2, e2 = split(samples, 0.9, seed=5)
        for a, b in zip(t1 + e1, t2 + e2):
            assert a is b

    def test_no_overlap_full_cover(self):
        samples = generate(GenSpec(seed=15), 30)
        train, test = split(samples, 0.8, seed=1)
        ids = {id(s) for s in train} | {id(s) for s in test}
        assert len(ids) == 30

    def test_full_ratio_rejected(self):
        samples = generate(GenSpec(seed=16), 10)
        with pytest.raises(ValueError):
            split(samples, 1.0, seed=0)
