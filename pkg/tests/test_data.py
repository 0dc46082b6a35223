import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uadi.data import (BENIGN, MALIGNANT, NORMAL, AugParams, DatasetSpec, MaskFormatError, Sample,
                       apply_augmentation, augment, class_counts, draw_augmentation, generate_dataset,
                       generate_sample, load_dataset, read_gray, read_mask, save_dataset, split_dataset,
                       write_mask)

SPEC = DatasetSpec(n_samples=30, image_size=48, lesion_size_range_px=(5.0, 10.0))


def sample(label, seed=0, spec=SPEC):
    return generate_sample(spec, label, np.random.default_rng(seed))


def test_normal_has_null_mask():
    for seed in range(5):
        s = sample(NORMAL, seed)
        assert s.mask.sum() == 0 and s.image.shape == (48, 48, 1)


@pytest.mark.parametrize("seed", range(10))
def test_benign_is_filled_ellipse(seed):
    s = sample(BENIGN, seed)
    a, b = s.meta["axes"]
    assert abs(s.mask.sum() - math.pi * a * b) <= 0.10 * math.pi * a * b


@pytest.mark.parametrize("label", [BENIGN, MALIGNANT])
def test_lesion_masks_nonempty_and_binary(label):
    for seed in range(10):
        s = sample(label, seed)
        assert s.mask.sum() > 0
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_lesion_too_large_rejected():
    with pytest.raises(ValueError, match="larger"):
        generate_sample(DatasetSpec(image_size=16, lesion_size_range_px=(5, 10)), BENIGN, np.random.default_rng(0))
    with pytest.raises(ValueError, match="fit"):
        DatasetSpec(image_size=16, lesion_size_range_px=(5, 10)).validate()


def test_generation_deterministic():
    a, b = sample(MALIGNANT, 3), sample(MALIGNANT, 3)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    d1, d2 = generate_dataset(SPEC), generate_dataset(SPEC)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(d1, d2))


def test_threads_do_not_change_output(monkeypatch):
    base = generate_dataset(SPEC)
    monkeypatch.setenv("UADI_THREADS", "3")
    threaded = generate_dataset(SPEC)
    assert all(np.array_equal(x.image, y.image) and x.label == y.label for x, y in zip(base, threaded))


def test_class_proportions_converge():
    spec = DatasetSpec(n_samples=1000, class_proportions=(0.2, 0.5, 0.3))
    assert class_counts(1000, spec.class_proportions) == [200, 500, 300]
    assert class_counts(7, (1 / 3, 1 / 3, 1 / 3)) == [3, 2, 2]


def test_split_sizes_and_stratification():
    labels = np.repeat([0, 1, 2], [30, 40, 30])
    train, val, test = split_dataset(labels, seed=1)
    assert (len(train), len(val), len(test)) == (70, 15, 15)
    assert sorted(train + val + test) == list(range(100))
    for part, frac in ((train, 0.70), (val, 0.15), (test, 0.15)):
        for c, n in zip(range(3), (30, 40, 30)):
            assert abs(np.sum(labels[part] == c) - frac * n) <= 1
    assert split_dataset(labels, seed=1) == (train, val, test)


def test_split_rejects_tiny_class():
    with pytest.raises(ValueError, match="fewer than 3"):
        split_dataset([0, 0, 0, 1, 1, 2, 2, 2])


def test_identity_augmentation_is_noop():
    s = sample(MALIGNANT, 1)
    out = apply_augmentation(s, AugParams())
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_flip_is_involution():
    s = sample(BENIGN, 2)
    p = AugParams(flip=True)
    twice = apply_augmentation(apply_augmentation(s, p), p)
    np.testing.assert_allclose(twice.image, s.image, atol=1e-6)
    assert np.array_equal(twice.mask, s.mask)


def test_small_rotation_keeps_most_of_mask():
    s = sample(BENIGN, 4)
    out = apply_augmentation(s, AugParams(angle_deg=10.0))
    assert abs(out.mask.sum() - s.mask.sum()) < 0.1 * s.mask.sum()


def test_draw_bounds():
    r = np.random.default_rng(0)
    for _ in range(200):
        p = draw_augmentation(r, 16)
        assert -25.0 <= p.angle_deg <= 25.0
        assert np.abs(p.displacement).max() == pytest.approx(6.0)


def test_augmentation_invariants_over_1000_draws():
    spec = DatasetSpec(image_size=32, lesion_size_range_px=(4.0, 7.0))
    r = np.random.default_rng(11)
    bases = [generate_sample(spec, lab, np.random.default_rng(i)) for i, lab in enumerate([0, 1, 2] * 4)]
    for i in range(1000):
        s = bases[i % len(bases)]
        out = augment(s, r)
        assert out.label == s.label
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert (out.mask.sum() == 0) == (out.label == NORMAL)


def test_hand_encoded_pgm(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0]))
    assert np.array_equal(read_mask(p), [[0, 1], [1, 0]])


def test_pgm_comments_and_whitespace(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5 # comment\n  3\t1 # width height\n255\n" + bytes([127, 128, 200]))
    assert np.array_equal(read_mask(p), [[0, 1, 1]])


@pytest.mark.parametrize("raw, offset", [
    (b"P6\n2 2\n255\n\0\0\0\0", 0),
    (b"P5\nx 2\n255\n\0\0\0\0", 3),
    (b"P5\n2 2\n255\n\0\0", 13),
    (b"P5\n2 2\n65535\n\0\0\0\0", 12),
])
def test_malformed_pgm_reports_offset(tmp_path, raw, offset):
    p = tmp_path / "bad.pgm"
    p.write_bytes(raw)
    with pytest.raises(MaskFormatError) as exc:
        read_gray(p)
    assert exc.value.offset == offset and f"byte {offset}" in str(exc.value)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31), st.sampled_from(["pgm", "png"]))
def test_mask_roundtrip(tmp_path_factory, h, w, seed, fmt):
    m = (np.random.default_rng(seed).random((h, w)) < 0.5).astype(float)
    path = write_mask(tmp_path_factory.mktemp("io") / f"m.{fmt}", m)
    assert np.array_equal(read_mask(path), m)


def test_dataset_directory_roundtrip(tmp_path):
    samples = generate_dataset(DatasetSpec(n_samples=6, image_size=32, lesion_size_range_px=(4, 7)))
    root = save_dataset(samples, tmp_path / "ds")
    assert (root / "labels.csv").read_text().splitlines()[0] == "id,label"
    assert (root / "images" / "00000.png").exists() and (root / "masks" / "00005.png").exists()
    loaded = load_dataset(root)
    for a, b in zip(samples, loaded):
        assert a.label == b.label and np.array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12
    resized = load_dataset(root, size=16)
    assert resized[0].image.shape == (16, 16, 1)
