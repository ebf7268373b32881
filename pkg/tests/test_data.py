import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from okdph import data
from okdph.data import (AugmentationSpec, AugStream, AugmentError, IdxError, NoiseSpec, Transform,
                        add_gaussian_noise, augment, gen_spirals, load_idx, subsample)


def test_noiseless_spirals_lie_on_curve():
    ds = gen_spirals(40, 3, 0.0, seed=1, turns=1.25)
    raw = ds.x * np.array(ds.meta["std"]) + np.array(ds.meta["mean"])
    for (px, py), k, s in zip(raw, ds.y, ds.meta["curve_param"]):
        angle = 2 * math.pi * k / 3 + 2 * math.pi * 1.25 * s
        assert px == pytest.approx(s * math.cos(angle), abs=1e-12)
        assert py == pytest.approx(s * math.sin(angle), abs=1e-12)


def test_spirals_standardized_balanced_and_deterministic():
    ds = gen_spirals(500, 3, 0.1, seed=4)
    assert len(ds) == 1500
    assert np.bincount(ds.y).tolist() == [500, 500, 500]
    np.testing.assert_allclose(ds.x.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(ds.x.std(axis=0), 1, atol=1e-12)
    again = gen_spirals(500, 3, 0.1, seed=4)
    assert ds.checksum() == again.checksum()
    assert ds.checksum() != gen_spirals(500, 3, 0.1, seed=5).checksum()


def test_spirals_test_split_uses_given_statistics():
    train = gen_spirals(50, 2, 0.1, seed=0)
    test = gen_spirals(50, 2, 0.1, seed=9, standardize_with=(train.meta["mean"], train.meta["std"]),
                       split="test")
    assert test.meta["mean"] == train.meta["mean"]
    assert test.split == "test"


def test_spirals_reject_bad_arguments():
    with pytest.raises(ValueError):
        gen_spirals(10, 1, 0.0, 0)
    with pytest.raises(ValueError):
        gen_spirals(0, 3, 0.0, 0)


def write_bytes_fixture(tmp_path):
    # two 4x4 images and their labels, assembled byte by byte
    pixels = bytes(range(0, 32 * 8, 8))
    img = b"\x00\x00\x08\x03" + b"\x00\x00\x00\x02" + b"\x00\x00\x00\x04" * 2 + pixels
    lab = b"\x00\x00\x08\x01" + b"\x00\x00\x00\x02" + b"\x01\x00"
    (tmp_path / "img.idx").write_bytes(img)
    (tmp_path / "lab.idx").write_bytes(lab)
    return tmp_path / "img.idx", tmp_path / "lab.idx"


def test_idx_hand_fixture(tmp_path):
    img, lab = write_bytes_fixture(tmp_path)
    ds = load_idx(img, lab)
    assert ds.x.shape == (2, 1, 4, 4)
    assert ds.y.tolist() == [1, 0]
    assert ds.x[0, 0, 0, 1] == 8 / 255
    assert ds.x[1, 0, 3, 3] == 248 / 255
    assert ds.x.min() >= 0 and ds.x.max() <= 1


def test_idx_round_trip_and_gzip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 3, 2), dtype=np.uint8)
    labels = rng.integers(0, 4, 5).astype(np.uint8)
    data.write_idx(tmp_path / "i.gz", images)
    data.write_idx(tmp_path / "l.gz", labels)
    assert np.array_equal(data.read_idx(tmp_path / "i.gz"), images)
    ds = load_idx(tmp_path / "i.gz", tmp_path / "l.gz", num_classes=4)
    np.testing.assert_array_equal(ds.x[:, 0], images / 255.0)
    # pinned gzip mtime keeps the bytes reproducible
    first = (tmp_path / "i.gz").read_bytes()
    data.write_idx(tmp_path / "i.gz", images)
    assert (tmp_path / "i.gz").read_bytes() == first
    with gzip.open(tmp_path / "l.gz") as f:
        assert struct.unpack(">II", f.read(8)) == (0x801, 5)


def test_idx_errors(tmp_path):
    img, lab = write_bytes_fixture(tmp_path)
    with pytest.raises(IdxError, match="expected 0x00000803, got 0x00000801"):
        load_idx(lab, lab)
    short = tmp_path / "short.idx"
    short.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(IdxError, match="expected 32 data bytes"):
        load_idx(short, lab)
    one = tmp_path / "one.idx"
    one.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x01\x00")
    with pytest.raises(IdxError, match="count mismatch"):
        load_idx(img, one)
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(IdxError, match="truncated"):
        data.read_idx(tmp_path / "tiny")


def test_csv_round_trip_is_exact(tmp_path):
    ds = gen_spirals(7, 3, 0.2, seed=2)
    data.save_csv(ds, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "x0,x1,label"
    back = data.load_csv(tmp_path / "s.csv", num_classes=3)
    assert back.x.tobytes() == ds.x.tobytes()
    assert np.array_equal(back.y, ds.y)


def stream(n=6, shape=(2,), seed=3, slot=0, epoch=0):
    return AugStream(seed, slot, epoch, n, shape)


def test_identity_augmentations():
    x = np.random.default_rng(0).normal(size=(6, 2))
    idx = np.arange(6)
    assert augment(x, idx, AugmentationSpec.parse(["none"]), stream()) is x
    np.testing.assert_array_equal(augment(x, idx, AugmentationSpec.parse(["gaussian-jitter:0"]), stream()), x)
    np.testing.assert_array_equal(augment(x, idx, AugmentationSpec(), stream()), x)


def test_cutout_zeros_one_block():
    x = np.ones((1, 1, 4, 4))
    spec = AugmentationSpec.parse(["cutout:2"])
    out = augment(x, np.array([0]), spec, stream(1, (1, 4, 4)))
    mask = out[0, 0] == 0
    # enumerate every admissible 2x2 placement; exactly one must match
    placements = []
    for top in range(3):
        for left in range(3):
            m = np.zeros((4, 4), bool)
            m[top:top + 2, left:left + 2] = True
            placements.append(m)
    assert sum(np.array_equal(mask, m) for m in placements) == 1
    again = augment(x, np.array([0]), spec, stream(1, (1, 4, 4)))
    np.testing.assert_array_equal(out, again)


def test_augmentation_independent_of_batch_composition():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 1, 6, 6))
    spec = AugmentationSpec.parse(["horizontal-flip:0.5", "random-shift:2", "cutout:3",
                                   "gaussian-jitter:0.1", "rotate:20"])
    s = stream(10, (1, 6, 6))
    whole = augment(x, np.arange(10), spec, s)
    for idx in (np.array([4, 2]), np.array([9]), np.array([0, 7, 3, 5])):
        part = augment(x[idx], idx, spec, stream(10, (1, 6, 6)))
        np.testing.assert_array_equal(part, whole[idx])


def test_augmentation_varies_by_epoch_and_slot():
    x = np.zeros((5, 2))
    spec = AugmentationSpec.parse(["gaussian-jitter:1"])
    a = augment(x, np.arange(5), spec, stream(5, epoch=0))
    assert not np.array_equal(a, augment(x, np.arange(5), spec, stream(5, epoch=1)))
    assert not np.array_equal(a, augment(x, np.arange(5), spec, stream(5, slot=1)))


def test_point_rotation_preserves_norm():
    x = np.random.default_rng(2).normal(size=(6, 2))
    out = augment(x, np.arange(6), AugmentationSpec.parse(["rotate:30"]), stream())
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1), rtol=1e-14)


def test_point_data_rejects_image_transforms():
    x = np.zeros((3, 2))
    for t in ("cutout:2", "horizontal-flip:0.5", "random-shift:1"):
        with pytest.raises(AugmentError, match="point data"):
            augment(x, np.arange(3), AugmentationSpec.parse([t]), stream(3))


def test_transform_parameter_ranges():
    for bad in ("gaussian-jitter:-1", "horizontal-flip:1.5", "cutout:-2", "warp:1"):
        with pytest.raises(AugmentError):
            Transform.parse(bad)


def test_default_augmentations_assignment():
    specs = data.default_augmentations("images", 3)
    assert len(specs) == 4
    assert specs[0].to_list() == ["horizontal-flip:0.5", "random-shift:2"]
    assert specs[1].to_list() == ["cutout:8"]
    assert specs[2] == specs[0]
    assert specs[-1].to_list() == ["gaussian-jitter:0.1", "rotate:15"]


def test_noise_identity_and_moments():
    ds = gen_spirals(50, 2, 0.1, seed=0)
    assert np.array_equal(add_gaussian_noise(ds, NoiseSpec(0, 0), 1).x, ds.x)
    big = data.Dataset(np.zeros((50_000, 2)), np.zeros(50_000, dtype=int), 2, "train")
    noise = add_gaussian_noise(big, NoiseSpec(0.0, 1.0), seed=5).x.ravel()
    n = noise.size
    assert n == 100_000
    assert abs(noise.mean()) < 3 / math.sqrt(n)
    assert noise.var() == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ValueError):
        NoiseSpec(0, -1)


def test_noise_leaves_source_untouched():
    ds = gen_spirals(20, 2, 0.1, seed=0)
    before = ds.x.copy()
    add_gaussian_noise(ds, NoiseSpec(0, 1), 0)
    assert np.array_equal(ds.x, before)


def test_subsample_stratified_counts():
    ds = gen_spirals(500, 3, 0.1, seed=0)
    tenth = subsample(ds, 0.1, seed=1)
    assert len(tenth) == 150 and np.bincount(tenth.y).tolist() == [50, 50, 50]
    assert np.bincount(subsample(ds, 0.01, seed=1).y).tolist() == [5, 5, 5]
    full = subsample(ds, 1.0, seed=1)
    assert full.checksum() == ds.checksum()
    assert subsample(ds, 0.1, seed=1).checksum() == tenth.checksum()
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            subsample(ds, bad, 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=2, max_size=5), st.floats(0.01, 1.0), st.integers(0, 99))
def test_subsample_balance_property(counts, fraction, seed):
    y = np.concatenate([np.full(c, k) for k, c in enumerate(counts)])
    ds = data.Dataset(np.arange(len(y), dtype=float)[:, None].repeat(2, 1), y, len(counts), "train")
    sub = subsample(ds, fraction, seed)
    got = np.bincount(sub.y, minlength=len(counts))
    for c, g in zip(counts, got):
        assert 1 <= g <= c
        assert abs(g - fraction * c) <= 1 or g == 1
    # kept rows are distinct and in original order
    assert np.all(np.diff(sub.x[:, 0]) > 0)
