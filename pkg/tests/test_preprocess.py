import numpy as np
import pytest

from segcotrain.core import DatasetSplit, SplitEntry
from segcotrain.errors import DataError
from segcotrain.manifest import resolve_label_space
from segcotrain.preprocess import (
    LabStats,
    align_lab,
    class_balance_weights,
    dataset_lab_stats,
    lab_align_image,
    lab_to_rgb,
    rgb_to_lab,
)
from segcotrain import recordio


def test_black_maps_to_zero():
    assert np.allclose(rgb_to_lab(np.array([0, 0, 0])), [0.0, 0.0, 0.0], atol=1e-9)


def test_white_point():
    lab = rgb_to_lab(np.array([255, 255, 255]))
    assert lab[0] == pytest.approx(100.0, abs=0.01)
    assert abs(lab[1]) < 0.01 and abs(lab[2]) < 0.01


def test_mid_gray_against_reference():
    # frozen from an independent CIE implementation (scikit-image rgb2lab)
    lab = rgb_to_lab(np.array([119, 119, 119]))
    assert lab[0] == pytest.approx(50.0344, abs=0.01)
    assert abs(lab[1]) < 0.01 and abs(lab[2]) < 0.01


def test_against_skimage_oracle():
    skcolor = pytest.importorskip("skimage.color")
    rng = np.random.default_rng(1)
    px = rng.integers(0, 256, size=(512, 3)).astype(np.uint8)
    ref = skcolor.rgb2lab(px.reshape(1, -1, 3) / 255.0).reshape(-1, 3)
    assert np.abs(rgb_to_lab(px) - ref).max() < 0.01


def test_round_trip_within_one_8bit_unit():
    rng = np.random.default_rng(2)
    px = rng.integers(0, 256, size=(10000, 3)).astype(np.uint8)
    back = np.round(lab_to_rgb(rgb_to_lab(px)))
    assert np.abs(back - px.astype(np.float64)).max() <= 1.0


def _write_split(tmp_path, images, labels=None):
    entries = []
    for i, img in enumerate(images):
        p = tmp_path / f"im{i}.png"
        recordio.write_image_png(p, img)
        label_path = None
        if labels is not None:
            label_path = tmp_path / f"im{i}_labels.png"
            recordio.write_label_png(label_path, labels[i])
        entries.append(SplitEntry(image_id=f"im{i}", image_path=str(p),
                                  label_path=None if label_path is None else str(label_path)))
    kind = "unlabeled" if labels is None else "labeled"
    return DatasetSplit(kind=kind, entries=tuple(entries), label_space=resolve_label_space("toy8"))


def test_stats_constant_image_zero_std(tmp_path):
    img = np.full((8, 8, 3), 128, dtype=np.uint8)
    split = _write_split(tmp_path, [img])
    stats = dataset_lab_stats(split, 10, seed=0)
    assert np.allclose(stats.std, 0.0, atol=1e-12)
    assert stats.sample_size == 1


def test_stats_match_pooled_pixel_oracle(tmp_path):
    rng = np.random.default_rng(3)
    imgs = [rng.integers(0, 256, size=(6, 5, 3)).astype(np.uint8) for _ in range(2)]
    split = _write_split(tmp_path, imgs)
    stats = dataset_lab_stats(split, 10, seed=0)
    pooled = np.concatenate([rgb_to_lab(im).reshape(-1, 3) for im in imgs])
    assert np.allclose(stats.mean, pooled.mean(axis=0), atol=1e-9)
    assert np.allclose(stats.std, pooled.std(axis=0), atol=1e-9)


def test_stats_sample_size_caps_at_split(tmp_path):
    rng = np.random.default_rng(4)
    imgs = [rng.integers(0, 256, size=(4, 4, 3)).astype(np.uint8) for _ in range(3)]
    split = _write_split(tmp_path, imgs)
    assert dataset_lab_stats(split, 100, seed=0).sample_size == 3


def test_stats_unreadable_image_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    split = DatasetSplit(
        kind="unlabeled",
        entries=(SplitEntry(image_id="broken", image_path=str(bad)),),
        label_space=resolve_label_space("toy8"),
    )
    with pytest.raises(DataError, match="broken.png"):
        dataset_lab_stats(split, 5, seed=0)


def test_align_identity_when_stats_match(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    stats = LabStats(mean=np.array([50.0, 0.0, 0.0]), std=np.array([10.0, 5.0, 5.0]), sample_size=1)
    out = lab_align_image(img, stats, stats)
    assert np.abs(out.astype(int) - img.astype(int)).max() <= 1


def test_align_zero_std_channel_maps_to_target_mean():
    lab = np.zeros((4, 4, 3))
    lab[..., 0] = 55.0  # constant L channel
    src = LabStats(mean=np.array([55.0, 0.0, 0.0]), std=np.array([0.0, 2.0, 2.0]), sample_size=1)
    tgt = LabStats(mean=np.array([70.0, 1.0, -1.0]), std=np.array([3.0, 2.0, 2.0]), sample_size=1)
    out = align_lab(lab, src, tgt)
    assert np.allclose(out[..., 0], 70.0)


def test_aligned_float_stats_match_target(tmp_path):
    rng = np.random.default_rng(6)
    imgs = [rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8) for _ in range(4)]
    labs = [rgb_to_lab(im) for im in imgs]
    pooled = np.concatenate([l.reshape(-1, 3) for l in labs])
    src = LabStats(mean=pooled.mean(axis=0), std=pooled.std(axis=0), sample_size=4)
    tgt = LabStats(mean=np.array([60.0, 4.0, -8.0]), std=np.array([12.0, 6.0, 9.0]), sample_size=1)
    aligned = np.concatenate([align_lab(l, src, tgt).reshape(-1, 3) for l in labs])
    assert np.allclose(aligned.mean(axis=0), tgt.mean, atol=1e-3)
    assert np.allclose(aligned.std(axis=0), tgt.std, atol=1e-3)


def test_align_idempotent_once_aligned(tmp_path):
    rng = np.random.default_rng(7)
    labs = [rgb_to_lab(rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)) for _ in range(3)]
    pooled = np.concatenate([l.reshape(-1, 3) for l in labs])
    src = LabStats(mean=pooled.mean(axis=0), std=pooled.std(axis=0), sample_size=3)
    tgt = LabStats(mean=np.array([55.0, 2.0, 3.0]), std=np.array([9.0, 4.0, 5.0]), sample_size=1)
    aligned = [align_lab(l, src, tgt) for l in labs]
    again = [align_lab(l, tgt, tgt) for l in aligned]
    for a, b in zip(aligned, again):
        assert np.abs(a - b).max() < 1e-6


def _labeled_split(tmp_path, label_arrays):
    imgs = [np.zeros((*la.shape, 3), dtype=np.uint8) for la in label_arrays]
    return _write_split(tmp_path, imgs, labels=[np.asarray(la, dtype=np.uint8) for la in label_arrays])


def test_cb_uniform_when_balanced(tmp_path):
    # two images, both with equal pixel counts of classes 0 and 1
    la = np.array([[0, 1], [0, 1]])
    split = _labeled_split(tmp_path, [la, la])
    w = class_balance_weights(split)
    assert w.weights["im0"] == pytest.approx(0.5)
    assert w.weights["im1"] == pytest.approx(0.5)


def test_cb_rare_class_gets_max_weight(tmp_path):
    common = np.zeros((4, 4))
    rare = np.zeros((4, 4))
    rare[0, 0] = 5  # the only pixels of class 5
    split = _labeled_split(tmp_path, [common, common, rare])
    w = class_balance_weights(split)
    assert w.weights["im2"] == max(w.weights.values())


def test_cb_matches_hand_computed_rarity(tmp_path):
    # image 0: 4 px class0; image 1: 2 px class0 + 2 px class1; image 2: 4 px class2
    a = np.zeros((2, 2))
    b = np.array([[0, 0], [1, 1]])
    c = np.full((2, 2), 2)
    split = _labeled_split(tmp_path, [a, b, c])
    # f = (6, 2, 4)/12; median = 4/12; rarity = (2/3, 2, 1)
    # weights: im0 = 2/3, im1 = max(2/3, 2) = 2, im2 = 1 -> normalized
    w = class_balance_weights(split)
    total = 2 / 3 + 2 + 1
    assert w.weights["im0"] == pytest.approx((2 / 3) / total)
    assert w.weights["im1"] == pytest.approx(2 / total)
    assert w.weights["im2"] == pytest.approx(1 / total)


def test_cb_scale_invariant_under_duplication(tmp_path):
    rng = np.random.default_rng(8)
    las = [rng.integers(0, 4, size=(4, 4)) for _ in range(3)]
    w1 = class_balance_weights(_labeled_split(tmp_path / "a", las))
    w2 = class_balance_weights(_labeled_split(tmp_path / "b", las + las))
    for i in range(3):
        assert w2.weights[f"im{i}"] == pytest.approx(w1.weights[f"im{i}"] / 2)


def test_cb_requires_labeled_split(tmp_path):
    rng = np.random.default_rng(9)
    split = _write_split(tmp_path, [rng.integers(0, 256, size=(4, 4, 3)).astype(np.uint8)])
    with pytest.raises(ValueError):
        class_balance_weights(split)
