import numpy as np
import pytest

from segcotrain.core import DatasetSplit, LabelMap, MixParams, SplitEntry, ThresholdVector, VOID_ID
from segcotrain.manifest import SplitLoader, resolve_label_space
from segcotrain.mixing import classmix_collage, compose_minibatch, round_half_up
from segcotrain import recordio
from conftest import make_pli


def vct_of(*vals):
    return ThresholdVector(per_class=np.asarray(vals, dtype=np.float32),
                           curriculum_fraction=0.5, cycle=0)


@pytest.fixture
def tiny_data(tmp_path):
    """4 source images + 3 target images on disk, 8x8, toy8 space."""
    rng = np.random.default_rng(0)
    space = resolve_label_space("toy8")
    src_entries, tgt_entries = [], []
    for i in range(4):
        img = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        labels = rng.integers(0, 4, size=(8, 8)).astype(np.uint8)
        recordio.write_image_png(tmp_path / f"s{i}.png", img)
        recordio.write_label_png(tmp_path / f"s{i}_labels.png", labels)
        src_entries.append(SplitEntry(f"s{i}", str(tmp_path / f"s{i}.png"),
                                      str(tmp_path / f"s{i}_labels.png")))
    for i in range(3):
        img = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        recordio.write_image_png(tmp_path / f"t{i}.png", img)
        tgt_entries.append(SplitEntry(f"t{i}", str(tmp_path / f"t{i}.png")))
    source = DatasetSplit("labeled", tuple(src_entries), space)
    target = DatasetSplit("unlabeled", tuple(tgt_entries), space)
    pseudo = {}
    for i in range(3):
        labels = rng.integers(0, 4, size=(8, 8)).astype(np.uint8)
        labels[0, 0] = VOID_ID
        conf = rng.random((8, 8)).astype(np.float32)
        conf[0, 0] = 0.0
        pseudo[f"t{i}"] = make_pli(f"t{i}", labels, conf)
    return source, target, pseudo, SplitLoader(source, target)


def test_round_half_up():
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4) == 2
    assert round_half_up(3.0) == 3


@pytest.mark.parametrize("n_mb,p_mb,want_target", [(4, 0.75, 3), (2, 0.5, 1), (4, 0.0, 0)])
def test_batch_counts(tiny_data, n_mb, p_mb, want_target):
    source, _, pseudo, loader = tiny_data
    batch = compose_minibatch(source, pseudo, n_mb, MixParams(p_mb, 0.5),
                              vct_of(*[0.5] * 8), True, np.random.default_rng(0), loader)
    n_target = sum(1 for s in batch if s.origin == "collaged-target")
    assert len(batch) == n_mb
    assert n_target == want_target


def test_exact_counts_over_grid(tiny_data):
    source, _, pseudo, loader = tiny_data
    for n_mb in range(1, 7):
        for p_mb in np.linspace(0, 1, 9):
            batch = compose_minibatch(source, pseudo, n_mb, MixParams(float(p_mb), 0.5),
                                      vct_of(*[0.5] * 8), True, np.random.default_rng(1), loader)
            want = round_half_up(p_mb * n_mb)
            got = sum(1 for s in batch if s.origin != "source")
            assert (got, len(batch)) == (want, n_mb)


def test_empty_pseudo_falls_back_to_source(tiny_data, caplog):
    source, _, _, loader = tiny_data
    with caplog.at_level("WARNING"):
        batch = compose_minibatch(source, {}, 4, MixParams(0.75, 0.5),
                                  vct_of(*[0.5] * 8), True, np.random.default_rng(0), loader)
    assert all(s.origin == "source" for s in batch)
    assert "all-source" in caplog.text


def test_batches_reproducible_from_seed(tiny_data):
    source, _, pseudo, loader = tiny_data
    a = compose_minibatch(source, pseudo, 4, MixParams(0.5, 0.5), vct_of(*[0.5] * 8),
                          True, np.random.default_rng(123), loader)
    b = compose_minibatch(source, pseudo, 4, MixParams(0.5, 0.5), vct_of(*[0.5] * 8),
                          True, np.random.default_rng(123), loader)
    for x, y in zip(a, b):
        assert x.provenance == y.provenance
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.labels.values, y.labels.values)


def test_cb_weights_bias_source_draws(tiny_data):
    from segcotrain.preprocess import SamplingWeights

    source, _, pseudo, loader = tiny_data
    weights = SamplingWeights(weights={"s0": 0.97, "s1": 0.01, "s2": 0.01, "s3": 0.01})
    rng = np.random.default_rng(0)
    picked = []
    for _ in range(50):
        batch = compose_minibatch(source, pseudo, 2, MixParams(0.0, 0.5), None,
                                  False, rng, loader, cb_weights=weights)
        picked += [s.provenance[0] for s in batch]
    assert picked.count("s0") > 80


# --- collage ------------------------------------------------------------------


def _donor(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    image = np.zeros((*labels.shape, 3), dtype=np.uint8)
    image[..., 0] = labels * 30 + 10  # distinctive donor appearance
    return image, LabelMap(labels)


def test_collage_pastes_least_confident_half():
    donor_img, donor_lab = _donor([[0, 1], [2, 3]])
    target = make_pli("t", [[VOID_ID, 0], [0, 0]], [[0.0, 0.9], [0.8, 0.7]])
    timage = np.full((2, 2, 3), 200, dtype=np.uint8)
    # thresholds: classes 1 and 3 are least confident -> pasted at p_CM=0.5
    vct = vct_of(0.9, 0.5, 0.8, 0.6, 1, 1, 1, 1)
    out = classmix_collage(donor_img, donor_lab, "d", timage, target, vct, 0.5, VOID_ID)
    assert out.labels.values.tolist() == [[VOID_ID, 1], [0, 3]]
    assert out.pixel_weight.tolist() == [[0.0, 1.0], [pytest.approx(0.8), 1.0]]
    assert np.array_equal(out.image[0, 1], donor_img[0, 1])
    assert np.array_equal(out.image[1, 0], timage[1, 0])
    assert out.origin == "collaged-target"


def test_collage_single_class_donor_always_pastes():
    donor_img, donor_lab = _donor([[5, 5]])
    target = make_pli("t", [[0, 0]], [[0.4, 0.4]])
    timage = np.zeros((1, 2, 3), dtype=np.uint8)
    out = classmix_collage(donor_img, donor_lab, "d", timage, target,
                           vct_of(*[0.5] * 8), 0.25, VOID_ID)
    assert (out.labels.values == 5).all()


def test_collage_partition_property():
    rng = np.random.default_rng(8)
    for _ in range(30):
        labels = rng.integers(0, 8, size=(6, 6)).astype(np.uint8)
        donor_img = rng.integers(0, 256, size=(6, 6, 3)).astype(np.uint8)
        tlabels = rng.integers(0, 8, size=(6, 6)).astype(np.uint8)
        tconf = rng.random((6, 6)).astype(np.float32)
        target = make_pli("t", tlabels, tconf)
        timage = rng.integers(0, 256, size=(6, 6, 3)).astype(np.uint8)
        vct = vct_of(*rng.random(8).astype(np.float32))
        p_cm = float(rng.random())
        out = classmix_collage(donor_img, LabelMap(labels), "d", timage, target,
                               vct, p_cm, VOID_ID)
        present = sorted(set(labels.ravel().tolist()))
        k = int(np.ceil(p_cm * len(present)))
        selected = sorted(present, key=lambda c: (float(vct.per_class[c]), c))[:k]
        mask = np.isin(labels, selected)
        assert np.array_equal(out.labels.values[mask], labels[mask])
        assert np.array_equal(out.labels.values[~mask], target.labels.values[~mask])
        assert np.array_equal(out.image[mask], donor_img[mask])
        assert np.array_equal(out.image[~mask], timage[~mask])
        assert (out.pixel_weight[mask] == 1.0).all()


def test_collage_dimension_mismatch_raises():
    donor_img, donor_lab = _donor([[0]])
    target = make_pli("t", [[0, 0]])
    with pytest.raises(ValueError):
        classmix_collage(donor_img, donor_lab, "d", np.zeros((1, 2, 3), np.uint8),
                         target, vct_of(*[0.5] * 8), 0.5, VOID_ID)
