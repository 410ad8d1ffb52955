import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segcotrain.core import (
    ConfidenceStack,
    CurriculumParams,
    ThresholdVector,
    VOID_ID,
)
from segcotrain.labeling import (
    ClassConfidenceSample,
    apply_thresholds,
    combine_void,
    compute_class_thresholds,
    curriculum_fraction,
    fuse,
    load_pseudolabel_set,
    save_pseudolabel_set,
    select_top_n,
)
from conftest import make_pli, random_pli

T_TABLE = CurriculumParams(p_m=0.5, p_M=0.6, delta_p=0.05, C_m=0.5, C_M=0.9)
T_OPEN = CurriculumParams(p_m=0.0, p_M=1.0, delta_p=0.05, C_m=0.0, C_M=1.0)


def sample_of(*vectors) -> ClassConfidenceSample:
    arrays = []
    for v in vectors:
        arr = np.sort(np.asarray(v, dtype=np.float32))[::-1]
        arrays.append(arr)
    return ClassConfidenceSample(per_class=tuple(arrays))


# --- curriculum --------------------------------------------------------------


def test_curriculum_table_values():
    assert curriculum_fraction(0, T_TABLE) == pytest.approx(0.5)
    assert curriculum_fraction(2, T_TABLE) == pytest.approx(0.6)
    assert curriculum_fraction(10, T_TABLE) == pytest.approx(0.6)


@given(st.integers(0, 100), st.integers(0, 100))
def test_curriculum_monotone_and_capped(k1, k2):
    k1, k2 = min(k1, k2), max(k1, k2)
    p1, p2 = curriculum_fraction(k1, T_TABLE), curriculum_fraction(k2, T_TABLE)
    assert p1 <= p2 <= T_TABLE.p_M


# --- thresholds --------------------------------------------------------------


def count_above_threshold_oracle(values, p):
    """Exhaustive scan: the largest candidate with >= floor(p*n) values strictly above."""
    values = sorted(values, reverse=True)
    n = len(values)
    want = min(int(np.floor(p * n)), n - 1)
    for cand in values:  # descending
        above = sum(1 for v in values if v > cand)
        if above >= want:
            return cand
    return values[-1]


def test_threshold_half_of_four():
    sample = sample_of([0.9, 0.8, 0.7, 0.6])
    vct = compute_class_thresholds(sample, 0.5, T_OPEN)
    assert vct.per_class[0] == np.float32(0.7)
    # exactly two of four values lie strictly above
    assert sum(v > 0.7 for v in [0.9, 0.8, 0.7, 0.6]) == 2


def test_threshold_upper_clamp():
    sample = sample_of([0.97, 0.96, 0.95])
    vct = compute_class_thresholds(sample, 0.5, T_TABLE)
    assert vct.per_class[0] == np.float32(0.9)


def test_threshold_lower_clamp():
    sample = sample_of([0.30, 0.25, 0.20])
    vct = compute_class_thresholds(sample, 0.5, T_TABLE)
    assert vct.per_class[0] == np.float32(0.5)


def test_empty_class_gets_upper_bound():
    sample = ClassConfidenceSample(per_class=(np.empty(0, dtype=np.float32),))
    vct = compute_class_thresholds(sample, 0.5, T_TABLE)
    assert vct.per_class[0] == np.float32(T_TABLE.C_M)


def test_threshold_matches_scan_oracle_randomized():
    rng = np.random.default_rng(42)
    for _ in range(300):
        n = int(rng.integers(1, 2000))
        values = rng.random(n).astype(np.float32)
        p = float(rng.random())
        sample = sample_of(values)
        got = compute_class_thresholds(sample, p, T_OPEN).per_class[0]
        assert got == np.float32(count_above_threshold_oracle(values.tolist(), p))


@given(st.lists(st.floats(np.float32(0.01), 1.0, width=32), min_size=1, max_size=50, unique=True),
       st.floats(0, 1))
def test_fraction_above_raw_threshold(values, p):
    sample = sample_of(values)
    raw = compute_class_thresholds(sample, p, T_OPEN).per_class[0]
    n = len(values)
    frac = sum(1 for v in values if np.float32(v) > raw) / n
    assert p - 1 / n - 1e-9 <= frac <= p + 1 / n + 1e-9


# --- apply_thresholds --------------------------------------------------------


def stack_of(arr) -> ConfidenceStack:
    return ConfidenceStack(np.asarray(arr, dtype=np.float32))


def vct_of(*vals) -> ThresholdVector:
    return ThresholdVector(per_class=np.asarray(vals, dtype=np.float32),
                           curriculum_fraction=0.5, cycle=0)


def test_apply_accepts_above_threshold():
    stack = stack_of([[[0.2]], [[0.8]]])
    out = apply_thresholds(stack, vct_of(0.5, 0.5), "img")
    assert out.labels.values[0, 0] == 1
    assert out.pixel_confidence[0, 0] == np.float32(0.8)


def test_apply_rejects_below_threshold():
    stack = stack_of([[[0.4]], [[0.45]]])
    out = apply_thresholds(stack, vct_of(0.5, 0.5), "img")
    assert out.labels.values[0, 0] == VOID_ID
    assert out.pixel_confidence[0, 0] == 0.0


def test_apply_acceptance_is_inclusive():
    stack = stack_of([[[0.5]], [[0.5]]])
    out = apply_thresholds(stack, vct_of(0.5, 0.9), "img")
    # tie on argmax -> class 0; its confidence equals the threshold -> accepted
    assert out.labels.values[0, 0] == 0


def test_apply_matches_bruteforce_rule():
    rng = np.random.default_rng(5)
    for _ in range(20):
        raw = rng.random((3, 8, 8)).astype(np.float32)
        stack = stack_of(raw / raw.sum(axis=0, keepdims=True))
        vct = vct_of(*rng.random(3).astype(np.float32))
        out = apply_thresholds(stack, vct, "x")
        for r in range(8):
            for c in range(8):
                confs = stack.values[:, r, c]
                best = int(np.flatnonzero(confs == confs.max())[0])
                if confs[best] >= vct.per_class[best]:
                    assert out.labels.values[r, c] == best
                    assert out.pixel_confidence[r, c] == confs[best]
                else:
                    assert out.labels.values[r, c] == VOID_ID
                    assert out.pixel_confidence[r, c] == 0.0


def test_accepted_counts_monotone_in_p():
    rng = np.random.default_rng(9)
    for _ in range(25):
        raw = rng.random((4, 10, 10)).astype(np.float32)
        stack = stack_of(raw / raw.sum(axis=0, keepdims=True))
        sample = ClassConfidenceSample.build([stack], 4)
        prev = None
        for p in np.linspace(0, 1, 11):
            vct = compute_class_thresholds(sample, float(p), T_OPEN)
            out = apply_thresholds(stack, vct, "x")
            counts = np.bincount(out.labels.values[out.labels.values != VOID_ID].ravel(),
                                 minlength=4)
            if prev is not None:
                assert (counts >= prev).all()
            prev = counts


def test_sample_collects_only_argmax_pixels():
    # class 0 wins at pixel 0, class 1 at pixel 1
    stack = stack_of([[[0.7, 0.2]], [[0.3, 0.8]]])
    sample = ClassConfidenceSample.build([stack], 2)
    assert sample.per_class[0].tolist() == [np.float32(0.7)]
    assert sample.per_class[1].tolist() == [np.float32(0.8)]


def test_sample_reservoir_caps_and_is_seeded():
    rng = np.random.default_rng(3)
    raw = rng.random((2, 64, 64)).astype(np.float32)
    stack = stack_of(raw / raw.sum(axis=0, keepdims=True))
    a = ClassConfidenceSample.build([stack], 2, max_per_class=100, seed=7)
    b = ClassConfidenceSample.build([stack], 2, max_per_class=100, seed=7)
    assert all(len(v) == 100 for v in a.per_class)
    for x, y in zip(a.per_class, b.per_class):
        assert np.array_equal(x, y)


# --- selection / fusion / combination ---------------------------------------


def test_select_top_n_basic():
    cands = {
        "A": make_pli("A", [[0]], [[0.9]]),
        "B": make_pli("B", [[0]], [[0.7]]),
        "C": make_pli("C", [[0]], [[0.5]]),
    }
    assert set(select_top_n(cands, 2)) == {"A", "B"}
    assert select_top_n(cands, 0) == {}
    assert set(select_top_n(cands, 10)) == {"A", "B", "C"}


def test_select_top_n_tie_breaks_by_id():
    cands = {k: make_pli(k, [[0]], [[0.5]]) for k in ("b", "a", "c")}
    assert list(select_top_n(cands, 2)) == ["a", "b"]


def test_select_top_n_matches_sort_oracle():
    rng = np.random.default_rng(1)
    cands = {
        f"im{i:03d}": make_pli(f"im{i:03d}", [[0]], [[rng.random()]]) for i in range(100)
    }
    got = list(select_top_n(cands, 17))
    ref = [im.image_id for im in sorted(cands.values(),
                                        key=lambda m: (-float(m.image_confidence), m.image_id))][:17]
    assert got == ref


def test_fuse_idempotent_and_union():
    s = {"A": make_pli("A", [[0]], [[0.6]]), "B": make_pli("B", [[1]], [[0.7]])}
    assert fuse(s, s) == s
    t = {"C": make_pli("C", [[2]], [[0.4]])}
    assert set(fuse(s, t)) == {"A", "B", "C"}


def test_fuse_collision_keeps_higher_confidence():
    low = {"A": make_pli("A", [[0]], [[0.6]])}
    high = {"A": make_pli("A", [[1]], [[0.8]])}
    assert fuse(low, high)["A"].labels.values[0, 0] == 1
    assert fuse(high, low)["A"].labels.values[0, 0] == 1


def test_fuse_exact_tie_keeps_previous():
    prev = {"A": make_pli("A", [[0]], [[0.6]])}
    inc = {"A": make_pli("A", [[1]], [[0.6]])}
    assert fuse(prev, inc)["A"].labels.values[0, 0] == 0


def test_combine_void_mutual_fill():
    a = make_pli("x", [[VOID_ID, 3]], [[0.0, 0.6]])
    b = make_pli("x", [[2, VOID_ID]], [[0.8, 0.0]])
    a2, b2 = combine_void(a, b)
    assert a2.labels.values.tolist() == [[2, 3]]
    assert b2.labels.values.tolist() == [[2, 3]]
    assert a2.pixel_confidence[0, 0] == np.float32(0.8)  # donor confidence adopted


def test_combine_void_preserves_disagreements():
    a = make_pli("x", [[1]], [[0.5]])
    b = make_pli("x", [[2]], [[0.9]])
    a2, b2 = combine_void(a, b)
    assert a2.labels.values[0, 0] == 1
    assert b2.labels.values[0, 0] == 2


def test_combine_void_mismatch_raises():
    with pytest.raises(ValueError):
        combine_void(make_pli("x", [[0]]), make_pli("y", [[0]]))
    with pytest.raises(ValueError):
        combine_void(make_pli("x", [[0]]), make_pli("x", [[0, 0]]))


def test_combine_void_intersection_property():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = random_pli(rng, "z")
        b = random_pli(rng, "z")
        a2, b2 = combine_void(a, b)
        void_a = a.labels.values == VOID_ID
        void_b = b.labels.values == VOID_ID
        expected = void_a & void_b
        assert np.array_equal(a2.labels.values == VOID_ID, expected)
        assert np.array_equal(b2.labels.values == VOID_ID, expected)
        # labeled-pixel count never decreases; confidence is recomputed
        assert (a2.labels.values != VOID_ID).sum() >= (a.labels.values != VOID_ID).sum()


# --- persistence -------------------------------------------------------------


def test_pseudolabel_set_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    pls = {f"im{i}": random_pli(rng, f"im{i}") for i in range(3)}
    vct = vct_of(0.5, 0.6, 0.7, 0.8)
    save_pseudolabel_set(tmp_path / "set", pls, vct)
    loaded, vct2 = load_pseudolabel_set(tmp_path / "set")
    assert set(loaded) == set(pls)
    for k in pls:
        assert np.array_equal(loaded[k].labels.values, pls[k].labels.values)
        assert np.array_equal(loaded[k].pixel_confidence, pls[k].pixel_confidence)
        assert loaded[k].image_confidence.tobytes() == pls[k].image_confidence.tobytes()
    assert np.array_equal(vct2.per_class, vct.per_class)
