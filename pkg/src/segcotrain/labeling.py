"""From model confidences to a curated pseudo-label set.

Covers the self-paced percentile thresholds with clamping, per-pixel
threshold application, image-level ranking and top-n selection, cross-cycle
fusion, and the mutual void-filling combination of two branches' maps.

Per-class confidence samples V_c collect values only at pixels where class c
wins the argmax (ties go to the lowest class id); acceptance against a
threshold is inclusive (conf >= C_T), so a pixel at exactly C_M survives the
upper clamp.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol

import numpy as np

from segcotrain.core import (
    ConfidenceStack,
    CurriculumParams,
    DatasetSplit,
    LabelMap,
    ModelHandle,
    PseudoLabeledImage,
    ThresholdVector,
    VOID_ID,
)
from segcotrain import recordio

PseudoLabelSet = dict[str, PseudoLabeledImage]

RESERVOIR_CAP = 1 << 20


@dataclass(frozen=True)
class ClassConfidenceSample:
    """Per-class vectors V_c of positive confidences at argmax-c pixels, sorted descending."""

    per_class: tuple[np.ndarray, ...]

    @property
    def num_classes(self) -> int:
        return len(self.per_class)

    @staticmethod
    def build(
        stacks: Iterable[ConfidenceStack],
        num_classes: int,
        max_per_class: int | None = None,
        seed: int = 0,
    ) -> "ClassConfidenceSample":
        """Pool confidences from many stacks; exact by default.

        With max_per_class set, each class keeps a seeded reservoir sample of
        that size instead of the full vector (for beyond-desk-scale maps).
        """
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
        for stack in stacks:
            v = stack.values
            winner = v.argmax(axis=0)  # ties -> lowest class id
            top = np.take_along_axis(v, winner[None], axis=0)[0]
            for c in range(num_classes):
                vals = top[(winner == c) & (top > 0.0)]
                if vals.size:
                    buckets[c].append(vals.astype(np.float32))

        per_class = []
        for c in range(num_classes):
            vals = np.concatenate(buckets[c]) if buckets[c] else np.empty(0, dtype=np.float32)
            if max_per_class is not None and vals.size > max_per_class:
                rng = np.random.default_rng([seed, c])
                vals = vals[rng.choice(vals.size, size=max_per_class, replace=False)]
            vals = np.sort(vals)[::-1]
            vals.setflags(write=False)
            per_class.append(vals)
        return ClassConfidenceSample(per_class=tuple(per_class))


def curriculum_fraction(k: int, T: CurriculumParams) -> float:
    """Self-paced fraction p = min(p_m + k*delta_p, p_M)."""
    if k < 0:
        raise ValueError("cycle index must be >= 0")
    return min(T.p_m + k * T.delta_p, T.p_M)


def compute_class_thresholds(
    sample: ClassConfidenceSample, p: float, T: CurriculumParams, cycle: int = 0
) -> ThresholdVector:
    """Raw per-class threshold = value with ~p of V_c strictly above it, then clamp.

    Raw C_Tc is the descending-sort element at index floor(p * |V_c|)
    (clamped to the last element); classes with empty V_c get C_M, the most
    conservative choice, so they emit no pseudo-labels this cycle.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    out = np.empty(sample.num_classes, dtype=np.float32)
    for c, vals in enumerate(sample.per_class):
        if vals.size == 0:
            out[c] = np.float32(T.C_M)
        else:
            idx = min(int(np.floor(p * vals.size)), vals.size - 1)
            out[c] = min(max(vals[idx], np.float32(T.C_m)), np.float32(T.C_M))
    return ThresholdVector(per_class=out, curriculum_fraction=p, cycle=cycle)


def apply_thresholds(
    stack: ConfidenceStack,
    vct: ThresholdVector,
    image_id: str,
    source_cycle: int = 0,
    source_model: str = "1",
    void_id: int = VOID_ID,
) -> PseudoLabeledImage:
    """Per-pixel argmax, kept only where its confidence reaches the class threshold."""
    if stack.num_classes != vct.num_classes:
        raise ValueError(
            f"stack has {stack.num_classes} classes but thresholds have {vct.num_classes}"
        )
    v = stack.values
    winner = v.argmax(axis=0).astype(np.int64)
    top = np.take_along_axis(v, winner[None], axis=0)[0]
    accepted = top >= vct.per_class[winner]

    labels = np.where(accepted, winner, void_id).astype(np.uint8)
    conf = np.where(accepted, top, np.float32(0.0)).astype(np.float32)
    return PseudoLabeledImage(
        image_id=image_id,
        labels=LabelMap(labels),
        pixel_confidence=conf,
        source_cycle=source_cycle,
        source_model=source_model,  # type: ignore[arg-type]
        void_id=void_id,
    )


class PredictFn(Protocol):
    def __call__(self, model: ModelHandle, images: DatasetSplit) -> list[ConfidenceStack]: ...


def run_pseudolabel(
    predict: PredictFn,
    model: ModelHandle,
    images: DatasetSplit,
    k: int,
    T: CurriculumParams,
    source_model: str = "1",
) -> tuple[PseudoLabelSet, ThresholdVector]:
    """Predict a candidate subset, derive thresholds from the pooled sample, apply them.

    This is the Run() step of the self-training and co-training loops; it
    returns both the pseudo-labeled set (keyed by image_id) and the threshold
    vector used, which later drives collage ordering and collaboration.
    """
    if images.kind == "labeled":
        raise ValueError("run_pseudolabel expects unlabeled images")
    stacks = predict(model, images)
    nc = images.label_space.num_classes
    sample = ClassConfidenceSample.build(stacks, nc)
    p = curriculum_fraction(k, T)
    vct = compute_class_thresholds(sample, p, T, cycle=k)
    out: PseudoLabelSet = {}
    for entry, stack in zip(images.entries, stacks):
        out[entry.image_id] = apply_thresholds(
            stack,
            vct,
            image_id=entry.image_id,
            source_cycle=k,
            source_model=source_model,
            void_id=images.label_space.void_id,
        )
    return out, vct


def select_top_n(candidates: Mapping[str, PseudoLabeledImage] , n: int) -> PseudoLabelSet:
    """The n most confident images (ties broken by ascending image_id)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    ranked = sorted(candidates.values(), key=lambda im: (-float(im.image_confidence), im.image_id))
    return {im.image_id: im for im in ranked[:n]}


def fuse(previous: Mapping[str, PseudoLabeledImage], incoming: Mapping[str, PseudoLabeledImage]) -> PseudoLabelSet:
    """Union keyed by image_id; a collision keeps the higher image-level confidence.

    An exact confidence tie keeps the previous entry, so fuse(S, S) == S.
    """
    out: PseudoLabelSet = dict(previous)
    for image_id, im in incoming.items():
        old = out.get(image_id)
        if old is None or float(im.image_confidence) > float(old.image_confidence):
            out[image_id] = im
    return out


def combine_void(
    a: PseudoLabeledImage, b: PseudoLabeledImage
) -> tuple[PseudoLabeledImage, PseudoLabeledImage]:
    """Fill each map's void pixels from the other's non-void pixels.

    Non-void pixels never change, so disagreements between the two maps are
    preserved; image-level confidences are recomputed for both outputs.
    """
    if a.image_id != b.image_id:
        raise ValueError(f"image_id mismatch: {a.image_id!r} vs {b.image_id!r}")
    if a.labels.values.shape != b.labels.values.shape:
        raise ValueError(
            f"shape mismatch for {a.image_id}: {a.labels.values.shape} vs {b.labels.values.shape}"
        )

    def fill(dst: PseudoLabeledImage, src: PseudoLabeledImage) -> PseudoLabeledImage:
        take = (dst.labels.values == dst.void_id) & (src.labels.values != src.void_id)
        labels = np.where(take, src.labels.values, dst.labels.values).astype(np.uint8)
        conf = np.where(take, src.pixel_confidence, dst.pixel_confidence).astype(np.float32)
        return PseudoLabeledImage(
            image_id=dst.image_id,
            labels=LabelMap(labels),
            pixel_confidence=conf,
            source_cycle=dst.source_cycle,
            source_model=dst.source_model,
            void_id=dst.void_id,
        )

    return fill(a, b), fill(b, a)


# --- persistence -------------------------------------------------------------
#
# A set directory holds, per image: <id>_labels.png (8-bit ids, 255 void),
# <id>_conf.f32 (+ .json header), plus index.json listing image ids with
# image-level confidence and provenance and the threshold vector used.


def save_pseudolabel_set(dirpath: str | Path, pls: Mapping[str, PseudoLabeledImage], vct: ThresholdVector | None) -> None:
    dirpath = Path(dirpath)
    entries = []
    for image_id in sorted(pls):
        im = pls[image_id]
        recordio.write_label_png(dirpath / f"{image_id}_labels.png", im.labels.values)
        recordio.write_f32_raster(dirpath / f"{image_id}_conf.f32", im.pixel_confidence)
        entries.append(
            {
                "image_id": image_id,
                "image_confidence": float(im.image_confidence),
                "source_cycle": im.source_cycle,
                "source_model": im.source_model,
            }
        )
    index = {
        "entries": entries,
        "thresholds": None
        if vct is None
        else {
            "per_class": [float(t) for t in vct.per_class],
            "curriculum_fraction": vct.curriculum_fraction,
            "cycle": vct.cycle,
        },
    }
    recordio.write_record(dirpath / "index.json", index)


def load_pseudolabel_set(dirpath: str | Path, void_id: int = VOID_ID) -> tuple[PseudoLabelSet, ThresholdVector | None]:
    dirpath = Path(dirpath)
    index = recordio.read_record(dirpath / "index.json")
    out: PseudoLabelSet = {}
    for rec in index["entries"]:
        image_id = rec["image_id"]
        labels = recordio.read_label_png(dirpath / f"{image_id}_labels.png")
        conf = recordio.read_f32_raster(dirpath / f"{image_id}_conf.f32")
        im = PseudoLabeledImage(
            image_id=image_id,
            labels=LabelMap(labels),
            pixel_confidence=conf,
            source_cycle=int(rec["source_cycle"]),
            source_model=rec["source_model"],
            void_id=void_id,
        )
        if float(im.image_confidence) != rec["image_confidence"]:
            raise ValueError(
                f"stored image_confidence for {image_id} does not match recomputation"
            )
        out[image_id] = im
    vct = None
    if index.get("thresholds"):
        t = index["thresholds"]
        vct = ThresholdVector(
            per_class=np.array(t["per_class"], dtype=np.float32),
            curriculum_fraction=t["curriculum_fraction"],
            cycle=t["cycle"],
        )
    return out, vct
