"""Training-batch composition: source/target mixing and the class collage.

A batch holds round(p_MB * N_MB) pseudo-labeled target samples (each collaged
with a labeled source donor when the collage is enabled) and source samples
for the rest. Collage pastes the donor's least-confident classes, judged by
the current threshold vector, onto the target at both appearance and label
level; pasted pixels carry weight 1.0 since their labels are ground truth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Protocol

import numpy as np

from segcotrain.core import (
    DatasetSplit,
    LabelMap,
    MixParams,
    PseudoLabeledImage,
    ThresholdVector,
)
from segcotrain.labeling import PseudoLabelSet
from segcotrain.preprocess import SamplingWeights

logger = logging.getLogger(__name__)

SampleOrigin = Literal["source", "collaged-target", "target"]


@dataclass(frozen=True)
class TrainingSample:
    image: np.ndarray  # (H, W, 3) uint8
    labels: LabelMap
    pixel_weight: np.ndarray  # (H, W) float32; 0 excludes a pixel from training
    origin: SampleOrigin
    provenance: tuple[str, ...]  # contributing image ids, donor last


class ImageLoader(Protocol):
    """Resolves image ids to rasters; implementations may cache."""

    def image(self, image_id: str) -> np.ndarray: ...

    def labels(self, image_id: str) -> LabelMap: ...


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def source_sample(image: np.ndarray, labels: LabelMap, image_id: str, void_id: int) -> TrainingSample:
    weight = (labels.values != void_id).astype(np.float32)
    return TrainingSample(image=image, labels=labels, pixel_weight=weight,
                          origin="source", provenance=(image_id,))


def classmix_collage(
    donor_image: np.ndarray,
    donor_labels: LabelMap,
    donor_id: str,
    target_image: np.ndarray,
    target: PseudoLabeledImage,
    vct: ThresholdVector,
    p_CM: float,
    void_id: int,
) -> TrainingSample:
    """Paste the donor's ceil(p_CM * |classes|) least-confident classes onto the target.

    "Least confident" means ascending threshold-vector entry (a lower
    percentile threshold signals the model's confidences for that class run
    lower); ties go to the lower class id.
    """
    if donor_labels.values.shape != target.labels.values.shape:
        raise ValueError(
            f"donor shape {donor_labels.values.shape} != target shape {target.labels.values.shape}"
        )
    present = np.unique(donor_labels.values)
    present = [int(c) for c in present if c != void_id]
    selected: list[int] = []
    if present:
        take = math.ceil(p_CM * len(present))
        ordered = sorted(present, key=lambda c: (float(vct.per_class[c]), c))
        selected = ordered[:take]

    mask = np.isin(donor_labels.values, selected)
    image = np.where(mask[..., None], donor_image, target_image).astype(np.uint8)
    labels = np.where(mask, donor_labels.values, target.labels.values).astype(np.uint8)
    weight = np.where(mask, np.float32(1.0), target.pixel_confidence).astype(np.float32)
    return TrainingSample(
        image=image,
        labels=LabelMap(labels),
        pixel_weight=weight,
        origin="collaged-target",
        provenance=(target.image_id, donor_id),
    )


def target_sample(target_image: np.ndarray, target: PseudoLabeledImage) -> TrainingSample:
    return TrainingSample(
        image=target_image,
        labels=target.labels,
        pixel_weight=np.asarray(target.pixel_confidence, dtype=np.float32),
        origin="target",
        provenance=(target.image_id,),
    )


def compose_minibatch(
    source: DatasetSplit,
    pseudo: PseudoLabelSet,
    N_MB: int,
    M_df: MixParams,
    vct: ThresholdVector | None,
    collage: bool,
    rng: np.random.Generator,
    loader: ImageLoader,
    cb_weights: SamplingWeights | None = None,
) -> list[TrainingSample]:
    """One training batch with exact per-origin counts.

    All draws are over id-sorted candidate lists so batches are reproducible
    from the rng stream alone, independent of set construction order.
    """
    if N_MB < 1:
        raise ValueError("N_MB must be >= 1")
    void_id = source.label_space.void_id

    n_target = round_half_up(M_df.p_MB * N_MB)
    if n_target > 0 and not pseudo:
        logger.warning("no pseudo-labeled images available; composing an all-source batch")
        n_target = 0
    n_source = N_MB - n_target

    source_ids = sorted(e.image_id for e in source.entries)
    probs = None
    if cb_weights is not None:
        probs = np.array([cb_weights.weights[i] for i in source_ids])
        probs = probs / probs.sum()

    def draw_source_id() -> str:
        return source_ids[int(rng.choice(len(source_ids), p=probs))]

    batch: list[TrainingSample] = []
    target_ids = sorted(pseudo)
    for _ in range(n_target):
        tid = target_ids[int(rng.choice(len(target_ids)))]
        timage = loader.image(tid)
        if collage:
            if vct is None:
                raise ValueError("collage requires a threshold vector")
            did = draw_source_id()
            batch.append(
                classmix_collage(
                    loader.image(did), loader.labels(did), did,
                    timage, pseudo[tid], vct, M_df.p_CM, void_id,
                )
            )
        else:
            batch.append(target_sample(timage, pseudo[tid]))

    for _ in range(n_source):
        sid = draw_source_id()
        batch.append(source_sample(loader.image(sid), loader.labels(sid), sid, void_id))
    return batch
