"""Synth-to-real LAB statistics alignment and the class-balance sampling policy.

The alignment is Reinhard-style per-channel mean/std matching in CIE L*a*b*
(D65, standard sRGB companding), computed per source dataset. Channels with
zero source variance map to the target mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from segcotrain.core import DatasetSplit, LabelSpace
from segcotrain.errors import DataError

# sRGB (linear) -> XYZ, D65 white point
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0


def rgb_to_lab(rgb) -> np.ndarray:
    """sRGB in [0, 255] (..., 3) -> CIE L*a*b* under D65."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    linear = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB2XYZ.T / _WHITE_D65
    f = np.where(xyz > _DELTA**3, np.cbrt(xyz), xyz / (3 * _DELTA**2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab) -> np.ndarray:
    """CIE L*a*b* -> sRGB float in [0, 255], clipped."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0)) * _WHITE_D65
    linear = xyz @ _XYZ2RGB.T
    linear = np.clip(linear, 0.0, None)
    c = np.where(linear <= 0.0031308, linear * 12.92, 1.055 * linear ** (1 / 2.4) - 0.055)
    return np.clip(c * 255.0, 0.0, 255.0)


@dataclass(frozen=True)
class LabStats:
    """Pooled per-channel mean/std over L, a, b."""

    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,)
    sample_size: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if std.min() < 0:
            raise ValueError("std must be >= 0")
        if not 0.0 <= mean[0] <= 100.0:
            raise ValueError(f"L mean must be in [0, 100], got {mean[0]}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def load_image(path: str) -> np.ndarray:
    """Load an RGB image as (H, W, 3) uint8; unreadable files raise DataError."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def dataset_lab_stats(split: DatasetSplit, sample_size: int = 500, seed: int = 0) -> LabStats:
    """Pooled LAB mean/std over all pixels of a seeded sample of the split's images."""
    if len(split) == 0:
        raise DataError("cannot compute LAB stats of an empty split")
    entries = sorted(split.entries, key=lambda e: e.image_id)
    k = min(sample_size, len(entries))
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(len(entries), size=k, replace=False).tolist())

    # mergeable partial sums: count, per-channel sum, per-channel sum of squares
    count = 0
    s = np.zeros(3)
    sq = np.zeros(3)
    for i in picks:
        lab = rgb_to_lab(load_image(entries[i].image_path)).reshape(-1, 3)
        count += lab.shape[0]
        s += lab.sum(axis=0)
        sq += (lab * lab).sum(axis=0)
    mean = s / count
    var = np.maximum(sq / count - mean * mean, 0.0)
    return LabStats(mean=mean, std=np.sqrt(var), sample_size=k)


def align_lab(lab: np.ndarray, src: LabStats, tgt: LabStats) -> np.ndarray:
    """Per-channel (x - mu_src) / sigma_src * sigma_tgt + mu_tgt on float LAB rasters."""
    out = np.empty_like(lab, dtype=np.float64)
    for ch in range(3):
        if src.std[ch] == 0.0:
            out[..., ch] = tgt.mean[ch]
        else:
            out[..., ch] = (lab[..., ch] - src.mean[ch]) / src.std[ch] * tgt.std[ch] + tgt.mean[ch]
    return out


def lab_align_image(img: np.ndarray, src: LabStats, tgt: LabStats) -> np.ndarray:
    """Align one sRGB uint8 image from src stats to tgt stats; returns uint8."""
    aligned = align_lab(rgb_to_lab(img), src, tgt)
    return np.round(lab_to_rgb(aligned)).astype(np.uint8)


@dataclass(frozen=True)
class SamplingWeights:
    """image_id -> positive weight, normalized to sum 1."""

    weights: dict[str, float]

    def __post_init__(self):
        if self.weights:
            vals = np.array(list(self.weights.values()))
            if vals.min() <= 0:
                raise ValueError("weights must be > 0")
            if abs(float(vals.sum()) - 1.0) > 1e-9:
                raise ValueError("weights must sum to 1")


def load_label_map(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read label map {path}: {exc}") from exc
    if arr.size == 0:
        raise DataError(f"label map {path} is empty")
    return arr


def class_balance_weights(split: DatasetSplit, space: LabelSpace | None = None) -> SamplingWeights:
    """Image weights boosting under-represented classes.

    Per-class pixel frequency f_c is counted over the whole split; class
    rarity is median(f) / f_c; an image's weight is the max rarity among the
    classes it contains. Scale-invariant: duplicating the split leaves
    per-image weights unchanged after renormalization.
    """
    if split.kind != "labeled":
        raise ValueError("class balance weights need a labeled split")
    if len(split) == 0:
        raise DataError("cannot weight an empty split")
    space = space or split.label_space
    nc = space.num_classes

    class_pixels = np.zeros(nc, dtype=np.int64)
    per_image_classes: list[tuple[str, np.ndarray]] = []
    for e in split.entries:
        labels = load_label_map(e.label_path)
        valid = labels[labels != space.void_id]
        counts = np.bincount(valid.astype(np.int64), minlength=nc)[:nc]
        class_pixels += counts
        per_image_classes.append((e.image_id, np.nonzero(counts)[0]))

    present = class_pixels > 0
    freq = class_pixels / max(int(class_pixels.sum()), 1)
    rarity = np.zeros(nc)
    if present.any():
        rarity[present] = np.median(freq[present]) / freq[present]
        floor = float(rarity[present].min())
    else:
        floor = 1.0

    raw = {
        image_id: (float(rarity[classes].max()) if classes.size else floor)
        for image_id, classes in per_image_classes
    }
    total = sum(raw.values())
    return SamplingWeights(weights={k: v / total for k, v in raw.items()})
