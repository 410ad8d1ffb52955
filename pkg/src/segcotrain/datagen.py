"""Deterministic synthetic street-scene generator.

Produces desk-scale source/target domains with a controllable gap: the
target differs from the source by per-class color shifts, a global channel
affine, and heavier noise. Every pixel gets a non-void label, and person /
pole stay rare so class-frequency imbalance and per-class thresholds are
exercised.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from segcotrain.core import DatasetSplit, LabelMap, SplitEntry
from segcotrain.errors import DataError
from segcotrain.manifest import TOY8_CLASSES, save_manifest
from segcotrain import recordio

ROAD, SIDEWALK, BUILDING, VEGETATION, SKY, PERSON, CAR, POLE = range(8)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    class_means: np.ndarray  # (8, 3) in [0, 255]
    class_stds: np.ndarray  # (8, 3)
    gain: np.ndarray  # (3,) global channel affine
    bias: np.ndarray  # (3,)
    noise_sigma: float
    size: tuple[int, int] = (64, 64)  # (H, W)
    horizon_range: tuple[float, float] = (0.30, 0.42)
    building_count: tuple[int, int] = (1, 3)
    vegetation_count: tuple[int, int] = (1, 3)
    car_count: tuple[int, int] = (0, 2)
    person_count: tuple[int, int] = (0, 2)
    pole_count: tuple[int, int] = (1, 2)

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        stds = np.asarray(self.class_stds, dtype=np.float64)
        if means.min() < 0 or means.max() > 255:
            raise ValueError("class color means must lie in [0, 255]")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "class_stds", stds)
        object.__setattr__(self, "gain", np.asarray(self.gain, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))


def default_source_spec() -> DomainSpec:
    return DomainSpec(
        name="toy-source",
        class_means=np.array(
            [
                [108.0, 108.0, 112.0],  # road
                [168.0, 156.0, 140.0],  # sidewalk
                [146.0, 104.0, 92.0],  # building
                [62.0, 124.0, 58.0],  # vegetation
                [132.0, 172.0, 224.0],  # sky
                [204.0, 64.0, 60.0],  # person
                [58.0, 62.0, 168.0],  # car
                [92.0, 92.0, 92.0],  # pole
            ]
        ),
        class_stds=np.full((8, 3), 5.0),
        gain=np.ones(3),
        bias=np.zeros(3),
        noise_sigma=3.0,
    )


def default_target_spec() -> DomainSpec:
    # Per-class shifts that no single global transform can undo (sidewalk and
    # pole drift toward road grays, vegetation darkens toward building), plus
    # a global cast + heavier noise that LAB alignment largely fixes. The
    # position features of the toy trainer stay reliable across domains, which
    # is what lets pseudo-labels bootstrap the color confusion away.
    return DomainSpec(
        name="toy-target",
        class_means=np.array(
            [
                [100.0, 106.0, 130.0],  # road: bluer asphalt
                [112.0, 112.0, 126.0],  # sidewalk: drifts toward road gray
                [118.0, 102.0, 100.0],  # building
                [78.0, 94.0, 84.0],  # vegetation: darker, desaturated
                [142.0, 154.0, 196.0],  # sky: hazier
                [164.0, 88.0, 84.0],  # person
                [84.0, 78.0, 150.0],  # car
                [100.0, 104.0, 112.0],  # pole: drifts toward sidewalk gray
            ]
        ),
        class_stds=np.full((8, 3), 7.0),
        gain=np.array([0.80, 0.86, 0.74]),
        bias=np.array([14.0, 10.0, 24.0]),
        noise_sigma=7.0,
        horizon_range=(0.32, 0.44),
    )


def _rand_count(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def generate_scene(spec: DomainSpec, seed) -> tuple[np.ndarray, LabelMap]:
    """One (image, label map) pair; identical output for identical (spec, seed)."""
    rng = np.random.default_rng(seed)
    h, w = spec.size
    labels = np.full((h, w), SIDEWALK, dtype=np.uint8)

    horizon = int(round(h * rng.uniform(*spec.horizon_range)))
    horizon = min(max(horizon, 4), h - 8)
    labels[:horizon] = SKY

    # buildings rise from the horizon into the sky band
    for _ in range(_rand_count(rng, spec.building_count)):
        bw = int(rng.integers(8, 20))
        x0 = int(rng.integers(0, max(w - bw, 1)))
        top = int(rng.integers(1, max(horizon - 3, 2)))
        labels[top:horizon, x0 : x0 + bw] = BUILDING

    # vegetation blobs straddle the horizon line
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(_rand_count(rng, spec.vegetation_count)):
        cx = int(rng.integers(0, w))
        cy = int(rng.integers(max(horizon - 6, 1), horizon + 2))
        rx = int(rng.integers(3, 8))
        ry = int(rng.integers(2, 6))
        blob = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        blob &= yy < horizon
        labels[blob] = VEGETATION

    # road trapezoid widening toward the viewer
    cx = int(rng.integers(w // 2 - 6, w // 2 + 7))
    w_top = int(rng.integers(2, 5))
    w_bot = int(rng.integers(12, 20))
    for r in range(horizon, h):
        t = (r - horizon) / max(h - 1 - horizon, 1)
        half = int(round(w_top + t * (w_bot - w_top)))
        labels[r, max(cx - half, 0) : min(cx + half + 1, w)] = ROAD

    # poles near the sidewalk edge of the road
    for _ in range(_rand_count(rng, spec.pole_count)):
        px = int(rng.integers(0, w))
        p_top = int(rng.integers(max(horizon - 12, 0), max(horizon - 4, 1)))
        p_bot = min(horizon + int(rng.integers(2, 6)), h)
        labels[p_top:p_bot, px : px + 1] = POLE

    # cars sit on the road
    for _ in range(_rand_count(rng, spec.car_count)):
        cw = int(rng.integers(7, 12))
        ch = int(rng.integers(4, 7))
        cy = int(rng.integers(horizon + 3, h - ch))
        t = (cy - horizon) / max(h - 1 - horizon, 1)
        half = int(round(w_top + t * (w_bot - w_top)))
        cx0 = int(rng.integers(max(cx - half, 0), max(cx + half - cw, max(cx - half, 0) + 1)))
        labels[cy : cy + ch, cx0 : cx0 + cw] = CAR

    # persons stand on the sidewalk
    for _ in range(_rand_count(rng, spec.person_count)):
        ph = int(rng.integers(4, 7))
        py = int(rng.integers(horizon + 1, h - ph))
        side = rng.random() < 0.5
        px = int(rng.integers(1, max(cx - w_bot - 2, 2))) if side else int(
            rng.integers(min(cx + w_bot + 1, w - 3), w - 2)
        )
        labels[py : py + ph, px : px + 2] = PERSON

    colors = spec.class_means[labels] + rng.standard_normal((h, w, 3)) * spec.class_stds[labels]
    colors = colors * spec.gain + spec.bias
    if spec.noise_sigma > 0:
        colors = colors + rng.standard_normal((h, w, 3)) * spec.noise_sigma
    image = np.clip(np.round(colors), 0, 255).astype(np.uint8)
    return image, LabelMap(labels)


def generate_split(
    spec: DomainSpec,
    count: int,
    seed: int,
    labeled: bool,
    out_dir: str | Path,
    prefix: str,
    manifest_name: str = "manifest.json",
) -> DatasetSplit:
    """Write images (and labels when requested) plus a manifest; returns the loaded split."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

    from segcotrain.manifest import resolve_label_space

    space = resolve_label_space("toy8")
    entries = []
    manifest_entries = []
    for i in range(count):
        image, lm = generate_scene(spec, seed=[seed, i])
        image_id = f"{prefix}{i:04d}"
        image_rel = f"{image_id}.png"
        recordio.write_image_png(out_dir / image_rel, image)
        rec: dict = {"image_id": image_id, "image_path": image_rel}
        label_rel = None
        if labeled:
            label_rel = f"{image_id}_labels.png"
            recordio.write_label_png(out_dir / label_rel, lm.values)
            rec["label_path"] = label_rel
        manifest_entries.append(rec)
        entries.append(
            SplitEntry(
                image_id=image_id,
                image_path=str(out_dir / image_rel),
                label_path=None if label_rel is None else str(out_dir / label_rel),
            )
        )
    kind = "labeled" if labeled else "unlabeled"
    save_manifest(out_dir / manifest_name, spec.name, "toy8", manifest_entries, kind)
    return DatasetSplit(kind=kind, entries=tuple(entries), label_space=space)
