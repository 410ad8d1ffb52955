"""Dataset manifests and the named label-space registry.

A manifest is a canonical JSON record; image/label paths are stored relative
to the manifest file so datasets are relocatable. image_ids must be unique
and filename-safe because pseudo-label artifacts are named after them.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from segcotrain.core import DatasetSplit, LabelMap, LabelSpace, SplitEntry, SplitKind
from segcotrain.errors import DataError
from segcotrain.preprocess import SamplingWeights, load_image, load_label_map
from segcotrain import recordio

_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")

TOY8_CLASSES = ("road", "sidewalk", "building", "vegetation", "sky", "person", "car", "pole")

CITYSCAPES19_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole",
    "traffic light", "traffic sign", "vegetation", "terrain", "sky",
    "person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle",
)
# SYNTHIA-style 16-class setting: drop terrain, truck, train
CITYSCAPES16_SUBSET = tuple(c for c in range(19) if c not in (9, 14, 16))
# 13-class setting: additionally drop wall, fence, pole
CITYSCAPES13_SUBSET = tuple(c for c in CITYSCAPES16_SUBSET if c not in (3, 4, 5))

LABEL_SPACES: dict[str, LabelSpace] = {
    "toy8": LabelSpace(num_classes=8, class_names=TOY8_CLASSES),
    "cityscapes19": LabelSpace(num_classes=19, class_names=CITYSCAPES19_CLASSES),
}

EVAL_SUBSETS: dict[str, dict[str, tuple[int, ...]]] = {
    "cityscapes19": {"16": CITYSCAPES16_SUBSET, "13": CITYSCAPES13_SUBSET},
}


def resolve_label_space(name: str) -> LabelSpace:
    try:
        return LABEL_SPACES[name]
    except KeyError:
        raise DataError(f"unknown label space {name!r}; known: {sorted(LABEL_SPACES)}") from None


def save_manifest(
    path: str | Path,
    dataset: str,
    label_space: str,
    entries: list[dict],
    kind: SplitKind,
) -> None:
    recordio.write_record(
        path,
        {"dataset": dataset, "label_space": label_space, "kind": kind, "entries": entries},
    )


def load_manifest(path: str | Path, weights: bool = False) -> DatasetSplit | tuple[DatasetSplit, SamplingWeights | None]:
    path = Path(path)
    record = recordio.read_record(path)
    space = resolve_label_space(record["label_space"])
    base = path.parent
    entries = []
    weight_map: dict[str, float] = {}
    for rec in record["entries"]:
        image_id = rec["image_id"]
        if not _ID_RE.match(image_id):
            raise DataError(f"image_id {image_id!r} is not filename-safe")
        image_path = base / rec["image_path"]
        if not image_path.exists():
            raise DataError(f"missing image file {image_path}")
        label_path = None
        if rec.get("label_path"):
            label_path = base / rec["label_path"]
            if not label_path.exists():
                raise DataError(f"missing label file {label_path}")
        entries.append(
            SplitEntry(
                image_id=image_id,
                image_path=str(image_path),
                label_path=None if label_path is None else str(label_path),
            )
        )
        if rec.get("sampling_weight") is not None:
            weight_map[image_id] = float(rec["sampling_weight"])
    split = DatasetSplit(kind=record["kind"], entries=tuple(entries), label_space=space)
    if not weights:
        return split
    sw = SamplingWeights(weights=weight_map) if weight_map else None
    return split, sw


class SplitLoader:
    """ImageLoader over one or more splits, with a small in-memory cache."""

    def __init__(self, *splits: DatasetSplit, cache: bool = True):
        self._entries: dict[str, SplitEntry] = {}
        for split in splits:
            for e in split.entries:
                self._entries[e.image_id] = e
        self._cache = cache
        self._images: dict[str, np.ndarray] = {}
        self._labels: dict[str, LabelMap] = {}

    def _entry(self, image_id: str) -> SplitEntry:
        try:
            return self._entries[image_id]
        except KeyError:
            raise DataError(f"image_id {image_id!r} not found in any registered split") from None

    def image(self, image_id: str) -> np.ndarray:
        if image_id not in self._images:
            img = load_image(self._entry(image_id).image_path)
            if not self._cache:
                return img
            self._images[image_id] = img
        return self._images[image_id]

    def labels(self, image_id: str) -> LabelMap:
        if image_id not in self._labels:
            entry = self._entry(image_id)
            if entry.label_path is None:
                raise DataError(f"image {image_id!r} has no label map")
            lm = LabelMap(load_label_map(entry.label_path))
            if not self._cache:
                return lm
            self._labels[image_id] = lm
        return self._labels[image_id]
