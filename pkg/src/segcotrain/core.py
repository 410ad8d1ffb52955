"""Domain types shared by every pipeline stage.

All types are immutable value objects after construction (arrays are marked
read-only), so they can be shared freely between concurrent workers.
Confidences are stored and compared as float32; every ranking tie in the
pipeline is broken by ascending image_id for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

VOID_ID = 255

BranchTag = Literal["1", "2", "ensemble"]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LabelSpace:
    """Class-id vocabulary with a reserved void id (Cityscapes-style ignore convention)."""

    num_classes: int
    class_names: tuple[str, ...]
    void_id: int = VOID_ID
    eval_subset: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 1 <= self.num_classes <= 254:
            raise ValueError(f"num_classes must be in [1, 254], got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        if 0 <= self.void_id < self.num_classes:
            raise ValueError(f"void_id {self.void_id} collides with class ids [0, {self.num_classes})")
        if self.eval_subset is not None:
            bad = [c for c in self.eval_subset if not 0 <= c < self.num_classes]
            if bad:
                raise ValueError(f"eval_subset ids out of range: {bad}")


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class-id raster (uint8, H x W); void pixels carry the reserved void id."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.uint8)
        if v.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ConfidenceStack:
    """Per-pixel, per-class confidences (float32, C x H x W), each in [0, 1].

    Stacks produced by a trainer are normalized posteriors: per-pixel sums
    equal 1 within 1e-4.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(f"confidence stack must be 3-D (C,H,W), got shape {v.shape}")
        if v.size and (float(v.min()) < 0.0 or float(v.max()) > 1.0):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def image_confidence_of(labels: LabelMap, pixel_confidence: np.ndarray, void_id: int) -> np.float32:
    """Mean pixel confidence over non-void pixels, 0 if everything is void.

    Computed in float32 so a stored value and a recomputation from the same
    rasters are bit-identical.
    """
    nonvoid = labels.values != void_id
    if not bool(nonvoid.any()):
        return np.float32(0.0)
    conf = np.asarray(pixel_confidence, dtype=np.float32)
    return np.float32(conf[nonvoid].mean(dtype=np.float32))


@dataclass(frozen=True)
class PseudoLabeledImage:
    """One pseudo-labeled image: the unit ranked, fused, and exchanged between models.

    image_confidence is always recomputed at construction from the rasters;
    pixel_confidence must be exactly 0 wherever the label is void.
    """

    image_id: str
    labels: LabelMap
    pixel_confidence: np.ndarray
    source_cycle: int
    source_model: BranchTag
    void_id: int = VOID_ID
    image_confidence: np.float32 = field(init=False)

    def __post_init__(self):
        conf = np.asarray(self.pixel_confidence, dtype=np.float32)
        if conf.shape != self.labels.values.shape:
            raise ValueError(
                f"pixel_confidence shape {conf.shape} != label shape {self.labels.values.shape}"
            )
        if conf.size and (float(conf.min()) < 0.0 or float(conf.max()) > 1.0):
            raise ValueError("pixel confidences must lie in [0, 1]")
        void_mask = self.labels.values == self.void_id
        if conf[void_mask].any():
            raise ValueError("pixel_confidence must be 0 at void pixels")
        object.__setattr__(self, "pixel_confidence", _freeze(conf))
        object.__setattr__(
            self, "image_confidence", image_confidence_of(self.labels, conf, self.void_id)
        )

    @property
    def height(self) -> int:
        return self.labels.height

    @property
    def width(self) -> int:
        return self.labels.width


@dataclass(frozen=True)
class CurriculumParams:
    """Self-paced curriculum parameters {p_m, p_M, delta_p, C_m, C_M}."""

    p_m: float
    p_M: float
    delta_p: float
    C_m: float
    C_M: float

    def __post_init__(self):
        if not 0.0 <= self.p_m <= self.p_M <= 1.0:
            raise ValueError(f"need 0 <= p_m <= p_M <= 1, got p_m={self.p_m}, p_M={self.p_M}")
        if self.delta_p < 0.0:
            raise ValueError("delta_p must be >= 0")
        if not 0.0 <= self.C_m <= self.C_M <= 1.0:
            raise ValueError(f"need 0 <= C_m <= C_M <= 1, got C_m={self.C_m}, C_M={self.C_M}")


@dataclass(frozen=True)
class ThresholdVector:
    """Per-class confidence thresholds with curriculum provenance (V_CT)."""

    per_class: np.ndarray
    curriculum_fraction: float
    cycle: int

    def __post_init__(self):
        v = np.asarray(self.per_class, dtype=np.float32)
        if v.ndim != 1:
            raise ValueError("per_class must be 1-D")
        if v.size and (float(v.min()) < 0.0 or float(v.max()) > 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        object.__setattr__(self, "per_class", _freeze(v))

    @property
    def num_classes(self) -> int:
        return int(self.per_class.shape[0])


@dataclass(frozen=True)
class MixParams:
    """Mini-batch composition fractions {p_MB, p_CM}."""

    p_MB: float
    p_CM: float

    def __post_init__(self):
        if not 0.0 <= self.p_MB <= 1.0:
            raise ValueError("p_MB must be in [0, 1]")
        if not 0.0 <= self.p_CM <= 1.0:
            raise ValueError("p_CM must be in [0, 1]")


@dataclass(frozen=True)
class SelfTrainParams:
    """Self-training hyper-parameters {T, N, n, K_m, K_M, M_df}."""

    T: CurriculumParams
    N: int
    n: int
    K_m: int
    K_M: int
    M_df: MixParams

    def __post_init__(self):
        if self.n > self.N:
            raise ValueError(f"need n <= N, got n={self.n}, N={self.N}")
        if not 0 <= self.K_m < self.K_M:
            raise ValueError(f"need 0 <= K_m < K_M, got K_m={self.K_m}, K_M={self.K_M}")


FinalSelector = Literal["ensemble", "branch1", "branch2"]


@dataclass(frozen=True)
class CoTrainParams:
    """Co-training loop hyper-parameters {K, w, lambda}."""

    K: int
    w: FinalSelector
    lam: float

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.w not in ("ensemble", "branch1", "branch2"):
            raise ValueError(f"w must be ensemble|branch1|branch2, got {self.w!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")


SplitKind = Literal["labeled", "unlabeled", "pseudo-labeled"]


@dataclass(frozen=True)
class SplitEntry:
    image_id: str
    image_path: str
    label_path: str | None = None


@dataclass(frozen=True)
class DatasetSplit:
    """An ordered, immutable list of dataset entries plus its label space."""

    kind: SplitKind
    entries: tuple[SplitEntry, ...]
    label_space: LabelSpace

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image_ids in split")
        if self.kind == "labeled":
            missing = [e.image_id for e in self.entries if e.label_path is None]
            if missing:
                raise ValueError(f"labeled split entries missing label_path: {missing[:4]}")
        if self.kind == "unlabeled":
            extra = [e.image_id for e in self.entries if e.label_path is not None]
            if extra:
                raise ValueError(f"unlabeled split entries must not carry label_path: {extra[:4]}")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> tuple[str, ...]:
        return tuple(e.image_id for e in self.entries)

    def subset(self, ids: list[str]) -> "DatasetSplit":
        by_id = {e.image_id: e for e in self.entries}
        return DatasetSplit(self.kind, tuple(by_id[i] for i in ids), self.label_space)


@dataclass(frozen=True)
class ModelHandle:
    """Opaque reference to trainer-owned weights; resolvable only by its session."""

    branch: str
    session_id: str
    weights_ref: str


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    bad_count: int
    bad_samples: tuple[tuple[int, int, int], ...]  # (row, col, value), capped at 16


def validate_label_map(label_map: LabelMap, space: LabelSpace) -> ValidationReport:
    """Check that every pixel is a valid class id or void; never raises."""
    v = label_map.values
    bad = (v >= space.num_classes) & (v != space.void_id)
    n_bad = int(bad.sum())
    if n_bad == 0:
        return ValidationReport(ok=True, bad_count=0, bad_samples=())
    rows, cols = np.nonzero(bad)
    samples = tuple(
        (int(r), int(c), int(v[r, c])) for r, c in zip(rows[:16], cols[:16])
    )
    return ValidationReport(ok=False, bad_count=n_bad, bad_samples=samples)
