"""Pseudo-label level co-training for synth-to-real segmentation adaptation."""

__version__ = "0.1.0"

from segcotrain.core import (
    LabelSpace,
    LabelMap,
    ConfidenceStack,
    PseudoLabeledImage,
    ThresholdVector,
    CurriculumParams,
    MixParams,
    SelfTrainParams,
    CoTrainParams,
    DatasetSplit,
    SplitEntry,
    ModelHandle,
)

__all__ = [
    "LabelSpace",
    "LabelMap",
    "ConfidenceStack",
    "PseudoLabeledImage",
    "ThresholdVector",
    "CurriculumParams",
    "MixParams",
    "SelfTrainParams",
    "CoTrainParams",
    "DatasetSplit",
    "SplitEntry",
    "ModelHandle",
]
