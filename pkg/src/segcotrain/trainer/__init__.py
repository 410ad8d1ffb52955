"""Black-box trainer boundary: contract, toy trainer, file protocol."""

from __future__ import annotations

import numpy as np

from segcotrain.core import ConfidenceStack, DatasetSplit, MixParams, ModelHandle, ThresholdVector
from segcotrain.labeling import PseudoLabelSet
from segcotrain.mixing import ImageLoader, compose_minibatch
from segcotrain.preprocess import SamplingWeights
from segcotrain.trainer.session import (
    ExternalTrainerSession,
    ToyTrainerSession,
    TrainerConfig,
    TrainerSession,
    default_passthrough,
)
from segcotrain.trainer.toy import ToyModelState, toy_fit, toy_predict

__all__ = [
    "TrainerConfig",
    "TrainerSession",
    "ToyTrainerSession",
    "ExternalTrainerSession",
    "ToyModelState",
    "toy_fit",
    "toy_predict",
    "default_passthrough",
    "baseline_train",
    "finetune",
    "predict",
]


def baseline_train(
    session: TrainerSession, config: TrainerConfig, source: DatasetSplit, tag: str = "w0"
) -> ModelHandle:
    """Train the source-only model W_0."""
    return session.baseline_train(tag, config, source)


def finetune(
    session: TrainerSession,
    base: ModelHandle | None,
    config: TrainerConfig,
    source: DatasetSplit,
    pseudo: PseudoLabelSet,
    M_df: MixParams,
    vct: ThresholdVector | None,
    loader: ImageLoader,
    rng: np.random.Generator,
    tag: str,
    collage: bool = True,
    cb_weights: SamplingWeights | None = None,
    n_batches: int | None = None,
) -> ModelHandle:
    """Compose mixed source/pseudo batches and deliver them to the trainer.

    base=None trains from the trainer's initial weights; otherwise the base
    handle stays usable afterwards (every cycle fine-tunes from W_0 again).
    """
    n_batches = config.cycle_batches if n_batches is None else n_batches
    batches = [
        compose_minibatch(source, pseudo, config.N_MB, M_df, vct, collage, rng, loader, cb_weights)
        for _ in range(n_batches)
    ]
    return session.train_batches(tag, config, base, batches)


def predict(session: TrainerSession, model: ModelHandle, images: DatasetSplit) -> list[ConfidenceStack]:
    """One normalized confidence stack per image."""
    return session.predict(model, images)
