"""Built-in deterministic toy trainer.

A weighted Gaussian naive-Bayes per class over five per-pixel features
(r, g, b, normalized x, normalized y). Prediction is a temperature-scaled
softmax of the per-class log-likelihoods plus log-prior. Model state is a
pure function of the ordered samples and weights, so the whole pipeline is
reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from segcotrain.core import ConfidenceStack
from segcotrain.mixing import TrainingSample
from segcotrain import recordio

VAR_FLOOR = 1e-4
NUM_FEATURES = 5
TOY_TEMPERATURE = 12.0


def pixel_features(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (H*W, 5) float64 features in [0, 1]."""
    h, w = image.shape[:2]
    rgb = image.reshape(-1, 3).astype(np.float64) / 255.0
    ys, xs = np.divmod(np.arange(h * w), w)
    fx = xs / max(w - 1, 1)
    fy = ys / max(h - 1, 1)
    return np.column_stack([rgb, fx, fy])


@dataclass(frozen=True)
class ToyModelState:
    """Per-class sufficient statistics: weight sum, weighted feature sums and square sums."""

    weight: np.ndarray  # (C,)
    feat_sum: np.ndarray  # (C, 5)
    feat_sqsum: np.ndarray  # (C, 5)
    temperature: float = TOY_TEMPERATURE

    @staticmethod
    def empty(num_classes: int, temperature: float = TOY_TEMPERATURE) -> "ToyModelState":
        return ToyModelState(
            weight=np.zeros(num_classes),
            feat_sum=np.zeros((num_classes, NUM_FEATURES)),
            feat_sqsum=np.zeros((num_classes, NUM_FEATURES)),
            temperature=temperature,
        )

    @property
    def num_classes(self) -> int:
        return int(self.weight.shape[0])


def toy_fit(state: ToyModelState, samples: Iterable[TrainingSample], void_id: int = 255) -> ToyModelState:
    """Accumulate weighted per-pixel evidence; zero-weight pixels contribute nothing."""
    weight = state.weight.copy()
    feat_sum = state.feat_sum.copy()
    feat_sqsum = state.feat_sqsum.copy()
    nc = state.num_classes
    for s in samples:
        labels = s.labels.values.ravel().astype(np.int64)
        w = np.asarray(s.pixel_weight, dtype=np.float64).ravel()
        feats = pixel_features(s.image)
        use = (w > 0) & (labels != void_id) & (labels < nc)
        labels, w, feats = labels[use], w[use], feats[use]
        weight += np.bincount(labels, weights=w, minlength=nc)
        for j in range(NUM_FEATURES):
            feat_sum[:, j] += np.bincount(labels, weights=w * feats[:, j], minlength=nc)
            feat_sqsum[:, j] += np.bincount(labels, weights=w * feats[:, j] ** 2, minlength=nc)
    return ToyModelState(weight=weight, feat_sum=feat_sum, feat_sqsum=feat_sqsum,
                         temperature=state.temperature)


def class_log_likelihood(state: ToyModelState, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class Gaussian log-likelihood + log prior for each feature row.

    Returns (loglik (N, C), trained (C,) bool). Untrained classes get no
    likelihood; callers must mask them out.
    """
    trained = state.weight > 0
    total = float(state.weight.sum())
    n = feats.shape[0]
    ll = np.full((n, state.num_classes), -np.inf)
    for c in np.nonzero(trained)[0]:
        mean = state.feat_sum[c] / state.weight[c]
        var = np.maximum(state.feat_sqsum[c] / state.weight[c] - mean**2, VAR_FLOOR)
        diff = feats - mean
        ll[:, c] = (
            -0.5 * ((diff**2 / var).sum(axis=1) + np.log(2.0 * np.pi * var).sum())
            + np.log(state.weight[c] / total)
        )
    return ll, trained


def toy_predict(state: ToyModelState, image: np.ndarray) -> ConfidenceStack:
    """Normalized per-pixel class posteriors; uniform if the model is untrained."""
    h, w = image.shape[:2]
    nc = state.num_classes
    feats = pixel_features(image)
    ll, trained = class_log_likelihood(state, feats)
    if not trained.any():
        probs = np.full((h * w, nc), 1.0 / nc)
    else:
        logits = ll / state.temperature
        logits[:, ~trained] = -np.inf
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
    stack = probs.T.reshape(nc, h, w).astype(np.float32)
    return ConfidenceStack(np.clip(stack, 0.0, 1.0))


def save_state(path: str | Path, state: ToyModelState) -> None:
    packed = np.column_stack([state.weight, state.feat_sum, state.feat_sqsum])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, packed)
    tmp.replace(path)
    recordio.write_record(
        Path(str(path) + ".json"),
        {"num_classes": state.num_classes, "temperature": state.temperature},
    )


def load_state(path: str | Path) -> ToyModelState:
    packed = np.load(path)
    meta = recordio.read_record(Path(str(path) + ".json"))
    return ToyModelState(
        weight=packed[:, 0].copy(),
        feat_sum=packed[:, 1 : 1 + NUM_FEATURES].copy(),
        feat_sqsum=packed[:, 1 + NUM_FEATURES :].copy(),
        temperature=float(meta["temperature"]),
    )
