"""Minimal per-pixel linear-softmax trainer.

Logits are an affine map of five per-pixel features (r, g, b, normalized x,
normalized y), trained with seeded momentum SGD over weighted cross-entropy.
Deliberately a different model family from the orchestrator's built-in toy
trainer, so protocol conformance proves the black-box boundary is real.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trainer_adapter import iorecords

NUM_FEATURES = 5

DEFAULTS = {
    "baseline_steps": 400,
    "baseline_lr": 4.0,
    "finetune_lr": 1.0,
    "finetune_epochs": 2,
    "momentum": 0.9,
}


def hyper(config: dict) -> dict:
    out = dict(DEFAULTS)
    out.update(config.get("passthrough", {}).get("adapter", {}))
    return out


def pixel_features(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    rgb = image.reshape(-1, 3).astype(np.float64) / 255.0
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.column_stack([rgb, xs / max(w - 1, 1), ys / max(h - 1, 1)])


@dataclass
class LinearModel:
    weights: np.ndarray  # (C, 5)
    bias: np.ndarray  # (C,)

    @staticmethod
    def zeros(num_classes: int) -> "LinearModel":
        return LinearModel(np.zeros((num_classes, NUM_FEATURES)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return int(self.bias.shape[0])

    def clone(self) -> "LinearModel":
        return LinearModel(self.weights.copy(), self.bias.copy())

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weights.T + self.bias

    def probabilities(self, feats: np.ndarray) -> np.ndarray:
        z = self.logits(feats)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def save_model(path: Path, model: LinearModel) -> None:
    packed = np.column_stack([model.weights, model.bias])
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, packed)
    tmp.replace(path)
    iorecords.write_record(Path(str(path) + ".json"), {"num_classes": model.num_classes})


def load_model(path: Path) -> LinearModel:
    packed = np.load(path)
    return LinearModel(weights=packed[:, :NUM_FEATURES].copy(), bias=packed[:, NUM_FEATURES].copy())


class Optimizer:
    def __init__(self, model: LinearModel, lr: float, momentum: float):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.vel_w = np.zeros_like(model.weights)
        self.vel_b = np.zeros_like(model.bias)

    def step(self, feats: np.ndarray, labels: np.ndarray, weight: np.ndarray) -> None:
        """One weighted cross-entropy SGD step; zero-weight pixels are dropped."""
        use = weight > 0
        if not use.any():
            return
        feats, labels, weight = feats[use], labels[use], weight[use]
        probs = self.model.probabilities(feats)
        probs[np.arange(labels.size), labels] -= 1.0
        probs *= (weight / weight.sum())[:, None]
        grad_w = probs.T @ feats
        grad_b = probs.sum(axis=0)
        self.vel_w = self.momentum * self.vel_w - self.lr * grad_w
        self.vel_b = self.momentum * self.vel_b - self.lr * grad_b
        self.model.weights += self.vel_w
        self.model.bias += self.vel_b


def _sample_arrays(image, labels, weight, num_classes, void_id=255):
    feats = pixel_features(image)
    flat_labels = labels.ravel().astype(np.int64)
    flat_weight = weight.ravel().astype(np.float64)
    flat_weight = np.where((flat_labels == void_id) | (flat_labels >= num_classes),
                           0.0, flat_weight)
    flat_labels = np.where(flat_labels >= num_classes, 0, flat_labels)
    return feats, flat_labels, flat_weight


def train_baseline(num_classes: int, samples: list[tuple[np.ndarray, np.ndarray]],
                   n_mb: int, seed: int, config: dict) -> LinearModel:
    """Seeded mini-batch SGD over the labeled split; one step per sampled batch."""
    hp = hyper(config)
    model = LinearModel.zeros(num_classes)
    opt = Optimizer(model, hp["baseline_lr"], hp["momentum"])
    rng = np.random.default_rng(seed)
    cache = [
        _sample_arrays(img, lab, np.ones_like(lab, dtype=np.float64), num_classes)
        for img, lab in samples
    ]
    for _ in range(int(hp["baseline_steps"])):
        picks = rng.choice(len(cache), size=min(n_mb, len(cache)), replace=False)
        feats = np.concatenate([cache[i][0] for i in picks])
        labels = np.concatenate([cache[i][1] for i in picks])
        weight = np.concatenate([cache[i][2] for i in picks])
        opt.step(feats, labels, weight)
    return model


def train_on_batches(model: LinearModel, num_classes: int,
                     batches: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]],
                     config: dict) -> LinearModel:
    """Fine-tune on orchestrator-composed batches: one step per batch per epoch."""
    hp = hyper(config)
    model = model.clone()
    opt = Optimizer(model, hp["finetune_lr"], hp["momentum"])
    prepared = [
        [_sample_arrays(img, lab, w, num_classes) for img, lab, w in batch]
        for batch in batches
    ]
    for _ in range(int(hp["finetune_epochs"])):
        for batch in prepared:
            feats = np.concatenate([s[0] for s in batch])
            labels = np.concatenate([s[1] for s in batch])
            weight = np.concatenate([s[2] for s in batch])
            opt.step(feats, labels, weight)
    return model


def predict_stack(model: LinearModel, image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    probs = model.probabilities(pixel_features(image))
    return np.clip(probs.T.reshape(model.num_classes, h, w), 0.0, 1.0).astype(np.float32)
