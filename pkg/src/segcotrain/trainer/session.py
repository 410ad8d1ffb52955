"""Trainer sessions: the black-box model boundary.

A session talks to one trainer instance; the orchestrator only ever holds
opaque weight references. References resolve inside a model store directory
shared by all sessions of a run, which is how the co-training branches can
fine-tune from the self-training stage's snapshots. Two transports exist:
the in-process toy trainer and an external process speaking the file
protocol. Within a session requests are strictly serial; run the two
co-training branches in distinct sessions for concurrency.
"""

from __future__ import annotations

import contextlib
import subprocess
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from segcotrain.core import ConfidenceStack, DatasetSplit, LabelMap, ModelHandle
from segcotrain.errors import TrainerError
from segcotrain.mixing import TrainingSample, source_sample
from segcotrain.preprocess import load_image, load_label_map
from segcotrain import recordio
from segcotrain.trainer import protocol, toy


def default_passthrough() -> dict:
    """Full-scale schedule defaults, opaque to this engine and to the toy trainer."""
    return {
        "optimizer": "sgd",
        "base_lr": 0.002,
        "momentum": 0.9,
        "iterations": 60000,
        "cycle_iterations": 8000,
        "lr_decay_factor": 0.1,
        "lr_decay_milestones": [1 / 3, 2 / 3],
        "crop_size": [1024, 512],
        "augmentations": ["random_zoom", "horizontal_flip"],
    }


@dataclass(frozen=True)
class TrainerConfig:
    """Training knobs: N_MB and seed are honored by every trainer, the rest is pass-through.

    cycle_batches / final_batches size the batch stream the orchestrator
    composes and delivers per fine-tuning round (desk-scale analog of the
    pass-through iteration counts, which only external trainers interpret).
    """

    N_MB: int = 4
    seed: int = 0
    cycle_batches: int = 64
    final_batches: int = 128
    passthrough: dict = field(default_factory=default_passthrough)

    def __post_init__(self):
        if self.N_MB < 1:
            raise ValueError("N_MB must be >= 1")
        if self.cycle_batches < 1 or self.final_batches < 1:
            raise ValueError("batch counts must be >= 1")

    def to_record(self) -> dict:
        return {
            "N_MB": self.N_MB,
            "seed": self.seed,
            "cycle_batches": self.cycle_batches,
            "final_batches": self.final_batches,
            "passthrough": self.passthrough,
        }


class TrainerSession(ABC):
    """Serial request boundary around one trainer instance."""

    def __init__(self, session_id: str, branch: str):
        self.session_id = session_id
        self.branch = branch
        self._in_flight = False

    @contextlib.contextmanager
    def _request_slot(self):
        if self._in_flight:
            raise TrainerError(f"session {self.session_id}: a request is already in flight")
        self._in_flight = True
        try:
            yield
        finally:
            self._in_flight = False

    @abstractmethod
    def baseline_train(self, tag: str, config: TrainerConfig, source: DatasetSplit) -> ModelHandle: ...

    @abstractmethod
    def train_batches(
        self,
        tag: str,
        config: TrainerConfig,
        base: ModelHandle | None,
        batches: list[list[TrainingSample]],
    ) -> ModelHandle: ...

    @abstractmethod
    def predict(self, model: ModelHandle, images: DatasetSplit) -> list[ConfidenceStack]: ...

    def close(self) -> None:
        pass


class ToyTrainerSession(TrainerSession):
    """In-process Gaussian naive-Bayes trainer; states persist as .npy in the store."""

    def __init__(self, store_dir: str | Path, num_classes: int, branch: str = "1",
                 temperature: float = toy.TOY_TEMPERATURE):
        super().__init__(session_id=f"toy-b{branch}", branch=branch)
        self.store_dir = Path(store_dir)
        self.num_classes = num_classes
        self.temperature = temperature

    def _save(self, tag: str, state: toy.ToyModelState) -> ModelHandle:
        ref = f"{tag}.npy"
        toy.save_state(self.store_dir / ref, state)
        return ModelHandle(branch=self.branch, session_id=self.session_id, weights_ref=ref)

    def _load(self, model: ModelHandle) -> toy.ToyModelState:
        path = self.store_dir / model.weights_ref
        if not path.exists():
            raise TrainerError(f"weights {model.weights_ref} not found in store {self.store_dir}")
        return toy.load_state(path)

    def baseline_train(self, tag: str, config: TrainerConfig, source: DatasetSplit) -> ModelHandle:
        if source.kind != "labeled":
            raise ValueError("baseline training needs a labeled split")
        if len(source) == 0:
            raise ValueError("baseline training needs a non-empty split")
        with self._request_slot():
            state = toy.ToyModelState.empty(self.num_classes, self.temperature)
            samples = (_split_sample(e, source.label_space.void_id) for e in source.entries)
            state = toy.toy_fit(state, samples, void_id=source.label_space.void_id)
            return self._save(tag, state)

    def train_batches(self, tag, config, base, batches) -> ModelHandle:
        with self._request_slot():
            if base is None:
                state = toy.ToyModelState.empty(self.num_classes, self.temperature)
            else:
                state = self._load(base)
            for batch in batches:
                state = toy.toy_fit(state, batch)
            return self._save(tag, state)

    def predict(self, model: ModelHandle, images: DatasetSplit) -> list[ConfidenceStack]:
        with self._request_slot():
            state = self._load(model)
            return [toy.toy_predict(state, load_image(e.image_path)) for e in images.entries]


def _split_sample(entry, void_id: int) -> TrainingSample:
    image = load_image(entry.image_path)
    labels = LabelMap(load_label_map(entry.label_path))
    return source_sample(image, labels, entry.image_id, void_id)


class ExternalTrainerSession(TrainerSession):
    """Session over the file protocol against a spawned trainer executable.

    The executable is started as `<exe> [extra args] <session_dir> <store_dir>`
    and serves requests until shutdown. Its stdout/stderr land in
    `<session_dir>/trainer.log`, whose tail is attached to protocol errors.
    """

    def __init__(
        self,
        session_dir: str | Path,
        store_dir: str | Path,
        executable: str | list[str],
        num_classes: int,
        void_id: int = 255,
        branch: str = "1",
        timeout: float = 600.0,
    ):
        session_dir = Path(session_dir)
        super().__init__(session_id=f"ext-b{branch}", branch=branch)
        self.session_dir = session_dir
        self.store_dir = Path(store_dir)
        self.num_classes = num_classes
        self.void_id = void_id
        self.timeout = timeout
        self._counter = 0
        session_dir.mkdir(parents=True, exist_ok=True)
        self.store_dir.mkdir(parents=True, exist_ok=True)
        self._log_path = session_dir / "trainer.log"
        self._log_fh = open(self._log_path, "ab")
        exe = [executable] if isinstance(executable, str) else list(executable)
        args = exe + [str(session_dir), str(self.store_dir)]
        try:
            self._proc = subprocess.Popen(args, stdout=self._log_fh, stderr=subprocess.STDOUT)
        except OSError as exc:
            raise TrainerError(f"cannot spawn trainer {exe}: {exc}") from exc

    def _log_tail(self) -> str:
        try:
            lines = self._log_path.read_text(errors="replace").splitlines()
            return "\n".join(lines[-20:])
        except OSError:
            return "<no trainer log>"

    def _roundtrip(self, command: str, payload: dict) -> dict:
        with self._request_slot():
            self._counter += 1
            rid = self._counter
            protocol.write_request(self.session_dir, rid, command, payload)
            return protocol.wait_for_response(
                self.session_dir,
                rid,
                self.timeout,
                alive_check=lambda: self._proc.poll() is None,
                log_tail=self._log_tail,
            )

    def baseline_train(self, tag, config, source) -> ModelHandle:
        if source.kind != "labeled" or len(source) == 0:
            raise ValueError("baseline training needs a non-empty labeled split")
        payload = {
            "tag": tag,
            "config": config.to_record(),
            "source": {
                "num_classes": source.label_space.num_classes,
                "void_id": source.label_space.void_id,
                "entries": [
                    {"image_id": e.image_id, "image_path": e.image_path, "label_path": e.label_path}
                    for e in source.entries
                ],
            },
        }
        result = self._roundtrip("baseline_train", payload)
        return ModelHandle(branch=self.branch, session_id=self.session_id,
                           weights_ref=result["weights"])

    def train_batches(self, tag, config, base, batches) -> ModelHandle:
        rid = self._counter + 1
        rel_batches = self._dump_batches(rid, batches)
        payload = {
            "tag": tag,
            "config": config.to_record(),
            "num_classes": self.num_classes,
            "void_id": self.void_id,
            "base_weights": None if base is None else base.weights_ref,
            "batches": rel_batches,
        }
        result = self._roundtrip("finetune", payload)
        return ModelHandle(branch=self.branch, session_id=self.session_id,
                           weights_ref=result["weights"])

    def predict(self, model, images) -> list[ConfidenceStack]:
        out_dir = f"out/req{self._counter + 1:04d}"
        payload = {
            "weights": model.weights_ref,
            "images": [{"image_id": e.image_id, "image_path": e.image_path} for e in images.entries],
            "output_dir": out_dir,
        }
        result = self._roundtrip("predict", payload)
        by_id = {rec["image_id"]: rec["raster"] for rec in result["stacks"]}
        stacks = []
        for e in images.entries:
            raster = recordio.read_f32_raster(self.session_dir / by_id[e.image_id])
            stacks.append(ConfidenceStack(np.clip(raster, 0.0, 1.0)))
        return stacks

    def _dump_batches(self, rid: int, batches: list[list[TrainingSample]]) -> list[list[dict]]:
        root = self.session_dir / "data" / f"req{rid:04d}"
        rel_batches = []
        for bi, batch in enumerate(batches):
            rel_batch = []
            for si, sample in enumerate(batch):
                stem = f"b{bi:03d}_s{si:02d}"
                recordio.write_image_png(root / f"{stem}_image.png", sample.image)
                recordio.write_label_png(root / f"{stem}_labels.png", sample.labels.values)
                recordio.write_f32_raster(root / f"{stem}_weight.f32", sample.pixel_weight)
                rel = f"data/req{rid:04d}/{stem}"
                rel_batch.append(
                    {
                        "image_path": rel + "_image.png",
                        "label_path": rel + "_labels.png",
                        "weight_path": rel + "_weight.f32",
                        "origin": sample.origin,
                    }
                )
            rel_batches.append(rel_batch)
        return rel_batches

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._roundtrip("shutdown", {})
            except TrainerError:
                pass
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        self._log_fh.close()
