"""Request loop: serve one session directory until shutdown.

Usage: segcotrain-adapter [--backend NAME] SESSION_DIR STORE_DIR

The orchestrator drops `NNNN.request` records (canonical JSON) into
SESSION_DIR; this process answers each with `NNNN.response`, resolving
relative paths against SESSION_DIR and persisting model weights inside
STORE_DIR (shared between the sessions of a run, which is how co-training
branches exchange base weights). A malformed or failing request produces an
error response and the loop keeps serving; `shutdown` exits cleanly with
code 0.

To attach a real gradient-based segmentation trainer, implement the three
Backend methods below (baseline / finetune / predict) against your framework
and register the class in BACKENDS.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from trainer_adapter import iorecords, linear


class LinearBackend:
    """Per-pixel linear softmax; weights live as .npy files in the store."""

    def __init__(self, store_dir: Path):
        self.store_dir = store_dir

    def _save(self, tag: str, model: linear.LinearModel) -> str:
        ref = f"{tag}.npy"
        linear.save_model(self.store_dir / ref, model)
        return ref

    def baseline(self, payload: dict, resolve) -> dict:
        config = payload["config"]
        source = payload["source"]
        nc = int(source["num_classes"])
        samples = [
            (iorecords.read_image(resolve(e["image_path"])),
             iorecords.read_labels(resolve(e["label_path"])))
            for e in source["entries"]
        ]
        if not samples:
            raise ValueError("baseline_train needs a non-empty labeled split")
        model = linear.train_baseline(nc, samples, int(config["N_MB"]),
                                      int(config["seed"]), config)
        return {"weights": self._save(payload["tag"], model)}

    def finetune(self, payload: dict, resolve) -> dict:
        config = payload["config"]
        nc = int(payload["num_classes"])
        base = payload.get("base_weights")
        model = linear.load_model(self.store_dir / base) if base else linear.LinearModel.zeros(nc)
        batches = [
            [
                (iorecords.read_image(resolve(s["image_path"])),
                 iorecords.read_labels(resolve(s["label_path"])),
                 iorecords.read_raster(resolve(s["weight_path"])))
                for s in batch
            ]
            for batch in payload["batches"]
        ]
        model = linear.train_on_batches(model, nc, batches, config)
        return {"weights": self._save(payload["tag"], model)}

    def predict(self, payload: dict, resolve, session_dir: Path) -> dict:
        model = linear.load_model(self.store_dir / payload["weights"])
        out_rel = payload["output_dir"]
        stacks = []
        for rec in payload["images"]:
            stack = linear.predict_stack(model, iorecords.read_image(resolve(rec["image_path"])))
            raster_rel = f"{out_rel}/{rec['image_id']}.f32"
            iorecords.write_raster(session_dir / raster_rel, stack)
            stacks.append({"image_id": rec["image_id"], "raster": raster_rel})
        return {"stacks": stacks}


BACKENDS = {"linear": LinearBackend}


class AdapterSession:
    """Serves one session directory; strictly one request at a time."""

    def __init__(self, session_dir: str | Path, store_dir: str | Path, backend: str = "linear"):
        self.session_dir = Path(session_dir)
        self.store_dir = Path(store_dir)
        self.session_dir.mkdir(parents=True, exist_ok=True)
        self.store_dir.mkdir(parents=True, exist_ok=True)
        self.backend = BACKENDS[backend](self.store_dir)

    def _resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.session_dir / p

    def handle(self, record: dict) -> dict:
        command = record.get("command")
        payload = record.get("payload", {})
        if command == "baseline_train":
            return self.backend.baseline(payload, self._resolve)
        if command == "finetune":
            return self.backend.finetune(payload, self._resolve)
        if command == "predict":
            return self.backend.predict(payload, self._resolve, self.session_dir)
        raise ValueError(f"unknown command {command!r}")

    def serve(self, poll_interval: float = 0.02) -> int:
        print(f"adapter serving {self.session_dir} (store {self.store_dir})", flush=True)
        counter = 1
        while True:
            req_path = self.session_dir / f"{counter:04d}.request"
            while not req_path.exists():
                time.sleep(poll_interval)
            rid = counter
            try:
                record = iorecords.read_record(req_path)
                rid = int(record.get("id", counter))
            except Exception as exc:  # malformed request: report and keep serving
                self._respond(counter, rid, error=f"malformed request: {exc}")
                counter += 1
                continue
            if record.get("command") == "shutdown":
                self._respond(counter, rid, result={})
                print("adapter shutting down", flush=True)
                return 0
            try:
                result = self.handle(record)
                self._respond(counter, rid, result=result)
            except Exception as exc:
                print(f"request {counter} failed: {exc}", flush=True)
                self._respond(counter, rid, error=str(exc))
            counter += 1

    def _respond(self, counter: int, rid: int, result: dict | None = None,
                 error: str | None = None) -> None:
        record: dict = {"id": rid}
        if error is None:
            record["status"] = "ok"
            record["result"] = result or {}
        else:
            record["status"] = "error"
            record["error"] = {"message": error}
        iorecords.atomic_write(
            self.session_dir / f"{counter:04d}.response",
            iorecords.dumps_record(record).encode("utf-8"),
        )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="segcotrain-adapter")
    parser.add_argument("--backend", default="linear", choices=sorted(BACKENDS))
    parser.add_argument("session_dir")
    parser.add_argument("store_dir")
    args = parser.parse_args(argv)
    return AdapterSession(args.session_dir, args.store_dir, backend=args.backend).serve()


if __name__ == "__main__":
    sys.exit(main())
