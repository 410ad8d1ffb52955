"""File-based trainer wire protocol.

The orchestrator drops `NNNN.request` records into a session directory and
waits for matching `NNNN.response` records written by the trainer process.
Records are canonical JSON (stable key order, UTF-8); rasters are raw
float32 little-endian with JSON sidecar headers. Writes are atomic
(temp-then-rename) so a reader never sees a partial record.

Commands
--------
baseline_train  payload: {tag, config, source: {num_classes, void_id,
                entries: [{image_id, image_path, label_path}]}}
                -> result {weights}
finetune        payload: {tag, config, num_classes, void_id, base_weights:
                ref | null, batches: [[{image_path, label_path, weight_path,
                origin}]]} -> result {weights}; a null base means "start
                from the trainer's initial weights"
predict         payload: {weights, images: [{image_id, image_path}],
                output_dir} -> result {stacks: [{image_id, raster}]}
shutdown        payload: {} -> result {}; the trainer process then exits 0

Relative paths in payloads and results are resolved against the session
directory; weights references resolve inside the run's shared model store,
which the trainer receives as its second command-line argument.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

from segcotrain.errors import TrainerError
from segcotrain import recordio


def encode_record(obj) -> bytes:
    return recordio.canonical_dumps(obj).encode("utf-8")


def decode_record(data: bytes):
    return json.loads(data.decode("utf-8"))


def request_path(session_dir: Path, request_id: int) -> Path:
    return session_dir / f"{request_id:04d}.request"


def response_path(session_dir: Path, request_id: int) -> Path:
    return session_dir / f"{request_id:04d}.response"


def write_request(session_dir: Path, request_id: int, command: str, payload: dict) -> None:
    record = {"id": request_id, "command": command, "payload": payload}
    recordio.atomic_write_bytes(request_path(session_dir, request_id), encode_record(record))


def write_response(session_dir: Path, request_id: int, result: dict | None, error: str | None = None) -> None:
    record: dict = {"id": request_id}
    if error is None:
        record["status"] = "ok"
        record["result"] = result or {}
    else:
        record["status"] = "error"
        record["error"] = {"message": error}
    recordio.atomic_write_bytes(response_path(session_dir, request_id), encode_record(record))


def wait_for_response(
    session_dir: Path,
    request_id: int,
    timeout: float,
    alive_check=None,
    log_tail=None,
) -> dict:
    """Poll for the response record; raise TrainerError on timeout or trainer death."""
    path = response_path(session_dir, request_id)
    deadline = time.monotonic() + timeout
    while True:
        if path.exists():
            record = decode_record(path.read_bytes())
            if record.get("id") != request_id:
                raise TrainerError(
                    f"response id mismatch: expected {request_id}, got {record.get('id')}",
                    log_tail() if log_tail else None,
                )
            if record.get("status") != "ok":
                message = record.get("error", {}).get("message", "unknown trainer error")
                raise TrainerError(
                    f"trainer request {request_id} failed: {message}",
                    log_tail() if log_tail else None,
                )
            return record.get("result", {})
        if alive_check is not None and not alive_check():
            raise TrainerError(
                f"trainer exited before answering request {request_id}",
                log_tail() if log_tail else None,
            )
        if time.monotonic() > deadline:
            raise TrainerError(
                f"timed out after {timeout}s waiting for response {request_id}",
                log_tail() if log_tail else None,
            )
        time.sleep(0.02)
