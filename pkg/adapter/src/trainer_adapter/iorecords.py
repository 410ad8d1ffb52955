"""On-disk formats of the trainer protocol, reimplemented independently.

Records: JSON, sorted keys, two-space indent, trailing newline, UTF-8.
Rasters: raw little-endian float32, C order, with a `<name>.json` sidecar
holding {"dtype": "<f4", "order": "C", "shape": [...]}. All writes are
temp-then-rename so the orchestrator never reads partial files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image


def dumps_record(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_record(path: Path, obj) -> None:
    atomic_write(path, dumps_record(obj).encode("utf-8"))


def read_record(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def write_raster(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    atomic_write(path, arr.tobytes(order="C"))
    write_record(Path(str(path) + ".json"),
                 {"dtype": "<f4", "order": "C", "shape": list(arr.shape)})


def read_raster(path: Path) -> np.ndarray:
    header = read_record(Path(str(path) + ".json"))
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    return flat.reshape([int(s) for s in header["shape"]]).astype(np.float32)


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8)
