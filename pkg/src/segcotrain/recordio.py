"""Canonical on-disk record formats.

Records are JSON with sorted keys and a trailing newline so directory diffs
are meaningful in determinism tests. Rasters are raw little-endian float32,
row-major, with a JSON sidecar header. All writes go through a
temp-file-then-rename so readers never observe partial files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from segcotrain.errors import DataError


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_record(path: str | Path, obj) -> None:
    atomic_write_bytes(path, canonical_dumps(obj).encode("utf-8"))


def read_record(path: str | Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"missing record {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed record {path}: {exc}") from exc


def write_f32_raster(path: str | Path, arr: np.ndarray) -> None:
    """Write raw float32 LE raster plus a `<name>.json` sidecar header."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    atomic_write_bytes(path, arr.tobytes(order="C"))
    write_record(
        Path(str(path) + ".json"),
        {"dtype": "<f4", "order": "C", "shape": list(arr.shape)},
    )


def read_f32_raster(path: str | Path) -> np.ndarray:
    header = read_record(Path(str(path) + ".json"))
    if header.get("dtype") != "<f4" or header.get("order") != "C":
        raise DataError(f"unsupported raster header for {path}: {header}")
    try:
        flat = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    except FileNotFoundError as exc:
        raise DataError(f"missing raster {path}") from exc
    shape = tuple(int(s) for s in header["shape"])
    if flat.size != int(np.prod(shape)):
        raise DataError(f"raster {path} size {flat.size} does not match header shape {shape}")
    return flat.reshape(shape).astype(np.float32)


def write_label_png(path: str | Path, values: np.ndarray) -> None:
    """Single-channel 8-bit PNG carrying raw class ids (255 = void)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def read_label_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                im = im.convert("L")
            return np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read label png {path}: {exc}") from exc


def write_image_png(path: str | Path, rgb: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)
