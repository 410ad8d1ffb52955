import numpy as np
import pytest

from segcotrain.core import LabelMap, LabelSpace, PseudoLabeledImage, VOID_ID


@pytest.fixture
def toy_space() -> LabelSpace:
    from segcotrain.manifest import resolve_label_space

    return resolve_label_space("toy8")


def make_pli(
    image_id: str,
    labels,
    conf=None,
    source_cycle: int = 0,
    source_model: str = "1",
) -> PseudoLabeledImage:
    """Build a PseudoLabeledImage from plain lists; conf defaults to 0.5 at non-void."""
    labels = np.asarray(labels, dtype=np.uint8)
    if conf is None:
        conf = np.where(labels != VOID_ID, 0.5, 0.0)
    conf = np.asarray(conf, dtype=np.float32)
    conf = np.where(labels == VOID_ID, np.float32(0.0), conf)
    return PseudoLabeledImage(
        image_id=image_id,
        labels=LabelMap(labels),
        pixel_confidence=conf,
        source_cycle=source_cycle,
        source_model=source_model,
    )


def assert_dirs_identical(a, b) -> None:
    """Byte-compare two directory trees (relative layout and file contents)."""
    from pathlib import Path

    a, b = Path(a), Path(b)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b, f"layout differs: {set(files_a) ^ set(files_b)}"
    for rel in files_a:
        if (a / rel).read_bytes() != (b / rel).read_bytes():
            raise AssertionError(f"file contents differ: {rel}")


def random_pli(rng: np.random.Generator, image_id: str, shape=(6, 6), num_classes=4,
               void_fraction=0.3) -> PseudoLabeledImage:
    labels = rng.integers(0, num_classes, size=shape).astype(np.uint8)
    void = rng.random(shape) < void_fraction
    labels[void] = VOID_ID
    conf = rng.random(shape).astype(np.float32)
    conf[void] = 0.0
    return make_pli(image_id, labels, conf)
