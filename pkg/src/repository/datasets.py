import gzip
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
from loguru import logger

from src.entity.dataset import Dataset
from src.services.errors import IdxFormatError, LabelError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"


def synth_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    *,
    separation: float = 4.0,
    neighbours: Sequence[tuple[int, int, float]] = (),
    sample_stream: int = 0,
) -> Dataset:
    """
    Gaussian blob per class around seeded class centers.

    Centers are drawn at distance ``separation`` from the origin in random directions. Each
    ``(class_id, anchor, closeness)`` entry of ``neighbours`` moves the center of ``class_id``
    to ``anchor + closeness * (center - anchor)``, so ``closeness=0`` co-locates the two classes.
    The centers depend on ``seed`` only; ``sample_stream`` selects an independent noise stream,
    which is how a train and a test split share one geometry.

    Args:
        num_classes (int): Number of classes.
        per_class (int): Samples drawn per class.
        dim (int): Feature dimension.
        spread (float): Standard deviation of every blob.
        seed (int): Geometry and noise seed.
        separation (float): Norm of every center before the neighbour moves.
        neighbours (Sequence[tuple[int, int, float]]): Center moves applied in order.
        sample_stream (int): Noise stream id.

    Returns:
        Dataset: ``num_classes * per_class`` samples ordered by class.
    """
    if min(num_classes, per_class, dim) <= 0:
        raise LabelError("num_classes, per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    centers = separation * directions / np.where(norms > 0, norms, 1.0)
    for class_id, anchor, closeness in neighbours:
        if not (0 <= class_id < num_classes and 0 <= anchor < num_classes):
            raise LabelError(f"neighbour entry ({class_id}, {anchor}) outside [0, {num_classes})")
        centers[class_id] = centers[anchor] + closeness * (centers[class_id] - centers[anchor])

    noise_rng = np.random.default_rng([seed, sample_stream])
    classes = np.repeat(np.arange(num_classes), per_class)
    samples = centers[classes] + spread * noise_rng.normal(size=(classes.size, dim))
    return Dataset.from_classes(samples, classes, num_classes)


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, path, expected_magic: int, dims: int) -> tuple[int, ...]:
    size = 4 * (dims + 1)
    if len(raw) < size:
        raise IdxFormatError(f"{path}: header needs {size} bytes, file has {len(raw)}", "truncated")
    magic, *shape = struct.unpack(">" + "I" * (dims + 1), raw[:size])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}", "magic")
    return tuple(shape)


def read_idx_images(path: str | Path) -> np.ndarray:
    raw = _read_bytes(path)
    count, rows, cols = _header(raw, path, IMAGES_MAGIC, 3)
    needed = 16 + count * rows * cols
    if len(raw) < needed:
        raise IdxFormatError(f"{path}: {count} images need {needed} bytes, file has {len(raw)}", "truncated")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    raw = _read_bytes(path)
    (count,) = _header(raw, path, LABELS_MAGIC, 1)
    if len(raw) < 8 + count:
        raise IdxFormatError(f"{path}: {count} labels need {8 + count} bytes, file has {len(raw)}", "truncated")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int = 10) -> Dataset:
    """
    Loads an IDX image/label file pair, plain or gzip-compressed.

    Args:
        images_path (str | Path): IDX3 image file (magic ``0x00000803``).
        labels_path (str | Path): IDX1 label file (magic ``0x00000801``).
        num_classes (int): Number of classes. Defaults to 10.

    Returns:
        Dataset: Single-channel pixels scaled to [0, 1] with shape ``(n, 1, rows, cols)`` and hard labels.

    Raises:
        IdxFormatError: With category ``magic``, ``truncated`` or ``count``.
        LabelError: If a label byte is not a valid class id.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.size:
        raise IdxFormatError(
            f"{images.shape[0]} images in {images_path} but {labels.size} labels in {labels_path}", "count"
        )
    if labels.size and int(labels.max()) >= num_classes:
        raise LabelError(f"label {int(labels.max())} outside [0, {num_classes})")
    logger.debug(f"loaded {labels.size} samples of shape {images.shape[1:]} from {images_path}")
    pixels = images[:, None].astype(np.float64) / 255.0
    return Dataset.from_classes(pixels, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """
    Writes uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files; ``.gz`` paths are compressed.
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    count, rows, cols = images.shape
    image_bytes = struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols) + images.tobytes()
    label_bytes = struct.pack(">II", LABELS_MAGIC, labels.size) + labels.tobytes()
    for path, payload in ((images_path, image_bytes), (labels_path, label_bytes)):
        path = Path(path)
        if path.suffix == ".gz":
            payload = gzip.compress(payload, mtime=0)
        path.write_bytes(payload)
