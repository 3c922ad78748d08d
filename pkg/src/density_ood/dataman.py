"""
Dataset ingestion for the Density OoD toolkit.

Reads MNIST-style IDX files, CIFAR-10 binary batches and SVHN ``.mat`` files,
normalizes pixels onto the [-1, 1) scale and produces deterministic
train/validation splits.
"""

import logging
import pathlib
import struct
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.io

from density_ood.errors import DataFormatError, DatasetError
from density_ood.models import (
    PIXEL_STEP,
    Dataset,
    NormalizationMode,
    Preprocessing,
    SplitSpec,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_UBYTE_TYPE = 0x08

CIFAR_PIXELS = 3072
CIFAR_RECORD = CIFAR_PIXELS + 1


def _read_bytes(path: PathLike) -> bytes:
    path = pathlib.Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    return path.read_bytes()


def parse_idx(payload: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an array of its declared shape.

    Header layout: two zero bytes, a type byte, a dimension-count byte, then one
    big-endian 32-bit size per dimension.
    """
    if len(payload) < 4:
        raise DataFormatError("truncated IDX header", offset=len(payload))
    zero, dtype_code, ndim = struct.unpack(">HBB", payload[:4])
    if zero != 0 or dtype_code != IDX_UBYTE_TYPE or ndim not in (1, 3):
        magic = struct.unpack(">I", payload[:4])[0]
        raise DataFormatError(f"unsupported IDX type 0x{magic:08x}", offset=0)

    header_end = 4 + 4 * ndim
    if len(payload) < header_end:
        raise DataFormatError("truncated IDX dimension table", offset=len(payload))
    shape = struct.unpack(f">{ndim}I", payload[4:header_end])

    expected = 1
    for axis, size in enumerate(shape):
        expected *= size
        if expected > 2**40:
            raise DataFormatError("IDX dimensions overflow", offset=4 + 4 * axis)
    if len(payload) - header_end < expected:
        raise DataFormatError(
            f"truncated IDX payload: expected {expected} bytes, "
            f"found {len(payload) - header_end}",
            offset=len(payload),
        )
    data = np.frombuffer(payload, dtype=np.uint8, count=expected, offset=header_end)
    return data.reshape(shape)


def load_idx(path: PathLike, labels_path: Optional[PathLike] = None,
             name: Optional[str] = None) -> Dataset:
    """Load an IDX image file (and optionally its label file) as raw bytes.

    Images are flattened row-major to d = rows x cols per sample.
    """
    path = pathlib.Path(path)
    images = parse_idx(_read_bytes(path))
    if images.ndim != 3:
        raise DataFormatError(
            f"unsupported IDX type: {path.name} holds labels, not images", offset=0
        )
    features = images.reshape(images.shape[0], -1)

    labels = None
    if labels_path is not None:
        labels = parse_idx(_read_bytes(labels_path))
        if labels.ndim != 1:
            raise DataFormatError(
                f"unsupported IDX type: {pathlib.Path(labels_path).name} "
                f"does not hold labels",
                offset=0,
            )
        if labels.shape[0] != features.shape[0]:
            raise DatasetError(
                f"{path.name} has {features.shape[0]} images but "
                f"{labels.shape[0]} labels"
            )

    logger.info("Loaded %d IDX images of %d pixels from %s",
                features.shape[0], features.shape[1], path)
    return Dataset(features=features, name=name or path.stem, labels=labels)


def write_idx(path: PathLike, array: np.ndarray) -> None:
    """Write an unsigned-byte array of rank 1 or 3 in IDX format."""
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise DatasetError("IDX writer takes uint8 arrays of rank 1 or 3")
    header = struct.pack(">HBB", 0, IDX_UBYTE_TYPE, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    pathlib.Path(path).write_bytes(header + np.ascontiguousarray(array).tobytes())


def load_cifar_binary(path: PathLike, name: Optional[str] = None) -> Dataset:
    """Load one CIFAR-10 binary batch: records of 1 label byte + 3072 pixels."""
    path = pathlib.Path(path)
    payload = _read_bytes(path)
    if len(payload) == 0 or len(payload) % CIFAR_RECORD != 0:
        whole = len(payload) - len(payload) % CIFAR_RECORD
        raise DataFormatError(
            f"truncated record: {path.name} is {len(payload)} bytes, "
            f"not a multiple of {CIFAR_RECORD}",
            offset=whole,
        )
    records = np.frombuffer(payload, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    logger.info("Loaded %d CIFAR records from %s", records.shape[0], path)
    return Dataset(
        features=records[:, 1:],
        name=name or path.stem,
        labels=records[:, 0],
    )


def write_cifar_binary(path: PathLike, images: np.ndarray, labels: np.ndarray) -> None:
    """Write N x 3072 uint8 images with their labels as a CIFAR-10 batch."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pathlib.Path(path).write_bytes(np.hstack([labels, images]).tobytes())


def load_svhn_mat(path: PathLike, name: Optional[str] = None) -> Dataset:
    """Load an SVHN cropped-digit ``.mat`` file in CIFAR pixel order.

    ``X`` is stored as 32 x 32 x 3 x N; rows come out channel-major
    (all red, then green, then blue) like CIFAR. Label 10 means digit 0.
    """
    path = pathlib.Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    try:
        contents = scipy.io.loadmat(str(path))
    except (ValueError, OSError) as exc:
        raise DataFormatError(f"cannot read SVHN file {path.name}: {exc}") from exc
    if "X" not in contents:
        raise DataFormatError(f"{path.name} has no 'X' array")

    images = np.asarray(contents["X"], dtype=np.uint8)
    if images.ndim != 4 or images.shape[:3] != (32, 32, 3):
        raise DataFormatError(f"{path.name} holds X of shape {images.shape}")
    features = images.transpose(3, 2, 0, 1).reshape(images.shape[3], CIFAR_PIXELS)

    labels = None
    if "y" in contents:
        labels = np.asarray(contents["y"], dtype=np.int64).ravel() % 10
    logger.info("Loaded %d SVHN images from %s", features.shape[0], path)
    return Dataset(features=features, name=name or path.stem, labels=labels)


def load_dataset(paths: Sequence[PathLike], fmt: str,
                 labels_paths: Optional[Sequence[PathLike]] = None,
                 name: Optional[str] = None) -> Dataset:
    """Load and concatenate several files of one format (idx, cifar or svhn)."""
    if not paths:
        raise DatasetError("no dataset paths given")
    labels_paths = list(labels_paths or [])
    parts = []
    for i, path in enumerate(paths):
        if fmt == "idx":
            labels_path = labels_paths[i] if i < len(labels_paths) else None
            parts.append(load_idx(path, labels_path))
        elif fmt == "cifar":
            parts.append(load_cifar_binary(path))
        elif fmt == "svhn":
            parts.append(load_svhn_mat(path))
        else:
            raise DatasetError(f"unknown dataset format '{fmt}'")

    if len(parts) == 1:
        first = parts[0]
        return Dataset(features=first.features, name=name or first.name,
                       labels=first.labels)
    if len({p.d for p in parts}) != 1:
        raise DatasetError("dataset files disagree on the number of features")
    labels = None
    if all(p.labels is not None for p in parts):
        labels = np.concatenate([p.labels for p in parts])
    return Dataset(
        features=np.vstack([p.features for p in parts]),
        name=name or parts[0].name,
        labels=labels,
    )


def normalize(raw: Dataset, mode: NormalizationMode, seed: int = 0) -> Dataset:
    """Map byte pixels onto pixel/128 - 1, optionally with uniform dequantization.

    Dequantized values are (pixel + u)/128 - 1 with u ~ U[0, 1) from a
    generator seeded by ``seed``; the noise is drawn once per call.
    """
    pixels = np.asarray(raw.features)
    if pixels.min() < 0 or pixels.max() > 255:
        raise DatasetError(
            f"dataset '{raw.name}' holds values outside [0, 255]; "
            f"it is not raw pixel data"
        )
    pixels = pixels.astype(np.float64)
    if mode is NormalizationMode.DEQUANTIZED:
        rng = np.random.default_rng(seed)
        pixels = pixels + rng.random(pixels.shape)
        scaled = np.minimum(pixels * PIXEL_STEP - 1.0, np.nextafter(1.0, 0.0))
        return raw.with_features(scaled, Preprocessing.DEQUANTIZED)
    return raw.with_features(pixels * PIXEL_STEP - 1.0, Preprocessing.QUANTIZED)


def split(data: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    """Shuffle rows with ``spec.seed`` and cut them into train and validation.

    The train size is floor(N * fraction) clamped to [1, N - 1].
    """
    if data.n < 2:
        raise DatasetError(f"cannot split dataset '{data.name}' with {data.n} row(s)")
    n_train = int(np.floor(data.n * spec.train_fraction))
    n_train = min(max(n_train, 1), data.n - 1)

    order = np.random.default_rng(spec.seed).permutation(data.n)
    train = data.take(np.sort(order[:n_train]), name=f"{data.name}-train")
    val = data.take(np.sort(order[n_train:]), name=f"{data.name}-val")
    return train, val


def subsample(data: Dataset, n: int, seed: int) -> Dataset:
    """Deterministically keep ``n`` rows (all rows when ``n >= N``)."""
    if n <= 0:
        raise DatasetError(f"subsample size must be positive, got {n}")
    if n >= data.n:
        return data
    rows = np.random.default_rng(seed).choice(data.n, size=n, replace=False)
    return data.take(np.sort(rows))
