"""
Storage module for the Density OoD toolkit.

This module persists bases, fitted models, curves and reports to disk and
loads them back. Binary files are big-endian and versioned; JSON files use
sorted keys so identical runs produce identical bytes.
"""

import csv
import dataclasses
import enum
import hashlib
import io
import json
import pathlib
import struct
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from density_ood import flows, gaussmods
from density_ood.errors import StorageError
from density_ood.linbasis import OrthonormalBasis
from density_ood.models import (
    DensityModel,
    EvalReport,
    FiveNumberSummary,
    FitQuality,
    HistogramSeries,
)

PathLike = Union[str, pathlib.Path]

BASIS_FORMAT_VERSION = 1
MODEL_MAGIC = b"DOOD"
MODEL_FORMAT_VERSION = 1


class EnhancedJSONEncoder(json.JSONEncoder):
    """JSON encoder that can handle dataclasses, enums, numpy values and paths."""

    def default(self, o):
        if dataclasses.is_dataclass(o) and not isinstance(o, type):
            return dataclasses.asdict(o)
        if isinstance(o, enum.Enum):
            return o.value
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, pathlib.PurePath):
            return str(o)
        return super().default(o)


def to_json(obj) -> str:
    return json.dumps(obj, cls=EnhancedJSONEncoder, indent=2, sort_keys=True) + "\n"


def write_json(path: PathLike, obj) -> None:
    pathlib.Path(path).write_text(to_json(obj))


def read_json(path: PathLike):
    path = pathlib.Path(path)
    if not path.exists():
        raise StorageError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StorageError(f"{path}: invalid JSON ({exc})") from exc


# Bases

def save_basis(path: PathLike, basis: OrthonormalBasis) -> None:
    """Header (version, d) then mean, singular values and v, all float64."""
    d = basis.dim
    payload = struct.pack(">II", BASIS_FORMAT_VERSION, d)
    payload += np.asarray(basis.mean, dtype=">f8").tobytes()
    payload += np.asarray(basis.singular_values, dtype=">f8").tobytes()
    payload += np.asarray(basis.v, dtype=">f8").tobytes()
    payload += struct.pack(">B", int(basis.degenerate))
    pathlib.Path(path).write_bytes(payload)


def load_basis(path: PathLike) -> OrthonormalBasis:
    path = pathlib.Path(path)
    if not path.exists():
        raise StorageError(f"basis file not found: {path}")
    payload = path.read_bytes()
    if len(payload) < 8:
        raise StorageError(f"{path.name}: truncated basis header")
    version, d = struct.unpack(">II", payload[:8])
    if version != BASIS_FORMAT_VERSION:
        raise StorageError(f"{path.name}: unsupported basis format version {version}")
    expected = 8 + 8 * (2 * d + d * d) + 1
    if len(payload) != expected:
        raise StorageError(f"{path.name}: expected {expected} bytes, found {len(payload)}")

    values = np.frombuffer(payload, dtype=">f8", count=2 * d + d * d, offset=8)
    values = values.astype(np.float64)
    return OrthonormalBasis(
        mean=values[:d].copy(),
        singular_values=values[d:2 * d].copy(),
        v=values[2 * d:].reshape(d, d).copy(),
        degenerate=bool(payload[-1]),
    )


# Models

def _model_arrays(model: DensityModel) -> Tuple[Dict[str, object], Dict[str, np.ndarray]]:
    if isinstance(model, gaussmods.FullCovGaussian):
        return ({"family": "gaussian", "d": model.dim},
                {"mu": model.mu, "cov_factor": model.cov_factor})
    if isinstance(model, gaussmods.PpcaModel):
        meta = {"family": "ppca", "d": model.dim, "k": model.k,
                "sigma2_clamped": model.sigma2_clamped, "ll_trace": model.ll_trace}
        return meta, {"mu": model.mu, "w": model.w, "sigma2": np.array([model.sigma2])}
    if isinstance(model, flows.FlowModel):
        return model.metadata(), model.state_dict()
    raise StorageError(f"no storage layout for {type(model).__name__}")


def _restore_model(meta: Dict[str, object], arrays: Dict[str, np.ndarray]) -> DensityModel:
    family = meta.get("family")
    try:
        if family == "gaussian":
            return gaussmods.FullCovGaussian(arrays["mu"], arrays["cov_factor"])
        if family == "ppca":
            return gaussmods.PpcaModel(arrays["mu"], arrays["w"], float(arrays["sigma2"][0]),
                                       ll_trace=meta.get("ll_trace"),
                                       sigma2_clamped=bool(meta.get("sigma2_clamped")))
    except KeyError as exc:
        raise StorageError(f"model file lacks array {exc}") from exc
    model = flows.flow_from_metadata(meta)
    model.load_state_dict(arrays)
    model.eval()
    return model


def save_model(path: PathLike, model: DensityModel) -> None:
    """Magic, version, tag, JSON metadata, then named float64 arrays."""
    meta, arrays = _model_arrays(model)
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack(">I", MODEL_FORMAT_VERSION))
    tag = model.tag.encode("utf-8")
    out.write(struct.pack(">H", len(tag)) + tag)
    meta_bytes = to_json(meta).encode("utf-8")
    out.write(struct.pack(">I", len(meta_bytes)) + meta_bytes)
    out.write(struct.pack(">I", len(arrays)))
    for name, value in arrays.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        out.write(struct.pack(">H", len(encoded)) + encoded)
        out.write(struct.pack(">B", value.ndim))
        out.write(struct.pack(f">{value.ndim}I", *value.shape))
        out.write(value.astype(">f8").tobytes())
    pathlib.Path(path).write_bytes(out.getvalue())


class _Reader:
    def __init__(self, payload: bytes, name: str):
        self.payload = payload
        self.name = name
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise StorageError(f"{self.name}: truncated at byte {self.pos}")
        chunk = self.payload[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path: PathLike) -> DensityModel:
    path = pathlib.Path(path)
    if not path.exists():
        raise StorageError(f"model file not found: {path}")
    reader = _Reader(path.read_bytes(), path.name)
    if reader.take(4) != MODEL_MAGIC:
        raise StorageError(f"{path.name} is not a model file")
    (version,) = reader.unpack(">I")
    if version != MODEL_FORMAT_VERSION:
        raise StorageError(f"{path.name}: unsupported model format version {version}")
    (tag_len,) = reader.unpack(">H")
    reader.take(tag_len)
    (meta_len,) = reader.unpack(">I")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StorageError(f"{path.name}: unreadable metadata ({exc})") from exc
    (count,) = reader.unpack(">I")
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.unpack(">H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack(">B")
        shape = reader.unpack(f">{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(8 * size), dtype=">f8")
        arrays[name] = data.astype(np.float64).reshape(shape)
    return _restore_model(meta, arrays)


# Curves and reports

CURVE_COLUMNS = ("epoch", "train_ll", "val_ll", "ood_ll")


def write_curve_csv(path: PathLike, curve: Sequence) -> None:
    """One row per epoch; an empty OoD cell when OoD was not monitored."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for point in curve:
            writer.writerow([
                point.epoch,
                repr(float(point.train_ll)),
                repr(float(point.val_ll)),
                "" if point.ood_ll is None else repr(float(point.ood_ll)),
            ])


def read_curve_csv(path: PathLike) -> List[Dict[str, Optional[float]]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        {
            "epoch": int(row["epoch"]),
            "train_ll": float(row["train_ll"]),
            "val_ll": float(row["val_ll"]),
            "ood_ll": float(row["ood_ll"]) if row["ood_ll"] else None,
        }
        for row in rows
    ]


def _decode_report(data: Dict) -> EvalReport:
    """Decode a report from a dictionary."""
    data = dict(data)
    if data.get("ll_histograms"):
        data["ll_histograms"] = HistogramSeries(**data["ll_histograms"])
    if data.get("fit_quality"):
        data["fit_quality"] = FitQuality(data["fit_quality"])
    if data.get("per_class_ll"):
        data["per_class_ll"] = {k: FiveNumberSummary(**v)
                                for k, v in data["per_class_ll"].items()}
    try:
        return EvalReport(**data)
    except TypeError as exc:
        raise StorageError(f"malformed report: {exc}") from exc


def load_report(path: PathLike) -> EvalReport:
    return _decode_report(read_json(path))


class RunDirectory:
    """Artifacts of one run under ``<base_dir>/<name>/`` plus a hash manifest."""

    MANIFEST = "manifest.json"

    def __init__(self, base_dir: PathLike, name: str):
        self.path = pathlib.Path(base_dir) / name
        self.path.mkdir(parents=True, exist_ok=True)
        self.artifacts: List[str] = []

    def file(self, name: str) -> pathlib.Path:
        if name not in self.artifacts:
            self.artifacts.append(name)
        return self.path / name

    def write_json(self, name: str, obj) -> pathlib.Path:
        target = self.file(name)
        write_json(target, obj)
        return target

    def write_text(self, name: str, text: str) -> pathlib.Path:
        target = self.file(name)
        target.write_text(text)
        return target

    def write_manifest(self) -> pathlib.Path:
        """SHA-256 of every recorded artifact that exists on disk."""
        entries = {}
        for name in sorted(self.artifacts):
            target = self.path / name
            if target.exists():
                entries[name] = hashlib.sha256(target.read_bytes()).hexdigest()
        manifest = self.path / self.MANIFEST
        write_json(manifest, {"artifacts": entries})
        return manifest
