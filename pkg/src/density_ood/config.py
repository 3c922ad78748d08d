"""
Run configuration for the Density OoD toolkit.

A run is described by a JSON document mapped onto the dataclasses below.
Every hyperparameter is spelled out
with its default so each run directory records the full set.
"""

import copy
import dataclasses
import enum
import json
import pathlib
from typing import Any, Dict, List, Optional, Union

from density_ood.errors import ConfigError
from density_ood.models import NormalizationMode


class PipelineKind(enum.Enum):
    """Which representation the density model is fitted on."""
    BASELINE = "baseline"
    SVD_REBASIS = "svd_rebasis"
    PCA_TRUNCATE = "pca_truncate"


class ModelFamily(enum.Enum):
    """Density model families."""
    GAUSSIAN = "gaussian"
    PPCA = "ppca"
    MAF = "maf"
    BNAF = "bnaf"


@dataclasses.dataclass
class DatasetConfig:
    """Where one dataset lives on disk."""
    paths: List[str]
    format: str = "idx"
    labels_paths: List[str] = dataclasses.field(default_factory=list)
    name: Optional[str] = None


@dataclasses.dataclass
class PipelineConfig:
    """Representation stage between normalization and fitting."""
    kind: PipelineKind = PipelineKind.BASELINE
    components: Optional[int] = None


@dataclasses.dataclass
class TrainingConfig:
    """Minibatch Adam with early stopping on validation log-likelihood."""
    learning_rate: float = 1e-3
    batch_size: int = 128
    patience: int = 20
    max_epochs: int = 200
    clip_norm: float = 10.0
    seed: int = 0
    monitor_ood: bool = False
    eval_batch_size: int = 2048
    progress: bool = False


@dataclasses.dataclass
class ModelSpec:
    """Model family, architecture tag and family-specific hyperparameters."""
    family: ModelFamily = ModelFamily.GAUSSIAN
    architecture: Optional[str] = None
    ridge: Optional[float] = None
    latent_dim: Optional[int] = None
    ppca_max_iters: int = 500
    ppca_tol: float = 1e-6
    n_flows: Optional[int] = None
    hidden_sizes: Optional[List[int]] = None
    units_per_dim: Optional[int] = None
    hidden_layers: int = 1
    batch_norm: bool = True
    bounded_log_scale: bool = True
    seed: int = 0


@dataclasses.dataclass
class RunConfig:
    """Everything needed to reproduce one experiment."""
    name: str
    train: DatasetConfig
    test: DatasetConfig
    ood: DatasetConfig
    normalization: NormalizationMode = NormalizationMode.QUANTIZED
    pipeline: PipelineConfig = dataclasses.field(default_factory=PipelineConfig)
    model: ModelSpec = dataclasses.field(default_factory=ModelSpec)
    training: TrainingConfig = dataclasses.field(default_factory=TrainingConfig)
    train_fraction: float = 0.9
    split_seed: int = 0
    data_seed: int = 0
    sample_seed: int = 0
    n_samples: int = 10000
    train_subset: Optional[int] = None
    histogram_bins: int = 100
    output_dir: str = "runs"
    render_svg: bool = False
    epsilon: float = 1e-3
    svm_max_iters: int = 2000
    probe_components: int = 30
    full_scale: bool = False


_ENUM_FIELDS = {
    "normalization": NormalizationMode,
    "kind": PipelineKind,
    "family": ModelFamily,
}


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(sorted(unknown))}")

    kwargs = {}
    for key, value in data.items():
        if key in _ENUM_FIELDS and value is not None:
            try:
                value = _ENUM_FIELDS[key](value)
            except ValueError:
                allowed = ", ".join(e.value for e in _ENUM_FIELDS[key])
                raise ConfigError(f"{where}.{key}: '{value}' is not one of {allowed}")
        elif key in ("train", "test", "ood"):
            value = _build(DatasetConfig, value, f"{where}.{key}")
        elif key == "pipeline":
            value = _build(PipelineConfig, value, f"{where}.{key}")
        elif key == "model":
            value = _build(ModelSpec, value, f"{where}.{key}")
        elif key == "training":
            value = _build(TrainingConfig, value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _validate(config: RunConfig) -> RunConfig:
    if config.pipeline.kind is PipelineKind.PCA_TRUNCATE:
        if not config.pipeline.components or config.pipeline.components < 1:
            raise ConfigError("pipeline.components must be a positive integer "
                              "for pca_truncate")
    if config.model.family is ModelFamily.PPCA and config.model.latent_dim is not None:
        if config.model.latent_dim < 1:
            raise ConfigError("model.latent_dim must be positive")
    if config.training.batch_size < 1 or config.training.patience < 0:
        raise ConfigError("training.batch_size must be >= 1 and patience >= 0")
    if not 0.0 < config.train_fraction < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    if config.epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    return config


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build and validate a RunConfig from parsed JSON."""
    return _validate(_build(RunConfig, data, "config"))


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Plain-JSON view of a RunConfig with enums by value."""
    def convert(value):
        if isinstance(value, enum.Enum):
            return value.value
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, list):
            return [convert(v) for v in value]
        return value
    return convert(dataclasses.asdict(config))


def load_config(path: Union[str, pathlib.Path]) -> RunConfig:
    """Read a RunConfig from a JSON file."""
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def _fashion(root: str) -> Dict[str, Any]:
    return {
        "train": {"paths": [f"{root}/fashion/train-images-idx3-ubyte"],
                  "labels_paths": [f"{root}/fashion/train-labels-idx1-ubyte"],
                  "name": "fashion-mnist"},
        "test": {"paths": [f"{root}/fashion/t10k-images-idx3-ubyte"],
                 "labels_paths": [f"{root}/fashion/t10k-labels-idx1-ubyte"],
                 "name": "fashion-mnist-test"},
        "ood": {"paths": [f"{root}/mnist/t10k-images-idx3-ubyte"],
                "labels_paths": [f"{root}/mnist/t10k-labels-idx1-ubyte"],
                "name": "mnist-digits"},
    }


def _cifar(root: str) -> Dict[str, Any]:
    return {
        "train": {"paths": [f"{root}/cifar-10-batches-bin/data_batch_{i}.bin"
                            for i in range(1, 6)],
                  "format": "cifar", "name": "cifar10"},
        "test": {"paths": [f"{root}/cifar-10-batches-bin/test_batch.bin"],
                 "format": "cifar", "name": "cifar10-test"},
        "ood": {"paths": [f"{root}/svhn/test_32x32.mat"],
                "format": "svhn", "name": "svhn"},
    }


_MAF5 = {"family": "maf", "architecture": "maf5"}
_MAF10 = {"family": "maf", "architecture": "maf10"}
# Desk-scale BNAF keeps the family (block-triangular tanh layers) but fewer flows.
_BNAF_DESK = {"family": "bnaf", "n_flows": 2, "units_per_dim": 4}
_BNAF_FULL = {"family": "bnaf", "n_flows": 6, "units_per_dim": 12}
_DESK_TRAINING = {"max_epochs": 30, "patience": 5}

_PRESET_BODIES: Dict[str, Dict[str, Any]] = {
    # fashion vs digits, raw pixels
    "fashion-raw-normal": {"data": "fashion", "model": {"family": "gaussian"}},
    "fashion-raw-maf5": {"data": "fashion", "model": _MAF5, "training": _DESK_TRAINING},
    "fashion-raw-maf5-10k": {"data": "fashion", "model": _MAF5, "training": _DESK_TRAINING,
        "train_subset": 10000},
    "fashion-raw-maf10": {"data": "fashion", "model": _MAF10, "full_scale": True},
    "fashion-raw-bnaf": {"data": "fashion", "model": _BNAF_DESK, "training": _DESK_TRAINING,
        "n_samples": 0},
    # CIFAR10 vs SVHN, raw pixels
    "cifar-raw-normal": {"data": "cifar", "model": {"family": "gaussian"}},
    "cifar-raw-maf5": {"data": "cifar", "model": _MAF5,
        "training": dict(_DESK_TRAINING, monitor_ood=True)},
    "cifar-raw-maf10": {"data": "cifar", "model": _MAF10, "full_scale": True},
    # orthonormal re-basis
    "fashion-rebasis-maf5": {"data": "fashion", "model": _MAF5, "training": _DESK_TRAINING,
        "pipeline": {"kind": "svd_rebasis"}},
    "fashion-rebasis-bnaf": {"data": "fashion", "model": _BNAF_DESK, "training": _DESK_TRAINING,
        "pipeline": {"kind": "svd_rebasis"}, "n_samples": 0},
    "cifar-rebasis-maf5": {"data": "cifar", "model": _MAF5, "training": _DESK_TRAINING,
        "pipeline": {"kind": "svd_rebasis"}},
    # truncated principal components
    "fashion-pca-ppca": {"data": "fashion", "model": {"family": "ppca"},
        "pipeline": {"kind": "pca_truncate", "components": 100}},
    "fashion-pca-maf5": {"data": "fashion", "model": _MAF5, "training": _DESK_TRAINING,
        "pipeline": {"kind": "pca_truncate", "components": 100}},
    "fashion-pca-bnaf": {"data": "fashion", "model": _BNAF_FULL,
        "training": dict(_DESK_TRAINING, monitor_ood=True),
        "pipeline": {"kind": "pca_truncate", "components": 100},
        "n_samples": 0},
    "cifar-pca-ppca": {"data": "cifar", "model": {"family": "ppca"},
        "pipeline": {"kind": "pca_truncate", "components": 2500}},
    "cifar-pca-maf5": {"data": "cifar", "model": _MAF5, "training": _DESK_TRAINING,
        "pipeline": {"kind": "pca_truncate", "components": 2500}},
}

PRESET_NAMES = sorted(_PRESET_BODIES)


def preset(name: str, data_root: str = "data") -> RunConfig:
    """Build a shipped preset against datasets under ``data_root``."""
    if name not in _PRESET_BODIES:
        raise ConfigError(f"unknown preset '{name}'; choose from {', '.join(PRESET_NAMES)}")
    body = copy.deepcopy(_PRESET_BODIES[name])
    source = body.pop("data")
    document = _fashion(data_root) if source == "fashion" else _cifar(data_root)
    document.update(body)
    document["name"] = name
    return config_from_dict(document)
