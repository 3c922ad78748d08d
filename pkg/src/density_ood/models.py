"""
Data models for the Density OoD toolkit.

Datasets, split specifications, separability certificates, evaluation reports
and the contract every density model satisfies.
"""

import abc
import dataclasses
import enum
from typing import Dict, List, Optional

import numpy as np

from density_ood.errors import DatasetError, SamplingNotSupportedError

# Quantized pixels live on k/128 - 1; one lattice step.
PIXEL_STEP = 1.0 / 128.0


class Preprocessing(enum.Enum):
    """How the feature matrix of a dataset was produced."""
    QUANTIZED = "quantized"
    DEQUANTIZED = "dequantized"
    REBASED = "rebased"
    PCA_TRUNCATED = "pca_truncated"


class NormalizationMode(enum.Enum):
    """Pixel normalization applied to raw bytes."""
    QUANTIZED = "quantized"
    DEQUANTIZED = "dequantized"


class SeparabilityStatus(enum.Enum):
    """Outcome of a separability certification."""
    SEPARABLE = "separable"
    NOT_SEPARABLE_LINEAR = "not_separable_linear"
    UNKNOWN = "unknown"


class FitQuality(enum.Enum):
    """Verdict of the sample-vs-data likelihood histogram diagnostic."""
    POOR = "poor"
    PARTIAL = "partial"
    GOOD = "good"


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True)
class Dataset:
    """A row-major N x d feature matrix with optional class labels.

    Raw datasets straight from a loader hold unsigned bytes and have no
    preprocessing tag; everything downstream holds float64 values.
    """
    features: np.ndarray
    name: str
    labels: Optional[np.ndarray] = None
    preprocessing: Optional[Preprocessing] = None

    def __post_init__(self):
        features = np.asarray(self.features)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise DatasetError(
                f"dataset '{self.name}' needs a non-empty 2-D feature matrix, "
                f"got shape {features.shape}"
            )
        if features.dtype.kind == "f" and not np.all(np.isfinite(features)):
            raise DatasetError(f"dataset '{self.name}' holds non-finite values")
        if self.preprocessing is Preprocessing.QUANTIZED:
            self._check_range(features, -1.0, 1.0 - PIXEL_STEP, closed=True)
        elif self.preprocessing is Preprocessing.DEQUANTIZED:
            self._check_range(features, -1.0, 1.0, closed=False)
        object.__setattr__(self, "features", _readonly(features))

        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (features.shape[0],):
                raise DatasetError(
                    f"dataset '{self.name}' has {features.shape[0]} rows "
                    f"but {labels.shape} labels"
                )
            object.__setattr__(self, "labels", _readonly(labels))

    def _check_range(self, features: np.ndarray, low: float, high: float,
                     closed: bool) -> None:
        above = features.max() > high if closed else features.max() >= high
        if features.min() < low or above:
            raise DatasetError(
                f"dataset '{self.name}' is tagged {self.preprocessing.value} "
                f"but holds values outside its range"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray,
                      preprocessing: Optional[Preprocessing],
                      name: Optional[str] = None) -> "Dataset":
        """Return a dataset with new features and the same labels."""
        return Dataset(
            features=features,
            name=name or self.name,
            labels=self.labels,
            preprocessing=preprocessing,
        )

    def take(self, indices: np.ndarray, name: Optional[str] = None) -> "Dataset":
        """Return the rows at ``indices``, labels kept consistent."""
        return Dataset(
            features=self.features[indices],
            name=name or self.name,
            labels=None if self.labels is None else self.labels[indices],
            preprocessing=self.preprocessing,
        )


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    """Train/validation split parameters."""
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DatasetError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )
        if self.seed < 0:
            raise DatasetError(f"seed must be unsigned, got {self.seed}")


@dataclasses.dataclass
class SeparabilityCertificate:
    """A hyperplane (h, beta) with margin epsilon, or the reason there is none.

    With status SEPARABLE, ``a @ h - beta > epsilon`` holds for every row of A
    and ``b @ h - beta < -epsilon`` for every row of B.
    """
    h: np.ndarray
    beta: float
    epsilon: float
    status: SeparabilityStatus
    margins_a: np.ndarray
    margins_b: np.ndarray
    method: str = "lp"
    misclassified_a: float = 0.0
    misclassified_b: float = 0.0

    def summary(self) -> Dict[str, object]:
        """Margin extrema and verdict, without the per-row arrays."""
        return {
            "status": self.status.value,
            "method": self.method,
            "beta": float(self.beta),
            "epsilon": float(self.epsilon),
            "min_margin_a": float(self.margins_a.min()) if self.margins_a.size else None,
            "max_margin_b": float(self.margins_b.max()) if self.margins_b.size else None,
            "misclassified_a": float(self.misclassified_a),
            "misclassified_b": float(self.misclassified_b),
        }


@dataclasses.dataclass
class ProbeResult:
    """Held-out accuracy of the tiny nonlinear classifier, per set."""
    accuracy_a: float
    accuracy_b: float
    converged: bool = True

    @property
    def misclassified_fraction_a(self) -> float:
        return 1.0 - self.accuracy_a

    @property
    def misclassified_fraction_b(self) -> float:
        return 1.0 - self.accuracy_b


@dataclasses.dataclass
class FiveNumberSummary:
    """min / Q1 / median / Q3 / max of one cohort's log-likelihoods."""
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    count: int


@dataclasses.dataclass
class HistogramSeries:
    """Density-normalized histograms of several cohorts on shared bin edges."""
    edges: List[float]
    densities: Dict[str, List[float]]
    underflow: Dict[str, float]
    counts: Dict[str, int]


@dataclasses.dataclass
class EvalReport:
    """Likelihood evaluation of one model on test, OoD and sampled data."""
    model_tag: str
    test_name: str
    ood_name: str
    mean_test_ll: float
    mean_ood_ll: float
    mean_sample_ll: Optional[float]
    auc: float
    param_count: int
    trimmed_test_ll: float
    trimmed_ood_ll: float
    n_test: int
    n_ood: int
    n_samples: int
    ll_histograms: Optional[HistogramSeries] = None
    fit_quality: Optional[FitQuality] = None
    per_class_ll: Optional[Dict[str, FiveNumberSummary]] = None
    scores: Dict[str, List[float]] = dataclasses.field(default_factory=dict)
    pipeline: str = "baseline"
    components: Optional[str] = None


class DensityModel(abc.ABC):
    """The contract shared by Gaussian, PPCA, MAF and BNAF models."""

    tag: str = "density"
    supports_sampling: bool = True

    @abc.abstractmethod
    def log_prob(self, x: np.ndarray) -> np.ndarray:
        """Natural-log density of each row of ``x``."""

    @abc.abstractmethod
    def param_count(self) -> int:
        """Number of trainable scalars."""

    def sample(self, n: int, seed: int) -> Dataset:
        raise SamplingNotSupportedError(f"{self.tag} models cannot be sampled")

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        """Dimensionality of the modeled data."""
