"""
Orthonormal re-basing of datasets.

The basis is the set of right-singular vectors of the mean-centered training
matrix. Re-basing rotates data into it without rescaling, so distances and
densities are preserved; truncation keeps the leading components.
"""

import dataclasses
import logging

import numpy as np
import scipy.linalg

from density_ood.errors import BasisError
from density_ood.models import Dataset, Preprocessing

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class OrthonormalBasis:
    """Training mean, orthonormal rows v and descending singular values."""
    mean: np.ndarray
    v: np.ndarray
    singular_values: np.ndarray
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def explained_variance_ratio(self) -> np.ndarray:
        energy = self.singular_values ** 2
        total = energy.sum()
        if total == 0.0:
            return np.zeros_like(energy)
        return energy / total


def _fix_signs(v: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each row is positive.
    pivots = np.argmax(np.abs(v), axis=1)
    signs = np.sign(v[np.arange(v.shape[0]), pivots])
    signs[signs == 0] = 1.0
    return v * signs[:, None]


def fit_basis(train: Dataset) -> OrthonormalBasis:
    """Fit the orthonormal basis of mean-centered training features.

    Uses the d x d covariance eigendecomposition when N >= d and a direct SVD
    otherwise, all in float64.
    """
    x = np.asarray(train.features, dtype=np.float64)
    n, d = x.shape
    if n < d:
        logger.warning("Fitting a %d-dim basis on only %d rows; trailing "
                       "directions are arbitrary", d, n)
    mean = x.mean(axis=0)
    centered = x - mean

    if n >= d:
        gram = centered.T @ centered
        eigvals, eigvecs = scipy.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1]
        singular_values = np.sqrt(np.clip(eigvals[order], 0.0, None))
        v = eigvecs[:, order].T
    else:
        _, s, vt = scipy.linalg.svd(centered, full_matrices=True)
        singular_values = np.zeros(d)
        singular_values[: s.shape[0]] = s
        v = vt

    # Same cut-off as a rank test on the Gram matrix eigenvalues.
    tol = max(n, d) * np.finfo(np.float64).eps * singular_values.max() ** 2
    degenerate = bool(np.any(singular_values ** 2 <= tol))
    if degenerate:
        logger.warning("Basis for '%s' is rank deficient", train.name)
    return OrthonormalBasis(
        mean=mean,
        v=_fix_signs(v),
        singular_values=singular_values,
        degenerate=degenerate,
    )


def _check_dim(data: Dataset, basis: OrthonormalBasis) -> None:
    if data.d != basis.dim:
        raise BasisError(
            f"dataset '{data.name}' has {data.d} features but the basis has "
            f"dimension {basis.dim}"
        )


def rebasis(data: Dataset, basis: OrthonormalBasis) -> Dataset:
    """Map each row x to (x - mean) @ v.T."""
    _check_dim(data, basis)
    coeffs = (np.asarray(data.features, dtype=np.float64) - basis.mean) @ basis.v.T
    return data.with_features(coeffs, Preprocessing.REBASED)


def truncate(data: Dataset, basis: OrthonormalBasis, k: int) -> Dataset:
    """Keep the first ``k`` basis coefficients of ``data``.

    Data already tagged as rebased or truncated is treated as coefficients,
    so truncating twice is the same as truncating once.
    """
    if data.preprocessing in (Preprocessing.REBASED, Preprocessing.PCA_TRUNCATED):
        coeffs = np.asarray(data.features)
        if not 1 <= k <= coeffs.shape[1]:
            raise BasisError(f"k={k} outside [1, {coeffs.shape[1]}]")
    else:
        if not 1 <= k <= basis.dim:
            raise BasisError(f"k={k} outside [1, {basis.dim}]")
        coeffs = rebasis(data, basis).features
    return data.with_features(coeffs[:, :k], Preprocessing.PCA_TRUNCATED)


def inverse(coeffs: Dataset, basis: OrthonormalBasis) -> Dataset:
    """Reconstruct pixel-space rows from k <= d leading coefficients."""
    k = coeffs.d
    if k > basis.dim:
        raise BasisError(
            f"{k} coefficients exceed the basis rank {basis.dim}"
        )
    x = np.asarray(coeffs.features, dtype=np.float64) @ basis.v[:k] + basis.mean
    return coeffs.with_features(x, None)


def reconstruction_error(data: Dataset, basis: OrthonormalBasis, k: int) -> np.ndarray:
    """Squared reconstruction error per row after keeping ``k`` components."""
    restored = inverse(truncate(data, basis, k), basis).features
    return np.sum((np.asarray(data.features, dtype=np.float64) - restored) ** 2, axis=1)
