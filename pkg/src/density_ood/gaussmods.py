"""
Classical density baselines: full-covariance Normal and probabilistic PCA.
"""

import logging
from typing import List, Optional

import numpy as np
import scipy.linalg

from density_ood.errors import ModelError, NonFiniteError
from density_ood.models import Dataset, DensityModel

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
SIGMA2_FLOOR = 1e-12
DEFAULT_RIDGE_SCALE = 1e-6


def _as_rows(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(1, -1) if x.ndim == 1 else x
    if rows.ndim != 2 or rows.shape[1] != dim:
        raise ModelError(f"expected {dim}-dimensional input, got shape {x.shape}")
    if not np.all(np.isfinite(rows)):
        raise NonFiniteError("non-finite input to log_prob")
    return rows


class FullCovGaussian(DensityModel):
    """Multivariate Normal with a Cholesky-factored covariance."""

    tag = "gaussian"

    def __init__(self, mu: np.ndarray, cov_factor: np.ndarray):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.cov_factor = np.asarray(cov_factor, dtype=np.float64)
        diag = np.diag(self.cov_factor)
        if np.any(diag <= 0.0):
            raise ModelError("covariance factor must have a positive diagonal")
        self.log_det_cov = 2.0 * float(np.sum(np.log(diag)))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    def param_count(self) -> int:
        d = self.dim
        return d + d * (d + 1) // 2

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        rows = _as_rows(x, self.dim)
        white = scipy.linalg.solve_triangular(
            self.cov_factor, (rows - self.mu).T, lower=True
        )
        maha = np.sum(white ** 2, axis=0)
        return -0.5 * (self.dim * LOG_2PI + self.log_det_cov + maha)

    def sample(self, n: int, seed: int) -> Dataset:
        if n < 1:
            raise ModelError(f"sample size must be positive, got {n}")
        z = np.random.default_rng(seed).standard_normal((n, self.dim))
        return Dataset(features=self.mu + z @ self.cov_factor.T,
                       name=f"{self.tag}-samples")


def fit_gaussian(train: Dataset, ridge: Optional[float] = None) -> FullCovGaussian:
    """Maximum-likelihood Normal (denominator N) plus ``ridge * I``.

    With ``ridge=None`` the ridge is 1e-6 times the mean diagonal of the
    sample covariance.
    """
    x = np.asarray(train.features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ModelError("fit_gaussian needs at least two rows")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / x.shape[0]
    if ridge is None:
        ridge = DEFAULT_RIDGE_SCALE * float(np.mean(np.diag(cov)))
    if ridge < 0:
        raise ModelError(f"ridge must be nonnegative, got {ridge}")
    cov[np.diag_indices_from(cov)] += ridge
    try:
        factor = scipy.linalg.cholesky(cov, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise ModelError(
            f"covariance is not positive definite with ridge={ridge:g}; "
            f"use a larger ridge"
        ) from exc
    logger.info("Fitted %d-dim Gaussian on %d rows (ridge %.3g)",
                x.shape[1], x.shape[0], ridge)
    return FullCovGaussian(mu, factor)


def gaussian_log_prob(model: FullCovGaussian, x: np.ndarray):
    """Exact log N(x; mu, Sigma); a float for one vector, an array for rows."""
    out = model.log_prob(x)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def gaussian_sample(model: FullCovGaussian, n: int, seed: int) -> Dataset:
    return model.sample(n, seed)


class PpcaModel(DensityModel):
    """x ~ N(mu, sigma2 I + W W^T) with a k-dimensional latent space."""

    tag = "ppca"

    def __init__(self, mu: np.ndarray, w: np.ndarray, sigma2: float,
                 ll_trace: Optional[List[float]] = None, sigma2_clamped: bool = False):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        if sigma2 <= 0:
            raise ModelError(f"sigma2 must be positive, got {sigma2}")
        self.sigma2 = float(sigma2)
        self.ll_trace = list(ll_trace or [])
        self.sigma2_clamped = sigma2_clamped

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def k(self) -> int:
        return self.w.shape[1]

    def marginal_covariance(self) -> np.ndarray:
        return self.sigma2 * np.eye(self.dim) + self.w @ self.w.T

    def param_count(self) -> int:
        return self.dim * self.k + self.dim + 1

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        # Woodbury identity and determinant lemma; never forms the d x d matrix.
        rows = _as_rows(x, self.dim)
        resid = rows - self.mu
        m = self.sigma2 * np.eye(self.k) + self.w.T @ self.w
        m_chol = scipy.linalg.cho_factor(m, lower=True)
        proj = resid @ self.w
        quad = (np.sum(resid ** 2, axis=1)
                - np.sum(proj * scipy.linalg.cho_solve(m_chol, proj.T).T, axis=1))
        quad /= self.sigma2
        log_det_m = 2.0 * np.sum(np.log(np.diag(m_chol[0])))
        log_det = (self.dim - self.k) * np.log(self.sigma2) + log_det_m
        return -0.5 * (self.dim * LOG_2PI + log_det + quad)

    def sample(self, n: int, seed: int) -> Dataset:
        if n < 1:
            raise ModelError(f"sample size must be positive, got {n}")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.k))
        eps = rng.standard_normal((n, self.dim))
        x = z @ self.w.T + self.mu + np.sqrt(self.sigma2) * eps
        return Dataset(features=x, name=f"{self.tag}-samples")


def _ppca_mean_ll(s: np.ndarray, w: np.ndarray, sigma2: float) -> float:
    """Mean log-likelihood per row given the sample covariance ``s``."""
    d, k = w.shape
    m = sigma2 * np.eye(k) + w.T @ w
    m_inv = scipy.linalg.inv(m)
    # C^-1 = (I - W M^-1 W^T) / sigma2
    trace_cinv_s = (np.trace(s) - np.trace(m_inv @ (w.T @ s @ w))) / sigma2
    log_det = (d - k) * np.log(sigma2) + np.linalg.slogdet(m)[1]
    return -0.5 * (d * LOG_2PI + log_det + trace_cinv_s)


def fit_ppca(train: Dataset, k: int, max_iters: int = 500,
             tol: float = 1e-6) -> PpcaModel:
    """Fit PPCA by EM on the sample covariance.

    Initialized from the leading ``k`` principal directions scaled by their
    standard deviations, with sigma2 the mean discarded variance.
    """
    x = np.asarray(train.features, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k < d:
        raise ModelError(f"PPCA latent dimension k={k} must satisfy 1 <= k < {d}")
    mu = x.mean(axis=0)
    centered = x - mu
    s = centered.T @ centered / n

    eigvals, eigvecs = scipy.linalg.eigh(s)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    w = eigvecs[:, :k] * np.sqrt(eigvals[:k])
    sigma2 = float(eigvals[k:].mean())
    clamped = False
    if sigma2 < SIGMA2_FLOOR:
        sigma2, clamped = SIGMA2_FLOOR, True

    trace = [_ppca_mean_ll(s, w, sigma2)]
    for iteration in range(max_iters):
        m = sigma2 * np.eye(k) + w.T @ w
        m_inv = scipy.linalg.inv(m)
        sw = s @ w
        w_new = sw @ scipy.linalg.inv(sigma2 * np.eye(k) + m_inv @ w.T @ sw)
        sigma2 = float(np.trace(s - sw @ m_inv @ w_new.T) / d)
        w = w_new
        if sigma2 < SIGMA2_FLOOR:
            logger.warning("PPCA noise variance collapsed; clamping to %g", SIGMA2_FLOOR)
            sigma2, clamped = SIGMA2_FLOOR, True

        trace.append(_ppca_mean_ll(s, w, sigma2))
        improvement = (trace[-1] - trace[-2]) / max(abs(trace[-2]), 1e-300)
        logger.debug("PPCA iter=%04d LL=%.8f dLL=%.3e", iteration, trace[-1], improvement)
        if improvement < tol:
            break

    logger.info("Fitted PPCA k=%d on %d x %d data in %d EM iterations",
                k, n, d, len(trace) - 1)
    return PpcaModel(mu, w, sigma2, ll_trace=trace, sigma2_clamped=clamped)


def ppca_log_prob(model: PpcaModel, x: np.ndarray):
    out = model.log_prob(x)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def ppca_sample(model: PpcaModel, n: int, seed: int) -> Dataset:
    return model.sample(n, seed)
