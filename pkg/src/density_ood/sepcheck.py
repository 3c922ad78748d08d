"""
Separability checks between a training set A and an OoD set B.

``lp_separate`` certifies strict linear separability with a phase-one LP,
``svm_separate`` looks for a separating plane by subgradient descent when the
LP is too large, and ``ann_probe`` measures how easily a tiny nonlinear
classifier tells the sets apart.
"""

import logging
import warnings

import numpy as np
import scipy.optimize
import scipy.sparse
from sklearn.exceptions import ConvergenceWarning
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from density_ood import linbasis
from density_ood.errors import DatasetError
from density_ood.models import (
    Dataset,
    ProbeResult,
    SeparabilityCertificate,
    SeparabilityStatus,
)

logger = logging.getLogger(__name__)

LP_ZERO_TOLERANCE = 1e-9


def _pair(a: Dataset, b: Dataset):
    if a.d != b.d:
        raise DatasetError(
            f"cannot compare '{a.name}' ({a.d} features) with '{b.name}' ({b.d} features)"
        )
    return (np.asarray(a.features, dtype=np.float64),
            np.asarray(b.features, dtype=np.float64))


def _margins(xa: np.ndarray, xb: np.ndarray, h: np.ndarray, beta: float):
    return xa @ h - beta, xb @ h - beta


def _verified(margins_a: np.ndarray, margins_b: np.ndarray, epsilon: float) -> bool:
    return bool(np.all(margins_a > epsilon) and np.all(margins_b < -epsilon))


def lp_separate(a: Dataset, b: Dataset, epsilon: float) -> SeparabilityCertificate:
    """Find (h, beta) with a.h - beta > eps on A and b.h - beta < -eps on B.

    Solves the phase-one problem that minimizes the total slack needed to meet
    both inequality families at margin 2*eps; zero slack means separable, and
    the plane is then re-checked against every row.
    """
    if epsilon <= 0:
        raise DatasetError(f"epsilon must be positive, got {epsilon}")
    xa, xb = _pair(a, b)
    n_a, n_b, m = xa.shape[0], xb.shape[0], xa.shape[1]
    target = 2.0 * epsilon

    # Variables: h (m), beta, slack_a (n_a), slack_b (n_b).
    rows_a = scipy.sparse.hstack([
        scipy.sparse.csr_matrix(-xa),
        np.ones((n_a, 1)),
        -scipy.sparse.identity(n_a),
        scipy.sparse.csr_matrix((n_a, n_b)),
    ])
    rows_b = scipy.sparse.hstack([
        scipy.sparse.csr_matrix(xb),
        -np.ones((n_b, 1)),
        scipy.sparse.csr_matrix((n_b, n_a)),
        -scipy.sparse.identity(n_b),
    ])
    a_ub = scipy.sparse.vstack([rows_a, rows_b]).tocsc()
    b_ub = np.full(n_a + n_b, -target)
    cost = np.concatenate([np.zeros(m + 1), np.ones(n_a + n_b)])
    bounds = [(None, None)] * (m + 1) + [(0, None)] * (n_a + n_b)

    logger.info("Solving separability LP: %d + %d rows in %d dimensions", n_a, n_b, m)
    result = scipy.optimize.linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds,
                                    method="highs")

    if result.status != 0 or result.x is None:
        logger.warning("Separability LP did not finish: %s", result.message)
        h = np.zeros(m)
        margins_a, margins_b = _margins(xa, xb, h, 0.0)
        return SeparabilityCertificate(h, 0.0, epsilon, SeparabilityStatus.UNKNOWN,
                                       margins_a, margins_b, method="lp")

    h, beta = result.x[:m], float(result.x[m])
    margins_a, margins_b = _margins(xa, xb, h, beta)
    if result.fun <= LP_ZERO_TOLERANCE:
        status = (SeparabilityStatus.SEPARABLE if _verified(margins_a, margins_b, epsilon)
                  else SeparabilityStatus.UNKNOWN)
        if status is SeparabilityStatus.UNKNOWN:
            logger.warning("LP reported zero slack but the plane failed verification")
    else:
        status = SeparabilityStatus.NOT_SEPARABLE_LINEAR

    return SeparabilityCertificate(
        h, beta, epsilon, status, margins_a, margins_b, method="lp",
        misclassified_a=float(np.mean(margins_a <= 0.0)),
        misclassified_b=float(np.mean(margins_b >= 0.0)),
    )


def svm_separate(a: Dataset, b: Dataset, max_iters: int, epsilon: float = 1e-3,
                 regularization: float = 1e-6, decay: float = 0.999) -> SeparabilityCertificate:
    """Class-balanced linear SVM trained by full-batch subgradient descent.

    A plane that classifies every row correctly is rescaled so its smallest
    margin is 2*eps and returned as separable after verification. Otherwise
    the status is unknown and the per-set misclassification rates of the best
    plane seen are attached.
    """
    xa, xb = _pair(a, b)
    x = np.vstack([xa, xb])
    y = np.concatenate([np.ones(xa.shape[0]), -np.ones(xb.shape[0])])
    weights = np.concatenate([np.full(xa.shape[0], 0.5 / xa.shape[0]),
                              np.full(xb.shape[0], 0.5 / xb.shape[0])])
    center = x.mean(axis=0)
    # Unit RMS row norm so the plane and offset share one step size at any scale.
    scale = np.sqrt(max(float(np.mean(np.sum((x - center) ** 2, axis=1))), 1e-300))
    xc = (x - center) / scale

    w = np.zeros(x.shape[1])
    offset = 0.0
    avg_w, avg_offset = np.zeros_like(w), 0.0
    best = (np.inf, w.copy(), offset)
    for t in range(max(max_iters, 1)):
        signed = y * (xc @ w - offset)
        errors = int(np.sum(signed <= 0.0))
        if errors < best[0]:
            best = (errors, w.copy(), offset)
        if errors == 0:
            break
        active = signed < 1.0
        coef = weights[active] * y[active]
        grad_w = regularization * w - coef @ xc[active]
        grad_offset = float(np.sum(coef))
        lr = decay ** t
        w = w - lr * grad_w
        offset = offset - lr * grad_offset
        avg_w += (w - avg_w) / (t + 1)
        avg_offset += (offset - avg_offset) / (t + 1)

    averaged_errors = int(np.sum(y * (xc @ avg_w - avg_offset) <= 0.0))
    if averaged_errors < best[0]:
        best = (averaged_errors, avg_w, avg_offset)
    errors, w, offset = best

    h = w / scale
    beta = offset + float(h @ center)
    margins_a, margins_b = _margins(xa, xb, h, beta)
    if errors == 0:
        smallest = min(float(margins_a.min()), float(-margins_b.max()))
        scale = 2.0 * epsilon / smallest
        h, beta = h * scale, beta * scale
        margins_a, margins_b = _margins(xa, xb, h, beta)
        if _verified(margins_a, margins_b, epsilon):
            logger.info("Linear SVM separated the sets after %d iterations", t + 1)
            return SeparabilityCertificate(h, beta, epsilon, SeparabilityStatus.SEPARABLE,
                                           margins_a, margins_b, method="svm")

    miss_a = float(np.mean(margins_a <= 0.0))
    miss_b = float(np.mean(margins_b >= 0.0))
    logger.info("Linear SVM left %.1f%% / %.1f%% misclassified", 100 * miss_a, 100 * miss_b)
    return SeparabilityCertificate(h, beta, epsilon, SeparabilityStatus.UNKNOWN,
                                   margins_a, margins_b, method="svm",
                                   misclassified_a=miss_a, misclassified_b=miss_b)


def ann_probe(a: Dataset, b: Dataset, pca_components: int, seed: int = 0,
              max_iter: int = 500) -> ProbeResult:
    """Held-out per-set accuracy of a 1-hidden-layer, 3-tanh-unit classifier.

    Both sets are projected onto the leading ``pca_components`` directions of
    their union before an 80/20 stratified split.
    """
    xa, xb = _pair(a, b)
    union = Dataset(features=np.vstack([xa, xb]), name=f"{a.name}+{b.name}")
    basis = linbasis.fit_basis(union)
    coeffs = np.asarray(linbasis.truncate(union, basis, pca_components).features)
    labels = np.concatenate([np.zeros(xa.shape[0], dtype=int),
                             np.ones(xb.shape[0], dtype=int)])

    x_train, x_test, y_train, y_test = train_test_split(
        coeffs, labels, test_size=0.2, stratify=labels, random_state=seed
    )
    classifier = make_pipeline(
        StandardScaler(),
        MLPClassifier(hidden_layer_sizes=(3,), activation="tanh", solver="adam",
                      max_iter=max_iter, random_state=seed),
    )
    converged = True
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        classifier.fit(x_train, y_train)
        if any(issubclass(w.category, ConvergenceWarning) for w in caught):
            converged = False
            logger.warning("Probe classifier hit max_iter=%d before converging", max_iter)

    predicted = classifier.predict(x_test)
    accuracy_a = float(np.mean(predicted[y_test == 0] == 0))
    accuracy_b = float(np.mean(predicted[y_test == 1] == 1))
    logger.info("Probe accuracy on %d components: %.3f / %.3f",
                pca_components, accuracy_a, accuracy_b)
    return ProbeResult(accuracy_a=accuracy_a, accuracy_b=accuracy_b, converged=converged)
