"""
Likelihood-based evaluation of density models.

Scores are natural-log likelihoods: higher means "more in-distribution". AUC
treats the test set as the positive class, so 1.0 means every test row
outscores every OoD row.
"""

import dataclasses
import logging
import pathlib
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import scipy.stats

from density_ood import storage
from density_ood.errors import EvaluationError, SamplingNotSupportedError
from density_ood.models import (
    Dataset,
    DensityModel,
    EvalReport,
    FiveNumberSummary,
    FitQuality,
    HistogramSeries,
)

logger = logging.getLogger(__name__)

POOR_FIT_OVERLAP = 0.1
GOOD_FIT_OVERLAP = 0.5
SCORE_BATCH = 4096


def _scores(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EvaluationError(f"{what} scores are empty")
    if np.any(np.isnan(arr)):
        raise EvaluationError(f"{what} scores contain NaN")
    return arr


def auc(test_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """Mann-Whitney rank AUC of test scores against OoD scores.

    Ties, including ties among -inf values, count one half.
    """
    test = _scores(test_scores, "test")
    ood = _scores(ood_scores, "OoD")
    ranks = scipy.stats.rankdata(np.concatenate([test, ood]))
    n_test, n_ood = test.size, ood.size
    rank_sum = float(np.sum(ranks[:n_test]))
    return (rank_sum - n_test * (n_test + 1) / 2.0) / (n_test * n_ood)


def mean_ll(scores: np.ndarray) -> float:
    """Mean score; -inf as soon as any score is -inf."""
    return float(np.mean(scores))


def trimmed_mean_ll(scores: np.ndarray) -> float:
    """Mean over the finite scores only (nan when none is finite)."""
    finite = scores[np.isfinite(scores)]
    return float(np.mean(finite)) if finite.size else float("nan")


def ll_histogram(scores: Mapping[str, Sequence[float]], bins: int) -> HistogramSeries:
    """Density histograms of every cohort on shared edges.

    Edges span the finite range of all cohorts. Each cohort's finite scores
    integrate to one; its share of -inf scores is reported as underflow.
    """
    if bins < 1:
        raise EvaluationError(f"need at least one bin, got {bins}")
    cohorts = {name: _scores(values, name) for name, values in scores.items()}
    finite = [c[np.isfinite(c)] for c in cohorts.values()]
    finite = [f for f in finite if f.size]
    if finite:
        low = min(float(f.min()) for f in finite)
        high = max(float(f.max()) for f in finite)
    else:
        low = high = 0.0
    if low == high:
        low, high = low - 0.5, high + 0.5
    edges = np.linspace(low, high, bins + 1)

    densities, underflow, counts = {}, {}, {}
    for name, values in cohorts.items():
        keep = np.clip(values[values > -np.inf], low, high)
        hist, _ = np.histogram(keep, bins=edges)
        total = hist.sum()
        widths = np.diff(edges)
        densities[name] = (hist / (total * widths) if total else np.zeros(bins)).tolist()
        underflow[name] = float(np.mean(values == -np.inf))
        counts[name] = int(values.size)
    return HistogramSeries(edges=edges.tolist(), densities=densities,
                           underflow=underflow, counts=counts)


def overlap_coefficient(series: HistogramSeries, first: str, second: str) -> float:
    """Shared area of two normalized histograms, in [0, 1]."""
    widths = np.diff(np.asarray(series.edges))
    a = np.asarray(series.densities[first])
    b = np.asarray(series.densities[second])
    return float(np.sum(np.minimum(a, b) * widths))


def fit_diagnosis(overlap: float) -> FitQuality:
    """Verdict for the sample-vs-test likelihood overlap."""
    if overlap < POOR_FIT_OVERLAP:
        return FitQuality.POOR
    if overlap > GOOD_FIT_OVERLAP:
        return FitQuality.GOOD
    return FitQuality.PARTIAL


def five_number_summary(scores: np.ndarray) -> FiveNumberSummary:
    with np.errstate(invalid="ignore"):
        q = np.percentile(scores, [0, 25, 50, 75, 100])
    # Interpolating next to -inf yields nan; the quantile is -inf there.
    q = np.where(np.isnan(q), -np.inf, q)
    return FiveNumberSummary(*(float(v) for v in q), count=int(scores.size))


def granularity(scores: Sequence[float], labels: Sequence[int],
                classes: Optional[Sequence[int]] = None) -> Dict[str, FiveNumberSummary]:
    """Per-class five-number summaries of the scores, keyed by class id."""
    values = _scores(scores, "class")
    labels = np.asarray(labels).ravel()
    if labels.shape != values.shape:
        raise EvaluationError(f"{values.size} scores but {labels.size} labels")
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    if len(classes) < 2:
        raise EvaluationError("granularity needs at least two classes")
    summaries = {}
    for cls in classes:
        members = values[labels == cls]
        if members.size == 0:
            raise EvaluationError(f"class {cls} has no rows")
        summaries[str(cls)] = five_number_summary(members)
    return summaries


def score(model: DensityModel, data: Dataset, batch_size: int = SCORE_BATCH) -> np.ndarray:
    """Log-likelihood of every row of ``data``, evaluated in batches."""
    x = np.asarray(data.features, dtype=np.float64)
    return np.concatenate([model.log_prob(x[i:i + batch_size])
                           for i in range(0, x.shape[0], batch_size)])


def report(model: DensityModel, test: Dataset, ood: Dataset, n_samples: int,
           seed: int = 0, bins: int = 100) -> EvalReport:
    """Score test, OoD and (when supported) sampled data, and summarize."""
    test_ll = score(model, test)
    ood_ll = score(model, ood)

    sample_ll = None
    if n_samples > 0 and model.supports_sampling:
        try:
            sample_ll = score(model, model.sample(n_samples, seed))
        except SamplingNotSupportedError:
            sample_ll = None
    elif n_samples > 0:
        logger.info("%s cannot be sampled; Samp column is N/A", model.tag)

    cohorts = {"test": test_ll, "ood": ood_ll}
    if sample_ll is not None:
        cohorts["samples"] = sample_ll
    histograms = ll_histogram(cohorts, bins)
    fit_quality = None
    if sample_ll is not None:
        fit_quality = fit_diagnosis(overlap_coefficient(histograms, "test", "samples"))

    per_class = None
    if ood.labels is not None and len(np.unique(ood.labels)) >= 2:
        per_class = granularity(ood_ll, ood.labels)

    result = EvalReport(
        model_tag=model.tag,
        test_name=test.name,
        ood_name=ood.name,
        mean_test_ll=mean_ll(test_ll),
        mean_ood_ll=mean_ll(ood_ll),
        mean_sample_ll=None if sample_ll is None else mean_ll(sample_ll),
        auc=auc(test_ll, ood_ll),
        param_count=int(model.param_count()),
        trimmed_test_ll=trimmed_mean_ll(test_ll),
        trimmed_ood_ll=trimmed_mean_ll(ood_ll),
        n_test=test.n,
        n_ood=ood.n,
        n_samples=0 if sample_ll is None else int(sample_ll.size),
        ll_histograms=histograms,
        fit_quality=fit_quality,
        per_class_ll=per_class,
        scores={name: values.tolist() for name, values in cohorts.items()},
    )
    logger.info("%s: test %.1f ood %.1f auc %.3f", model.tag,
                result.mean_test_ll, result.mean_ood_ll, result.auc)
    return result


def feature_distributions(data: Dataset, dims: Sequence[int],
                          bins: int = 50) -> Dict[str, Dict[str, object]]:
    """Per-dimension histograms and excess kurtosis of selected features."""
    x = np.asarray(data.features, dtype=np.float64)
    out = {}
    for dim in dims:
        column = x[:, dim]
        hist, edges = np.histogram(column, bins=bins, density=column.std() > 0)
        out[str(dim)] = {
            "edges": edges.tolist(),
            "densities": hist.astype(float).tolist(),
            "kurtosis": float(scipy.stats.kurtosis(column)) if column.std() > 0 else 0.0,
        }
    return out


@dataclasses.dataclass
class CurvePeak:
    """Where OoD likelihood peaked during training."""
    peak_epoch: int
    final_epoch: int
    rises_then_falls: bool


def curve_peak(curve: Sequence) -> CurvePeak:
    """Locate the OoD-LL maximum of a training curve.

    ``rises_then_falls`` holds when the maximum comes strictly before the last
    epoch while validation LL at the end is no lower than at the peak.
    """
    points = [p for p in curve if p.ood_ll is not None]
    if not points:
        raise EvaluationError("training curve has no OoD column")
    peak = max(points, key=lambda p: p.ood_ll)
    last = points[-1]
    return CurvePeak(
        peak_epoch=peak.epoch,
        final_epoch=last.epoch,
        rises_then_falls=peak.epoch < last.epoch and last.val_ll >= peak.val_ll,
    )


def format_ll(value: Optional[float]) -> str:
    if value is None:
        return "N/A"
    if np.isinf(value):
        return "-inf" if value < 0 else "inf"
    if abs(value) >= 1e5:
        return f"{value / 1e3:.1f}k"
    return f"{value:.1f}"


def format_count(count: int) -> str:
    if count >= 1_000_000:
        return f"{count / 1e6:.1f}M"
    if count >= 1_000:
        return f"{count / 1e3:.1f}k"
    return str(count)


def to_table_row(result: EvalReport) -> str:
    """Row in the Test / OoD / Samp / AUC / #Params column order."""
    cells = [
        result.model_tag,
        format_ll(result.mean_test_ll),
        format_ll(result.mean_ood_ll),
        format_ll(result.mean_sample_ll),
        f"{result.auc:.3f}",
        format_count(result.param_count),
    ]
    return "| " + " | ".join(cells) + " |"


def write_report(result: EvalReport, path: Union[str, pathlib.Path]) -> None:
    storage.write_json(path, result)


def render_histograms(series: HistogramSeries, path: Union[str, pathlib.Path],
                      title: str = "") -> None:
    """Step plot of every cohort's LL density, saved as SVG."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, densities in sorted(series.densities.items()):
        ax.stairs(densities, series.edges, label=name)
    ax.set_xlabel("log-likelihood (nats)")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.savefig(str(path), format="svg", metadata={"Date": None})
    plt.close(fig)


def render_boxplot(per_class: Mapping[str, FiveNumberSummary],
                   path: Union[str, pathlib.Path], title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    stats = [
        {"label": name, "whislo": s.minimum, "q1": s.q1, "med": s.median,
         "q3": s.q3, "whishi": s.maximum, "fliers": []}
        for name, s in sorted(per_class.items(), key=lambda kv: kv[0])
    ]
    ax.bxp(stats, showfliers=False)
    ax.set_xlabel("class")
    ax.set_ylabel("log-likelihood (nats)")
    if title:
        ax.set_title(title)
    fig.savefig(str(path), format="svg", metadata={"Date": None})
    plt.close(fig)


def render_curve(curve: Sequence, path: Union[str, pathlib.Path], title: str = "") -> None:
    """Validation and OoD mean LL per epoch."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [p.epoch for p in curve]
    ax.plot(epochs, [p.val_ll for p in curve], label="validation")
    ood: List[Optional[float]] = [p.ood_ll for p in curve]
    if any(v is not None for v in ood):
        ax.plot(epochs, [np.nan if v is None else v for v in ood], label="OoD")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean log-likelihood (nats)")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.savefig(str(path), format="svg", metadata={"Date": None})
    plt.close(fig)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    # fixed element ids keep SVG output byte-stable
    matplotlib.rcParams["svg.hashsalt"] = "density-ood"
    import matplotlib.pyplot as plt
    return plt
