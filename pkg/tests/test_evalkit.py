"""
Tests for the evalkit module.
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from sklearn.metrics import roc_auc_score

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from density_ood import evalkit, gaussmods
from density_ood.errors import EvaluationError
from density_ood.flowcore import CurvePoint
from density_ood.models import Dataset, DensityModel, EvalReport, FitQuality


def brute_force_auc(test, ood):
    wins = 0.0
    for t in test:
        for o in ood:
            wins += 1.0 if t > o else 0.5 if t == o else 0.0
    return wins / (len(test) * len(ood))


class ConstantModel(DensityModel):
    """Scores every row with the same value and cannot be sampled."""

    tag = "constant"
    supports_sampling = False

    def __init__(self, value, d=2):
        self.value = value
        self.d = d

    @property
    def dim(self):
        return self.d

    def log_prob(self, x):
        return np.full(np.asarray(x).shape[0], self.value)

    def param_count(self):
        return 0


class TestAuc(unittest.TestCase):
    """Tests for the rank AUC."""

    def test_known_values(self):
        self.assertEqual(evalkit.auc([1, 2, 3], [-1, 0]), 1.0)
        self.assertEqual(evalkit.auc([1, 3], [2, 4]), 0.25)
        self.assertEqual(evalkit.auc([5, 5], [5, 5, 5]), 0.5)

    def test_matches_brute_force_with_ties_and_infinities(self):
        rng = np.random.default_rng(0)
        for case in range(100):
            n_test, n_ood = rng.integers(1, 51, size=2)
            test = rng.integers(-3, 4, n_test).astype(float)
            ood = rng.integers(-3, 4, n_ood).astype(float)
            test[rng.random(n_test) < 0.1] = -np.inf
            ood[rng.random(n_ood) < 0.2] = -np.inf
            with self.subTest(case=case):
                self.assertAlmostEqual(evalkit.auc(test, ood), brute_force_auc(test, ood),
                                       places=12)

    def test_matches_sklearn(self):
        rng = np.random.default_rng(1)
        test, ood = rng.normal(1.0, 1.0, 300), rng.normal(0.0, 1.0, 200)
        labels = np.concatenate([np.ones(300), np.zeros(200)])
        self.assertAlmostEqual(evalkit.auc(test, ood),
                               roc_auc_score(labels, np.concatenate([test, ood])), places=12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        test, ood = rng.normal(size=40), rng.normal(size=30)
        self.assertAlmostEqual(evalkit.auc(test, ood),
                               evalkit.auc(np.exp(test) * 3 - 1, np.exp(ood) * 3 - 1))

    def test_complement(self):
        rng = np.random.default_rng(3)
        test, ood = rng.integers(0, 5, 30).astype(float), rng.integers(0, 5, 20).astype(float)
        self.assertAlmostEqual(evalkit.auc(test, ood) + evalkit.auc(ood, test), 1.0)

    def test_nan_rejected(self):
        with self.assertRaises(EvaluationError):
            evalkit.auc([1.0, np.nan], [0.0])
        with self.assertRaises(EvaluationError):
            evalkit.auc([], [0.0])


class TestSummaries(unittest.TestCase):
    """Tests for means, histograms and per-class summaries."""

    def test_means_with_negative_infinity(self):
        scores = np.array([1.0, 3.0, -np.inf])
        self.assertEqual(evalkit.mean_ll(scores), -np.inf)
        self.assertEqual(evalkit.trimmed_mean_ll(scores), 2.0)

    def test_histogram_integrates_to_one(self):
        rng = np.random.default_rng(0)
        series = evalkit.ll_histogram({"a": rng.normal(size=1000),
                                       "b": rng.normal(2.0, 1.0, 500)}, bins=40)
        widths = np.diff(series.edges)
        for name in ("a", "b"):
            self.assertAlmostEqual(float(np.sum(np.asarray(series.densities[name]) * widths)),
                                   1.0, places=9)
        self.assertEqual(len(series.edges), 41)
        self.assertEqual(series.counts, {"a": 1000, "b": 500})

    def test_histogram_underflow(self):
        series = evalkit.ll_histogram({"a": [0.0, 1.0, -np.inf, -np.inf]}, bins=4)
        self.assertEqual(series.underflow["a"], 0.5)
        widths = np.diff(series.edges)
        self.assertAlmostEqual(float(np.sum(np.asarray(series.densities["a"]) * widths)), 1.0)

    def test_histogram_needs_bins(self):
        with self.assertRaises(EvaluationError):
            evalkit.ll_histogram({"a": [1.0]}, bins=0)

    def test_overlap_and_diagnosis(self):
        same = evalkit.ll_histogram({"a": [0.0, 1.0, 2.0], "b": [0.0, 1.0, 2.0]}, bins=3)
        self.assertAlmostEqual(evalkit.overlap_coefficient(same, "a", "b"), 1.0)
        apart = evalkit.ll_histogram({"a": [0.0, 0.1], "b": [10.0, 10.1]}, bins=10)
        self.assertEqual(evalkit.overlap_coefficient(apart, "a", "b"), 0.0)
        self.assertIs(evalkit.fit_diagnosis(0.0), FitQuality.POOR)
        self.assertIs(evalkit.fit_diagnosis(0.3), FitQuality.PARTIAL)
        self.assertIs(evalkit.fit_diagnosis(0.9), FitQuality.GOOD)

    def test_granularity_shift(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=50)
        scores = np.concatenate([base, base + 10.0])
        labels = np.array([0] * 50 + [1] * 50)
        summaries = evalkit.granularity(scores, labels)
        self.assertEqual(set(summaries), {"0", "1"})
        self.assertAlmostEqual(summaries["1"].median - summaries["0"].median, 10.0, places=9)
        self.assertEqual(summaries["0"].count, 50)

    def test_granularity_equal_scores(self):
        summaries = evalkit.granularity([1.0, 1.0, 1.0, 1.0], [3, 3, 7, 7])
        self.assertEqual(summaries["3"], summaries["7"])

    def test_granularity_rejects_bad_classes(self):
        with self.assertRaises(EvaluationError):
            evalkit.granularity([1.0, 2.0], [0, 0])
        with self.assertRaises(EvaluationError):
            evalkit.granularity([1.0, 2.0], [0, 1], classes=[0, 1, 2])

    def test_five_number_summary_with_negative_infinity(self):
        summary = evalkit.five_number_summary(np.array([-np.inf, -np.inf, -np.inf, 1.0, 2.0]))
        self.assertEqual(summary.minimum, -np.inf)
        self.assertEqual(summary.median, -np.inf)
        self.assertEqual(summary.maximum, 2.0)

    def test_feature_distributions(self):
        rng = np.random.default_rng(5)
        data = Dataset(features=np.column_stack([rng.uniform(size=20000),
                                                 np.zeros(20000)]), name="u")
        dist = evalkit.feature_distributions(data, [0, 1])
        self.assertAlmostEqual(dist["0"]["kurtosis"], -1.2, delta=0.05)
        self.assertEqual(dist["1"]["kurtosis"], 0.0)

    def test_curve_peak(self):
        curve = [CurvePoint(0, -5.0, -5.0, -9.0), CurvePoint(1, -3.0, -3.0, -4.0),
                 CurvePoint(2, -2.0, -2.0, -6.0)]
        peak = evalkit.curve_peak(curve)
        self.assertEqual(peak.peak_epoch, 1)
        self.assertEqual(peak.final_epoch, 2)
        self.assertTrue(peak.rises_then_falls)
        with self.assertRaises(EvaluationError):
            evalkit.curve_peak([CurvePoint(0, 0.0, 0.0, None)])


class TestReport(unittest.TestCase):
    """Tests for full reports, table rows and rendering."""

    def setUp(self):
        """Set up test fixtures."""
        rng = np.random.default_rng(6)
        self.model = gaussmods.FullCovGaussian(np.zeros(2), np.eye(2))
        self.test = Dataset(features=rng.standard_normal((200, 2)), name="test")
        self.ood = Dataset(features=rng.standard_normal((150, 2)) * 3.0, name="ood",
                           labels=np.arange(150) % 3)
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        """Tear down test fixtures."""
        self.tmp.cleanup()

    def test_same_data_gives_half(self):
        result = evalkit.report(self.model, self.test, self.test, n_samples=0)
        self.assertEqual(result.auc, 0.5)
        self.assertIsNone(result.mean_sample_ll)
        self.assertIsNone(result.fit_quality)

    def test_report_fields(self):
        result = evalkit.report(self.model, self.test, self.ood, n_samples=500, seed=1)
        self.assertGreater(result.auc, 0.7)
        self.assertGreater(result.mean_test_ll, result.mean_ood_ll)
        self.assertEqual(result.n_samples, 500)
        self.assertEqual(result.param_count, 5)
        self.assertIs(result.fit_quality, FitQuality.GOOD)
        self.assertEqual(set(result.per_class_ll), {"0", "1", "2"})
        self.assertEqual(set(result.scores), {"test", "ood", "samples"})

    def test_unsampleable_model(self):
        result = evalkit.report(ConstantModel(-4.0), self.test, self.ood, n_samples=100)
        self.assertIsNone(result.mean_sample_ll)
        self.assertEqual(result.n_samples, 0)
        self.assertIn("N/A", evalkit.to_table_row(result))

    def test_negative_infinity_scores(self):
        result = evalkit.report(ConstantModel(-np.inf), self.test, self.ood, n_samples=0)
        self.assertEqual(result.mean_test_ll, -np.inf)
        self.assertEqual(result.auc, 0.5)
        self.assertTrue(np.isnan(result.trimmed_test_ll))

    def test_table_row(self):
        result = EvalReport(
            model_tag="maf5", test_name="t", ood_name="o", mean_test_ll=613.34,
            mean_ood_ll=-199300.0, mean_sample_ll=None, auc=0.9183, param_count=1190612,
            trimmed_test_ll=613.34, trimmed_ood_ll=-199300.0, n_test=1, n_ood=1,
            n_samples=0,
        )
        self.assertEqual(evalkit.to_table_row(result),
                         "| maf5 | 613.3 | -199.3k | N/A | 0.918 | 1.2M |")
        self.assertEqual(evalkit.format_ll(-np.inf), "-inf")
        self.assertEqual(evalkit.format_count(5101), "5.1k")

    def test_render_svgs(self):
        result = evalkit.report(self.model, self.test, self.ood, n_samples=200)
        out = Path(self.tmp.name)
        evalkit.render_histograms(result.ll_histograms, out / "hist.svg", title="demo")
        evalkit.render_boxplot(result.per_class_ll, out / "box.svg")
        evalkit.render_curve([CurvePoint(0, -3.0, -3.0, -5.0), CurvePoint(1, -2.0, -2.5, None)],
                             out / "curve.svg")
        for name in ("hist.svg", "box.svg", "curve.svg"):
            self.assertIn("<svg", (out / name).read_text())


if __name__ == "__main__":
    unittest.main()
