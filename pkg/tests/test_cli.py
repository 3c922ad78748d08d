"""
Tests for the CLI module.
"""

import io
import json
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from density_ood import cli, dataman, storage
from density_ood.cli import StageTracker, main
from density_ood.config import config_from_dict
from density_ood.errors import PipelineError


def write_images(path, rng, n, low, high):
    dataman.write_idx(path, rng.integers(low, high + 1, size=(n, 4, 4), dtype=np.uint8))


class TestCLI(unittest.TestCase):
    """Tests for the CLI module."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        rng = np.random.default_rng(0)
        write_images(self.dir / "train-images", rng, 300, 0, 100)
        write_images(self.dir / "test-images", rng, 60, 0, 100)
        write_images(self.dir / "ood-images", rng, 60, 150, 255)
        dataman.write_idx(self.dir / "ood-labels", (np.arange(60) % 3).astype(np.uint8))

        self.stdout = io.StringIO()
        self.patches = [patch("sys.stdout", self.stdout)]
        for p in self.patches:
            p.start()

    def tearDown(self):
        """Tear down test fixtures."""
        for p in self.patches:
            p.stop()
        self.tmp.cleanup()

    def write_config(self, name="demo", **overrides):
        document = {
            "name": name,
            "train": {"paths": [str(self.dir / "train-images")], "name": "train"},
            "test": {"paths": [str(self.dir / "test-images")], "name": "test"},
            "ood": {"paths": [str(self.dir / "ood-images")],
                    "labels_paths": [str(self.dir / "ood-labels")], "name": "ood"},
            "output_dir": str(self.dir / "runs"),
            "n_samples": 100,
            "histogram_bins": 20,
        }
        document.update(overrides)
        path = self.dir / f"{name}.json"
        path.write_text(json.dumps(document))
        return path

    def test_no_command(self):
        self.assertEqual(main([]), 1)

    def test_presets(self):
        self.assertEqual(main(["presets"]), 0)
        output = self.stdout.getvalue()
        self.assertIn("fashion-raw-normal", output)
        self.assertIn("(full scale)", output)

    def test_fit_gaussian_run(self):
        self.assertEqual(main(["fit", "--config", str(self.write_config())]), 0)

        run = self.dir / "runs" / "demo"
        for name in ("config.json", "model.bin", "report.json", "report_row.txt",
                     "manifest.json"):
            self.assertTrue((run / name).exists(), name)
        self.assertFalse((run / "curve.csv").exists())
        self.assertIn("| gaussian |", self.stdout.getvalue())

        report = storage.load_report(run / "report.json")
        self.assertEqual(report.auc, 1.0)
        self.assertEqual(report.n_samples, 100)
        self.assertEqual(set(report.per_class_ll), {"0", "1", "2"})
        manifest = json.loads((run / "manifest.json").read_text())
        self.assertIn("model.bin", manifest["artifacts"])

    def test_reports_are_reproducible(self):
        first = self.write_config(output_dir=str(self.dir / "one"))
        self.assertEqual(main(["fit", "--config", str(first)]), 0)
        second = self.write_config(output_dir=str(self.dir / "two"))
        self.assertEqual(main(["fit", "--config", str(second)]), 0)
        self.assertEqual((self.dir / "one" / "demo" / "report.json").read_bytes(),
                         (self.dir / "two" / "demo" / "report.json").read_bytes())

    def test_missing_dataset(self):
        path = self.write_config(train={"paths": [str(self.dir / "nope")]})
        self.assertEqual(main(["fit", "--config", str(path)]), 1)
        self.assertIn("Error: load:", self.stdout.getvalue())

    def test_ppca_on_truncated_components(self):
        path = self.write_config(
            name="ppca",
            model={"family": "ppca"},
            pipeline={"kind": "pca_truncate", "components": 8},
        )
        self.assertEqual(main(["fit", "--config", str(path)]), 0)
        run = self.dir / "runs" / "ppca"
        self.assertTrue((run / "basis.bin").exists())
        report = storage.load_report(run / "report.json")
        self.assertEqual(report.components, "8/16")
        self.assertEqual(report.pipeline, "pca_truncate")
        self.assertEqual(report.param_count, 8 * 4 + 8 + 1)

    def test_maf_run_with_curve(self):
        path = self.write_config(
            name="maf",
            normalization="dequantized",
            model={"family": "maf", "architecture": "maf5", "n_flows": 2,
                   "hidden_sizes": [8]},
            training={"max_epochs": 2, "batch_size": 64, "monitor_ood": True},
            render_svg=True,
        )
        self.assertEqual(main(["fit", "--config", str(path)]), 0)
        run = self.dir / "runs" / "maf"
        curve = storage.read_curve_csv(run / "curve.csv")
        self.assertEqual([row["epoch"] for row in curve][0], 0)
        self.assertTrue(all(row["ood_ll"] is not None for row in curve))
        for name in ("histograms.svg", "per_class.svg", "curve.svg"):
            self.assertTrue((run / name).exists(), name)

    def test_ood_is_read_after_fitting(self):
        config = config_from_dict(json.loads(self.write_config().read_text()))
        events = []
        real_load, real_fit = cli.load_config_dataset, cli.fit_model

        def load(dataset_config):
            events.append(dataset_config.name)
            return real_load(dataset_config)

        def fit(*args, **kwargs):
            events.append("fit")
            return real_fit(*args, **kwargs)

        with patch("density_ood.cli.load_config_dataset", side_effect=load), \
                patch("density_ood.cli.fit_model", side_effect=fit):
            cli.run_experiment(config, write=False)
        self.assertLess(events.index("fit"), events.index("ood"))

    def test_stage_tracker(self):
        tracker = StageTracker()
        with self.assertRaises(PipelineError) as ctx:
            tracker.check_ood_read()
        self.assertEqual(ctx.exception.stage, "ordering")
        tracker.done("fit")
        tracker.check_ood_read()
        StageTracker(allow_early_ood=True).check_ood_read()

    def test_eval_stored_run(self):
        main(["fit", "--config", str(self.write_config())])
        output = self.dir / "rescored.json"
        self.assertEqual(main(["eval", str(self.dir / "runs" / "demo"),
                               "--output", str(output)]), 0)
        rescored = storage.load_report(output)
        original = storage.load_report(self.dir / "runs" / "demo" / "report.json")
        self.assertEqual(rescored.mean_test_ll, original.mean_test_ll)
        self.assertEqual(rescored.n_samples, 0)

    def test_rebasis(self):
        output = self.dir / "basis.bin"
        self.assertEqual(main(["rebasis", "--config", str(self.write_config()),
                               "--output", str(output), "--dims", "3"]), 0)
        self.assertEqual(storage.load_basis(output).dim, 16)
        self.assertIn("Basis of dimension 16", self.stdout.getvalue())

    def test_separability(self):
        output = self.dir / "sep.json"
        self.assertEqual(main(["separability", "--config", str(self.write_config()),
                               "--method", "lp", "--output", str(output)]), 0)
        self.assertIn("Status: separable (lp)", self.stdout.getvalue())
        self.assertEqual(json.loads(output.read_text())["certificate"]["status"], "separable")

    def test_tables(self):
        main(["fit", "--config", str(self.write_config())])
        self.assertEqual(main(["tables", "demo", "fashion-raw-normal",
                               "--runs-dir", str(self.dir / "runs")]), 0)
        output = self.stdout.getvalue()
        self.assertIn("| demo | ", output)
        self.assertIn("| fashion-raw-normal | missing |", output)
        self.assertIn("Missing reports: fashion-raw-normal", output)

    def test_tables_without_names(self):
        document, missing = cli.regenerate_tables([], str(self.dir))
        self.assertEqual(document, "")
        self.assertEqual(missing, [])


if __name__ == "__main__":
    unittest.main()
