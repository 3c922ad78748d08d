"""
Tests for the config module.
"""

import json
import sys
import tempfile
import unittest
from pathlib import Path

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from density_ood import config as cfg
from density_ood.errors import ConfigError
from density_ood.models import NormalizationMode


def minimal():
    return {
        "name": "demo",
        "train": {"paths": ["train-images"]},
        "test": {"paths": ["test-images"]},
        "ood": {"paths": ["ood-images"]},
    }


class TestConfig(unittest.TestCase):
    """Tests for building, validating and loading run configurations."""

    def test_defaults(self):
        config = cfg.config_from_dict(minimal())
        self.assertIs(config.normalization, NormalizationMode.QUANTIZED)
        self.assertIs(config.pipeline.kind, cfg.PipelineKind.BASELINE)
        self.assertIs(config.model.family, cfg.ModelFamily.GAUSSIAN)
        self.assertEqual(config.training.batch_size, 128)
        self.assertFalse(config.training.monitor_ood)

    def test_round_trip(self):
        document = minimal()
        document["model"] = {"family": "maf", "architecture": "maf5", "hidden_sizes": [8]}
        document["pipeline"] = {"kind": "pca_truncate", "components": 3}
        config = cfg.config_from_dict(document)
        again = cfg.config_from_dict(json.loads(json.dumps(cfg.config_to_dict(config))))
        self.assertEqual(again, config)

    def test_unknown_field(self):
        document = minimal()
        document["training"] = {"learning_rte": 0.1}
        with self.assertRaises(ConfigError) as ctx:
            cfg.config_from_dict(document)
        self.assertIn("learning_rte", str(ctx.exception))
        self.assertIn("config.training", str(ctx.exception))

    def test_bad_enum(self):
        document = minimal()
        document["model"] = {"family": "glow"}
        with self.assertRaises(ConfigError):
            cfg.config_from_dict(document)

    def test_truncation_needs_components(self):
        document = minimal()
        document["pipeline"] = {"kind": "pca_truncate"}
        with self.assertRaises(ConfigError):
            cfg.config_from_dict(document)

    def test_missing_required_field(self):
        document = minimal()
        del document["ood"]
        with self.assertRaises(ConfigError):
            cfg.config_from_dict(document)

    def test_load_config(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.json"
            path.write_text(json.dumps(minimal()))
            self.assertEqual(cfg.load_config(path).name, "demo")
            (Path(tmp) / "bad.json").write_text("{")
            with self.assertRaises(ConfigError):
                cfg.load_config(Path(tmp) / "bad.json")
            with self.assertRaises(ConfigError):
                cfg.load_config(Path(tmp) / "missing.json")

    def test_every_preset_builds(self):
        for name in cfg.PRESET_NAMES:
            with self.subTest(preset=name):
                config = cfg.preset(name, data_root="/data")
                self.assertEqual(config.name, name)
                self.assertTrue(config.train.paths[0].startswith("/data/"))

    def test_preset_details(self):
        self.assertTrue(cfg.preset("fashion-raw-maf10").full_scale)
        self.assertTrue(cfg.preset("cifar-raw-maf5").training.monitor_ood)
        self.assertEqual(cfg.preset("fashion-raw-maf5-10k").train_subset, 10000)
        pca_preset = cfg.preset("cifar-pca-ppca")
        self.assertEqual(pca_preset.pipeline.components, 2500)
        self.assertEqual(pca_preset.ood.format, "svhn")
        with self.assertRaises(ConfigError):
            cfg.preset("no-such-preset")


if __name__ == "__main__":
    unittest.main()
