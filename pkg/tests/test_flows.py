"""
Tests for the flows module.
"""

import sys
import unittest
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons

# Add the src directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from density_ood import flowcore, flows
from density_ood.config import ModelFamily, ModelSpec, TrainingConfig
from density_ood.errors import NonFiniteError, SamplingNotSupportedError
from density_ood.flowcore import BatchNormLayer, Tape
from density_ood.models import Dataset


def randomize(model, seed, scale=0.3):
    """Perturb every parameter and batch-norm statistic of ``model``."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.value = p.value + scale * rng.standard_normal(p.value.shape)
    for layer in model.layers:
        if isinstance(layer, BatchNormLayer):
            layer.running_mean = 0.5 * rng.standard_normal(model.d)
            layer.running_var = rng.uniform(0.5, 2.0, model.d)
    return model


def log_abs_det(model, x):
    jac = flowcore.dense_jacobian(lambda v: model.transform(v[None, :])[0][0], x)
    return np.linalg.slogdet(jac)[1]


def grid_integral(model, low, high, step):
    axis = np.arange(low + step / 2, high, step)
    xx, yy = np.meshgrid(axis, axis)
    points = np.column_stack([xx.ravel(), yy.ravel()])
    density = np.concatenate([np.exp(model.log_prob(points[i:i + 8192]))
                              for i in range(0, points.shape[0], 8192)])
    return float(np.sum(density) * step * step)


def moons(n=1000, seed=0):
    x, _ = make_moons(n_samples=n, noise=0.1, random_state=seed)
    return Dataset(features=x, name="moons")


class TestMaf(unittest.TestCase):
    """Tests for masked autoregressive flows."""

    def test_identity_flow_is_standard_normal(self):
        model = flows.MafModel(2, n_flows=5, hidden_sizes=[10], batch_norm=False)
        self.assertAlmostEqual(flows.maf_log_prob(model, np.zeros(2)), -1.837877, places=6)

    def test_identity_flow_samples_base_draws(self):
        model = flows.MafModel(3, n_flows=5, hidden_sizes=[10], batch_norm=False)
        samples = flows.maf_sample(model, 20, seed=8).features
        np.testing.assert_array_equal(samples,
                                      np.random.default_rng(8).standard_normal((20, 3)))

    def test_log_det_matches_dense_jacobian(self):
        rng = np.random.default_rng(0)
        for case in range(20):
            d = int(rng.integers(2, 7))
            model = randomize(flows.MafModel(d, n_flows=3, hidden_sizes=[3 * d],
                                             seed=case), seed=case)
            x = rng.standard_normal(d)
            _, log_det = model.transform(x[None, :])
            with self.subTest(case=case, d=d):
                self.assertAlmostEqual(log_abs_det(model, x), float(log_det[0]), places=6)

    def test_single_flow_is_lower_triangular(self):
        model = randomize(flows.MafModel(4, n_flows=1, hidden_sizes=[12]), seed=2)
        jac = flowcore.dense_jacobian(lambda v: model.transform(v[None, :])[0][0],
                                      np.random.default_rng(2).standard_normal(4))
        self.assertTrue(np.all(np.triu(jac, 1) == 0.0))

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(1)
        for case in range(5):
            d = int(rng.integers(2, 11))
            model = randomize(flows.MafModel(d, n_flows=3, hidden_sizes=[2 * d],
                                             seed=case), seed=10 + case)
            z = rng.standard_normal((8, d))
            forward, _ = model.transform(model.inverse(z))
            with self.subTest(case=case, d=d):
                np.testing.assert_allclose(forward, z, atol=1e-6)

    def test_unbounded_overflow_scores_negative_infinity(self):
        model = flows.MafModel(2, n_flows=1, hidden_sizes=[4], batch_norm=False,
                               bounded_log_scale=False)
        model.layers[0].made.head.bias.value[2:] = -1000.0
        scores = model.log_prob(np.ones((3, 2)))
        self.assertTrue(np.all(scores == -np.inf))

    def test_bounded_log_scale_stays_finite(self):
        model = flows.MafModel(2, n_flows=1, hidden_sizes=[4], batch_norm=False)
        model.layers[0].made.head.bias.value[2:] = -1000.0
        scores = model.log_prob(np.ones((3, 2)))
        self.assertTrue(np.all(np.isfinite(scores)))

    def test_nan_names_the_flow(self):
        model = flows.MafModel(2, n_flows=2, hidden_sizes=[4], batch_norm=False)
        model.layers[2].made.head.bias.value[0] = np.nan
        with self.assertRaises(NonFiniteError) as ctx:
            model.log_prob(np.ones((1, 2)))
        self.assertIn("flow 1", str(ctx.exception))

    def test_param_counts(self):
        small = flows.build_flow(ModelSpec(family=ModelFamily.MAF, architecture="maf5"), 100)
        self.assertEqual(small.param_count(), 152300)
        self.assertEqual(flows.param_count(small), flows.maf_param_count(100, 5, [100]))

        mnist = flows.build_flow(ModelSpec(family=ModelFamily.MAF, architecture="maf5"), 784)
        self.assertEqual(mnist.param_count(), 1190612)
        self.assertEqual(flows.maf_param_count(784, 10, [1024, 1024]), 34620512)
        self.assertEqual(round(flows.maf_param_count(100, 10, [1024, 1024]) / 1e5), 136)

    def test_metadata_round_trip(self):
        model = flows.MafModel(3, n_flows=2, hidden_sizes=[6], seed=4, architecture="maf5")
        rebuilt = flows.flow_from_metadata(model.metadata())
        rebuilt.load_state_dict(model.state_dict())
        x = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_array_equal(rebuilt.log_prob(x), model.log_prob(x))
        self.assertEqual(rebuilt.tag, "maf5")

    def test_calibrate_batch_norm(self):
        model = flows.MafModel(2, n_flows=2, hidden_sizes=[4])
        x = np.random.default_rng(3).standard_normal((500, 2)) * 3.0 + 1.0
        flows.calibrate_batch_norm(model, x)
        norm = model.layers[1]
        # First flow is the identity at initialization.
        np.testing.assert_allclose(norm.running_mean, x.mean(axis=0))
        np.testing.assert_allclose(norm.running_var, x.var(axis=0))

    def test_trained_density_integrates_to_one(self):
        data = moons()
        model = flows.MafModel(2, n_flows=5, hidden_sizes=[32], seed=0)
        config = TrainingConfig(max_epochs=10, patience=10, batch_size=100,
                                learning_rate=5e-3)
        flowcore.train(model, data.take(np.arange(800)), data.take(np.arange(800, 1000)),
                       None, config)
        self.assertAlmostEqual(grid_integral(model, -6.0, 6.0, 0.025), 1.0, delta=0.02)


class TestBnaf(unittest.TestCase):
    """Tests for block neural autoregressive flows."""

    def test_log_det_matches_dense_jacobian(self):
        rng = np.random.default_rng(0)
        for case in range(10):
            d = int(rng.integers(2, 7))
            model = flows.BnafModel(d, n_flows=2, units_per_dim=3, seed=case)
            x = rng.standard_normal(d)
            _, log_det = model.transform(x[None, :])
            with self.subTest(case=case, d=d):
                self.assertAlmostEqual(log_abs_det(model, x), float(log_det[0]), places=6)

    def test_single_flow_is_monotone_and_triangular(self):
        model = flows.BnafModel(3, n_flows=1, units_per_dim=4, seed=1)
        rng = np.random.default_rng(1)
        for _ in range(100):
            x = rng.standard_normal(3)
            i = int(rng.integers(0, 3))
            moved = x.copy()
            moved[i] += float(rng.uniform(0.01, 1.0))
            z, _ = model.transform(np.vstack([x, moved]))
            self.assertGreater(z[1, i], z[0, i])
        jac = flowcore.dense_jacobian(lambda v: model.transform(v[None, :])[0][0],
                                      rng.standard_normal(3))
        self.assertTrue(np.all(np.triu(jac, 1) == 0.0))
        self.assertTrue(np.all(np.diag(jac) > 0.0))

    def test_param_count(self):
        model = flows.build_flow(ModelSpec(family=ModelFamily.BNAF), 100)
        # block weights plus one residual gate per flow
        self.assertEqual(model.param_count(), 742800 + 6)

    def test_sampling_not_supported(self):
        model = flows.BnafModel(2, n_flows=1, units_per_dim=2)
        self.assertFalse(model.supports_sampling)
        with self.assertRaises(SamplingNotSupportedError):
            model.sample(5, seed=0)

    def test_training_step_gradients(self):
        model = flows.BnafModel(2, n_flows=1, units_per_dim=2, seed=3)
        x = np.random.default_rng(3).standard_normal((4, 2))
        params = model.parameters()

        def loss_value():
            return -float(np.mean(model.log_prob(x)))

        tape = Tape()
        loss = -flowcore.reduce_mean(model.log_prob_node(tape, tape.constant(x)))
        grads = flowcore.grad(loss, params)
        position = next(i for i, p in enumerate(params) if p.value.ndim == 2)
        target = params[position]
        index = (0, 0)
        original = target.value[index]
        target.value[index] = original + 1e-6
        high = loss_value()
        target.value[index] = original - 1e-6
        low = loss_value()
        target.value[index] = original
        self.assertAlmostEqual(grads[position][index], (high - low) / 2e-6, places=5)

    def test_trained_density_integrates_to_one(self):
        data = moons(seed=1)
        model = flows.BnafModel(2, n_flows=2, units_per_dim=8, seed=0)
        config = TrainingConfig(max_epochs=10, patience=10, batch_size=100,
                                learning_rate=1e-2)
        flowcore.train(model, data.take(np.arange(800)), data.take(np.arange(800, 1000)),
                       None, config)
        integral = grid_integral(model, -10.0, 10.0, 0.025)
        self.assertAlmostEqual(integral, 1.0, delta=0.02)

    def test_gate_gradient(self):
        model = flows.BnafModel(2, n_flows=1, units_per_dim=2, seed=4)
        x = np.random.default_rng(4).standard_normal((6, 2))
        gate = model.layers[0].gate
        tape = Tape()
        loss = -flowcore.reduce_mean(model.log_prob_node(tape, tape.constant(x)))
        (grad,) = flowcore.grad(loss, [gate])
        gate.value[0] = 1e-6
        high = -float(np.mean(model.log_prob(x)))
        gate.value[0] = -1e-6
        low = -float(np.mean(model.log_prob(x)))
        gate.value[0] = 0.0
        self.assertAlmostEqual(grad[0], (high - low) / 2e-6, places=5)

    def test_image_is_unbounded(self):
        model = flows.BnafModel(2, n_flows=2, units_per_dim=4, seed=2)
        far = np.array([[50.0, 0.0], [-50.0, 0.0], [0.0, 50.0], [0.0, -50.0]])
        z, _ = model.transform(far)
        self.assertTrue(np.all(np.max(np.abs(z), axis=1) > 5.0))


if __name__ == "__main__":
    unittest.main()
