import unittest

import numpy as np

from src.entity.labels import one_hot
from src.entity.models import (
    build_model,
    cross_entropy_loss,
    forward,
    logits_features,
    loss_and_gradient,
    per_sample_gradients,
    per_sample_loss_gradient,
    softmax,
)
from src.entity.params import ParamVector
from src.repository.datasets import synth_blobs
from src.schemas.experiment import OptimizerSpec
from src.services.errors import LabelError, ShapeMismatchError
from src.services.training import make_optimizer, train

STEP = 1e-5

ARCHITECTURES = {
    "dense": ((6,), [{"type": "dense", "units": 5}, {"type": "relu"}]),
    "batchnorm": ((6,), [{"type": "dense", "units": 5}, {"type": "batchnorm"}, {"type": "relu"}]),
    "conv": (
        (1, 5, 5),
        [
            {"type": "conv2d", "filters": 2, "kernel": 3, "padding": "same"},
            {"type": "batchnorm"},
            {"type": "relu"},
            {"type": "maxpool", "size": 2},
            {"type": "flatten"},
        ],
    ),
    "conv_valid": ((2, 4, 4), [{"type": "conv2d", "filters": 3, "kernel": 2}, {"type": "relu"}]),
}


def numeric_gradient(model, x, labels, training):
    mask = model.params.trainable_mask()
    base = model.params.values
    grad = np.zeros_like(base)
    for i in np.flatnonzero(mask):
        plus, minus = base.copy(), base.copy()
        plus[i] += STEP
        minus[i] -= STEP
        up = loss_and_gradient(model.with_params(ParamVector(plus, model.layout)), x, labels, training)[0]
        down = loss_and_gradient(model.with_params(ParamVector(minus, model.layout)), x, labels, training)[0]
        grad[i] = (up - down) / (2 * STEP)
    return grad


class TestGradients(unittest.TestCase):

    def check(self, name, training):
        input_shape, layers = ARCHITECTURES[name]
        for seed in range(5):
            rng = np.random.default_rng(seed)
            model = build_model(input_shape, 3, layers=layers, seed=seed)
            x = rng.normal(size=(4,) + input_shape)
            labels = rng.dirichlet(np.ones(3), size=4)
            _, grad, _ = loss_and_gradient(model, x, labels, training=training)
            numeric = numeric_gradient(model, x, labels, training)
            scale = max(np.linalg.norm(grad.values) + np.linalg.norm(numeric), 1e-12)
            self.assertLess(np.linalg.norm(grad.values - numeric) / scale, 1e-4, f"{name} seed {seed}")

    def test_dense(self):
        self.check("dense", training=False)

    def test_batchnorm_training_mode(self):
        self.check("batchnorm", training=True)

    def test_batchnorm_inference_mode(self):
        self.check("batchnorm", training=False)

    def test_conv_pool(self):
        self.check("conv", training=True)

    def test_conv_valid(self):
        self.check("conv_valid", training=False)

    def test_running_statistics_are_not_trainable(self):
        model = build_model((6,), 3, layers=ARCHITECTURES["batchnorm"][1])
        _, grad, fp = loss_and_gradient(model, np.ones((2, 6)), one_hot([0, 1], 3), training=True)
        frozen = ~model.params.trainable_mask()
        self.assertTrue(frozen.any())
        self.assertTrue(np.all(grad.values[frozen] == 0))
        self.assertIn("1.running_mean", fp.state)


class TestForward(unittest.TestCase):

    def test_softmax_is_stable(self):
        probs = softmax(np.array([[1000.0, 0.0, -1000.0]]))
        self.assertTrue(np.all(np.isfinite(probs)))
        self.assertAlmostEqual(probs.sum(), 1.0)

    def test_cross_entropy_with_zero_probability_is_finite(self):
        loss = cross_entropy_loss(np.array([[1.0, 0.0]]), one_hot([1], 2))
        self.assertTrue(np.isfinite(loss))
        self.assertAlmostEqual(loss, -np.log(1e-12))

    def test_label_count_mismatch(self):
        with self.assertRaises(LabelError):
            cross_entropy_loss(np.full((2, 2), 0.5), one_hot([1], 2))

    def test_flat_samples_are_reshaped(self):
        model = build_model((1, 4, 4), 2, arch="simple")
        logits, probs = forward(model, np.zeros((3, 16)))
        self.assertEqual(logits.shape, (3, 2))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_dense_preset_on_image_input(self):
        model = build_model((1, 4, 4), 2, arch="mlp2")
        self.assertEqual(model.layers[0].kind, "flatten")
        logits, _ = forward(model, np.zeros((3, 1, 4, 4)))
        self.assertEqual(logits.shape, (3, 2))

    def test_wrong_input_shape(self):
        model = build_model((6,), 3)
        with self.assertRaises(ShapeMismatchError):
            forward(model, np.zeros((2, 5)))

    def test_unknown_preset(self):
        with self.assertRaises(ShapeMismatchError):
            build_model((6,), 3, arch="resnet")

    def test_logits_features_single_and_batch(self):
        model = build_model((6,), 3, arch="softmax", seed=1)
        x = np.arange(12.0).reshape(2, 6)
        batch = logits_features(model, x)
        self.assertEqual(batch.shape, (2, 3))
        np.testing.assert_allclose(logits_features(model, x[0]), batch[0])

    def test_per_sample_gradients_average_to_batch_gradient(self):
        rng = np.random.default_rng(5)
        model = build_model((6,), 3, seed=2)
        x = rng.normal(size=(5, 6))
        labels = one_hot(rng.integers(0, 3, 5), 3)
        rows = per_sample_gradients(model, x, labels)
        _, grad, _ = loss_and_gradient(model, x, labels, training=False)
        np.testing.assert_allclose(rows.mean(axis=0), grad.values[model.params.trainable_mask()], atol=1e-12)
        single = per_sample_loss_gradient(model, x[0], labels[0])
        np.testing.assert_allclose(single.values, rows[0], atol=1e-15)

    def test_same_seed_same_weights(self):
        a = build_model((6,), 3, arch="mlp2", seed=9)
        b = build_model((6,), 3, arch="mlp2", seed=9)
        np.testing.assert_array_equal(a.params.values, b.params.values)


class TestOracles(unittest.TestCase):

    def weights(self, model):
        return [model.params.view(slot.name) for slot in model.layout]

    def test_two_layer_forward_matches_matrix_oracle(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            model = build_model((6,), 3, arch="mlp", seed=seed)
            w1, b1, w2, b2 = self.weights(model)
            x = rng.normal(size=(4, 6))
            expected = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
            exp = np.exp(expected - expected.max(axis=1, keepdims=True))
            logits, probs = forward(model, x)
            np.testing.assert_allclose(logits, expected, rtol=0, atol=1e-10)
            np.testing.assert_allclose(probs, exp / exp.sum(axis=1, keepdims=True), rtol=0, atol=1e-10)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_linear_features_are_affine(self):
        model = build_model((5,), 4, arch="softmax", seed=3)
        w, b = self.weights(model)
        x = np.random.default_rng(3).normal(size=(7, 5))
        np.testing.assert_allclose(logits_features(model, x), x @ w + b, rtol=0, atol=1e-12)
        np.testing.assert_allclose(logits_features(model, x[2]), w.T @ x[2] + b, rtol=0, atol=1e-12)

    def test_duplicated_batch_gives_same_gradient(self):
        rng = np.random.default_rng(8)
        model = build_model((6,), 3, arch="mlp", seed=8)
        x = rng.normal(size=(5, 6))
        labels = rng.dirichlet(np.ones(3), size=5)
        _, single, _ = loss_and_gradient(model, x, labels, training=False)
        _, doubled, _ = loss_and_gradient(model, np.vstack([x, x]), np.vstack([labels, labels]), training=False)
        np.testing.assert_allclose(doubled.values, single.values, rtol=0, atol=1e-12)

    def test_saturated_logits_have_vanishing_gradient(self):
        model = build_model((3,), 3, arch="softmax", seed=0)
        params = model.params.copy()
        params.view(model.layout[0].name)[:] = 0.0
        params.view(model.layout[1].name)[:] = [200.0, 0.0, 0.0]
        saturated = model.with_params(params)
        _, grad, _ = loss_and_gradient(saturated, np.ones((2, 3)), one_hot([0, 0], 3), training=False)
        self.assertLess(np.linalg.norm(grad.values), 1e-6)

    def test_training_is_deterministic(self):
        data = synth_blobs(num_classes=3, per_class=10, dim=6, spread=0.5, seed=4)
        runs = []
        for _ in range(2):
            model = build_model((6,), 3, arch="mlp2", seed=4)
            optimizer = make_optimizer(OptimizerSpec(kind="adam", learning_rate=0.01))
            runs.append(train(model, data, optimizer, 3, 8, np.random.default_rng(4)).params.values)
        np.testing.assert_array_equal(runs[0], runs[1])
