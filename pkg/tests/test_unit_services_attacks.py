import unittest

import numpy as np

from src.entity.models import build_model, loss_and_gradient
from src.entity.params import ParamVector
from src.entity.updates import ClientUpdate
from src.repository.datasets import synth_blobs
from src.schemas.experiment import ExperimentConfig, OptimizerSpec, TrainingSpec
from src.services.aggregators import fedavg
from src.services.attacks import AttackPlan, explicit_boost_update, flip_labels, stealthy_altmin_train
from src.services.errors import AttackError
from src.services.federation import local_train


class TestLabelFlip(unittest.TestCase):

    def test_flip_counts_and_labels(self):
        shard = synth_blobs(num_classes=3, per_class=4, dim=2, spread=0.1, seed=0)
        flipped = flip_labels(shard, 0, 2)
        self.assertEqual(flipped, 4)
        self.assertTrue(np.all(np.argmax(shard.labels[shard.targets == 0], axis=1) == 2))
        self.assertEqual(shard.targets.tolist().count(0), 4)

    def test_no_source_samples(self):
        shard = synth_blobs(num_classes=3, per_class=4, dim=2, spread=0.1, seed=0).subset(np.arange(4, 12))
        self.assertEqual(flip_labels(shard, 0, 2), 0)


class TestExplicitBoost(unittest.TestCase):

    def test_boost_cancels_fedavg_dilution(self):
        layout = ParamVector.from_arrays({"w": np.zeros(3)}).layout
        malicious_delta = np.array([0.3, -0.6, 0.9])
        n, k = 10, 2
        updates = []
        for i in range(n):
            values = malicious_delta if i < k else np.zeros(3)
            update = ClientUpdate(i, ParamVector(values, layout), 5, i < k)
            updates.append(explicit_boost_update(update, n / k) if i < k else update)
        np.testing.assert_allclose(fedavg(updates).values, malicious_delta, atol=1e-12)
        self.assertTrue(updates[0].malicious)

    def test_non_positive_boost(self):
        layout = ParamVector.from_arrays({"w": np.zeros(1)}).layout
        with self.assertRaises(AttackError):
            explicit_boost_update(ClientUpdate(0, ParamVector(np.ones(1), layout), 1), 0.0)


class TestStealthyAltMin(unittest.TestCase):

    def setUp(self):
        self.data = synth_blobs(num_classes=3, per_class=10, dim=4, spread=0.5, seed=6)
        self.model = build_model((4,), 3, arch="mlp", seed=2)

    def altmin_without_stealth(self, shard, cfg, boost, **common):
        return stealthy_altmin_train(
            self.model,
            shard,
            cfg,
            self.model.params.zeros_like(),
            source_class=0,
            boost=boost,
            rho=0.0,
            benign_weight=0.0,
            schedule=(1, 1),
            **common,
        )

    def test_reduces_to_plain_training_on_flipped_shard(self):
        shard = self.data.copy()
        flip_labels(shard, 0, 1)
        cfg = TrainingSpec(local_epochs=2, batch_size=4, optimizer=OptimizerSpec(kind="adam", learning_rate=0.01))
        common = dict(seed=5, client_id=1, round_id=3)
        attacked = self.altmin_without_stealth(shard, cfg, 1.0, **common)
        plain = local_train(self.model, shard, cfg, **common)
        np.testing.assert_allclose(attacked.delta.values, plain.delta.values, rtol=0, atol=1e-9)
        self.assertTrue(attacked.malicious)

    def test_boost_weights_only_flipped_rows(self):
        shard = self.data.copy()
        flip_labels(shard, 0, 1)
        cfg = TrainingSpec(local_epochs=1, batch_size=len(shard), optimizer=OptimizerSpec(kind="sgd", learning_rate=0.1))
        attacked = self.altmin_without_stealth(shard, cfg, 3.0)
        weights = np.where(shard.targets == 0, 3.0, 1.0)
        _, grad, _ = loss_and_gradient(self.model, shard.samples, shard.labels, training=True, weights=weights)
        np.testing.assert_allclose(attacked.delta.values, -0.1 * grad.values, rtol=0, atol=1e-12)

    def test_strong_penalty_pins_update_to_estimate(self):
        shard = self.data.copy()
        flip_labels(shard, 0, 1)
        cfg = TrainingSpec(local_epochs=1, batch_size=8, optimizer=OptimizerSpec(kind="sgd", learning_rate=5e-7))
        estimate = ParamVector(np.random.default_rng(1).normal(0, 0.01, len(self.model.params)), self.model.layout)
        update = stealthy_altmin_train(
            self.model,
            shard,
            cfg,
            estimate,
            source_class=0,
            rho=1e6,
            schedule=(0, 1),
        )
        np.testing.assert_allclose(update.delta.values, estimate.values, atol=1e-4)

    def test_without_poisoned_samples_trains_benignly(self):
        shard = self.data.subset(self.data.indices_of(2))
        cfg = TrainingSpec(local_epochs=1, batch_size=4)
        update = stealthy_altmin_train(self.model, shard, cfg, self.model.params.zeros_like(), source_class=0)
        expected = local_train(self.model, shard, cfg, malicious=True)
        np.testing.assert_array_equal(update.delta.values, expected.delta.values)


class TestAttackPlan(unittest.TestCase):

    def test_from_config(self):
        cfg = ExperimentConfig.model_validate(
            {"attack": {"kind": "explicit_boost", "source_class": 3, "target_class": 5, "malicious_clients": [4, 1]}}
        )
        plan = AttackPlan.from_config(cfg, [4, 1])
        self.assertEqual(plan.malicious_clients, (1, 4))
        self.assertEqual(plan.boost_factor, 5.0)
        self.assertTrue(plan.active_in(1))

    def test_inactive_attack(self):
        with self.assertRaises(AttackError):
            AttackPlan.from_config(ExperimentConfig(), [0])
