import unittest
from itertools import product

import numpy as np

from src.entity.dataset import Dataset
from src.entity.models import build_model
from src.repository.datasets import synth_blobs
from src.schemas.experiment import BotpaSpec, ModelSpec
from src.services.attacks import flip_labels
from src.services.botpa import (
    AmplifierSet,
    ClassSimilarityMatrix,
    amplifier_indices,
    apply_botpa,
    boost_shards,
    build_surrogate,
    capped_indices,
    class_similarity_matrix,
    craft_soft_label,
    cs_contrib,
    cs_ftrs,
    is_contrib,
    is_ftrs,
    random_intermediate_classes,
    rank_intermediate,
    select_intermediate_classes,
    select_n_sweep,
    train_surrogate,
)
from src.services.errors import BotpaError


class TestSoftLabels(unittest.TestCase):

    def test_grid(self):
        for cs in np.linspace(-1.0, 1.0, 201):
            label = craft_soft_label(float(cs), c_z=2, c_tgt=1, num_classes=4)
            self.assertAlmostEqual(label.probs.sum(), 1.0, delta=1e-9)
            self.assertTrue(np.all(label.probs >= 0))
            self.assertEqual(label.probs[1], max(float(cs), 0.0))
            self.assertEqual(label.probs[0], 0.0)

    def test_non_positive_similarity_keeps_hard_label(self):
        self.assertTrue(craft_soft_label(-0.2, 2, 1, 4).is_hard)
        self.assertEqual(craft_soft_label(0.0, 2, 1, 4).argmax(), 2)

    def test_full_similarity_is_a_flip(self):
        label = craft_soft_label(1.0, 2, 1, 4)
        self.assertTrue(label.is_hard)
        self.assertEqual(label.argmax(), 1)

    def test_invalid(self):
        with self.assertRaises(BotpaError):
            craft_soft_label(0.5, 1, 1, 4)
        with self.assertRaises(BotpaError):
            craft_soft_label(1.5, 2, 1, 4)
        with self.assertRaises(BotpaError):
            craft_soft_label(float("nan"), 2, 1, 4)


class TestSimilarities(unittest.TestCase):

    def setUp(self):
        self.data = synth_blobs(num_classes=4, per_class=5, dim=3, spread=0.7, seed=4)
        flip_labels(self.data, 0, 1)
        self.model = build_model((3,), 4, arch="mlp", seed=3)

    def brute_force(self, c1, c2, pair):
        a, b = self.data.indices_of(c1), self.data.indices_of(c2)
        return float(np.mean([pair(i, j) for i, j in product(a, b)]))

    def test_contrib_matches_pairwise_mean(self):
        d = self.data

        def pair(i, j):
            return is_contrib(self.model, d.samples[i], d.labels[i], d.samples[j], d.labels[j])

        for c2 in (2, 3):
            self.assertAlmostEqual(cs_contrib(self.model, d, 0, c2), self.brute_force(0, c2, pair), places=10)

    def test_ftrs_matches_pairwise_mean(self):
        d = self.data

        def pair(i, j):
            return is_ftrs(self.model, d.samples[i], d.samples[j])

        self.assertAlmostEqual(cs_ftrs(self.model, d, 0, 3), self.brute_force(0, 3, pair), places=10)

    def test_matrix_is_symmetric_with_absent_classes(self):
        data = self.data.subset(np.flatnonzero(self.data.targets != 3))
        matrix = class_similarity_matrix(self.model, data, "ftrs", checkpoint=4)
        self.assertTrue(np.isnan(matrix.scores[3]).all())
        np.testing.assert_allclose(matrix.scores[:3, :3], matrix.scores[:3, :3].T)
        self.assertAlmostEqual(matrix.score(0, 2), cs_ftrs(self.model, data, 0, 2))
        frame = matrix.to_frame()
        self.assertEqual(list(frame.columns), ["kind", "c1", "c2", "score", "checkpoint"])
        self.assertEqual(len(frame), 16)

    def test_cap_is_deterministic(self):
        first = capped_indices(self.data, 2, 3, seed=1)
        self.assertEqual(first.size, 3)
        np.testing.assert_array_equal(first, capped_indices(self.data, 2, 3, seed=1))
        self.assertEqual(capped_indices(self.data, 2, None, seed=1).size, 5)

    def test_missing_source_class(self):
        data = self.data.subset(np.flatnonzero(self.data.targets != 0))
        with self.assertRaises(BotpaError):
            select_intermediate_classes(self.model, data, 0, 1, 1)

    def test_selection_follows_class_permutation(self):
        data = synth_blobs(num_classes=5, per_class=6, dim=3, spread=0.8, seed=9)
        flip_labels(data, 0, 1)
        model = build_model((3,), 5, arch="softmax", seed=5)
        perm = np.array([3, 0, 4, 1, 2])
        labels = np.zeros_like(data.labels)
        labels[:, perm] = data.labels
        permuted_data = Dataset(data.samples, perm[data.targets], labels, 5)
        params = model.params.copy()
        w_slot, b_slot = (slot.name for slot in model.layout)
        params.view(w_slot)[:, perm] = model.params.view(w_slot)
        params.view(b_slot)[perm] = model.params.view(b_slot)
        permuted_model = model.with_params(params)

        chosen = select_intermediate_classes(model, data, 0, 1, 3)
        permuted = select_intermediate_classes(permuted_model, permuted_data, int(perm[0]), int(perm[1]), 3)
        self.assertEqual(permuted, [int(perm[c]) for c in chosen])


class TestIntermediateClasses(unittest.TestCase):

    def matrix(self, row):
        scores = np.full((len(row), len(row)), np.nan)
        scores[0] = row
        return ClassSimilarityMatrix("contrib", scores)

    def test_rank_highest_first_lowest_id_on_ties(self):
        matrix = self.matrix([1.0, 0.9, 0.2, 0.5, 0.5, -0.1])
        self.assertEqual(rank_intermediate(matrix, 0, 1, 3), [3, 4, 2])

    def test_excludes_source_target_and_absent(self):
        matrix = self.matrix([1.0, 0.9, np.nan, 0.1, 0.3])
        self.assertEqual(rank_intermediate(matrix, 0, 1, 2), [4, 3])
        with self.assertRaises(BotpaError):
            rank_intermediate(matrix, 0, 1, 3)

    def test_needs_three_classes(self):
        with self.assertRaises(BotpaError):
            rank_intermediate(self.matrix([1.0, 0.5]), 0, 1, 1)

    def test_random_choice(self):
        classes = random_intermediate_classes(6, 0, 1, 3, seed=2)
        self.assertEqual(len(set(classes)), 3)
        self.assertFalse({0, 1} & set(classes))
        self.assertEqual(classes, random_intermediate_classes(6, 0, 1, 3, seed=2))


class TestRelabel(unittest.TestCase):

    def test_apply_counts(self):
        shards = {
            0: synth_blobs(num_classes=4, per_class=3, dim=2, spread=0.1, seed=0),
            5: synth_blobs(num_classes=4, per_class=2, dim=2, spread=0.1, seed=1),
        }
        crafted = {2: craft_soft_label(0.4, 2, 1, 4), 3: craft_soft_label(-0.3, 3, 1, 4)}
        amplifier = AmplifierSet([2, 3], crafted, amplifier_indices(shards, [2, 3]))
        report = apply_botpa(shards, amplifier)
        self.assertEqual(report.relabeled, {0: 6, 5: 4})
        self.assertEqual(report.total, 10)
        self.assertEqual(report.modified, {0: 3, 5: 2})
        np.testing.assert_allclose(shards[0].labels[shards[0].targets == 2], [[0, 0.4, 0.6, 0]] * 3)
        self.assertEqual(amplifier.sample_indices[5].tolist(), [4, 5, 6, 7])
        self.assertEqual(list(amplifier.to_frame().columns), ["class", "label_0", "label_1", "label_2", "label_3"])


class TestSelectN(unittest.TestCase):

    def test_first_decline(self):
        scores = {1: 5.0, 2: 9.0, 3: 7.0}
        self.assertEqual(select_n_sweep([1, 2, 3], scores.get), 2)

    def test_keeps_growing(self):
        self.assertEqual(select_n_sweep([1, 2, 3], lambda n: float(n)), 3)

    def test_flat_stops(self):
        self.assertEqual(select_n_sweep([1, 2, 3], lambda n: 4.0), 1)

    def test_undefined_stops(self):
        self.assertEqual(select_n_sweep([1, 2], lambda n: None), 1)

    def test_empty(self):
        with self.assertRaises(BotpaError):
            select_n_sweep([], lambda n: 1.0)


class TestSurrogate(unittest.TestCase):

    def setUp(self):
        self.data = synth_blobs(num_classes=4, per_class=10, dim=3, spread=0.3, seed=8)

    def test_identical_architecture(self):
        model = build_surrogate(BotpaSpec().surrogate, ModelSpec(arch="mlp2"), (3,), 4, seed=0)
        self.assertEqual(len(model.layers), 5)
        custom = build_surrogate(ModelSpec(arch="softmax"), ModelSpec(arch="mlp2"), (3,), 4, seed=0)
        self.assertEqual(len(custom.layers), 1)

    def test_checkpoint_epoch(self):
        cfg = BotpaSpec(surrogate_epochs=4, learning_rate=0.01)
        model = build_model((3,), 4, arch="mlp", seed=0)
        result = train_surrogate(self.data, model, cfg, batch_size=8, seed=1)
        self.assertEqual(result.checkpoint_epoch, 2)
        self.assertEqual(result.epochs_run, 4)
        self.assertFalse(np.array_equal(result.checkpoint.params.values, result.converged.params.values))

    def test_early_stop_before_checkpoint(self):
        cfg = BotpaSpec(surrogate_epochs=20, contrib_checkpoint_epoch=15, early_stop_accuracy=0.01)
        result = train_surrogate(self.data, build_model((3,), 4, seed=0), cfg)
        self.assertEqual(result.epochs_run, 1)
        self.assertEqual(result.checkpoint_epoch, 1)
        self.assertIs(result.checkpoint, result.converged)

    def test_no_data(self):
        with self.assertRaises(BotpaError):
            train_surrogate(self.data.subset([]), build_model((3,), 4), BotpaSpec())


class TestBoostShards(unittest.TestCase):

    def test_end_to_end(self):
        base = synth_blobs(num_classes=5, per_class=12, dim=4, spread=0.5, seed=2)
        shards = {1: base.subset(np.arange(0, 60, 2)), 3: base.subset(np.arange(1, 60, 2))}
        for shard in shards.values():
            flip_labels(shard, 0, 1)
        cfg = BotpaSpec(num_intermediate=2, surrogate_epochs=2, per_class_sample_cap=4)
        outcome = boost_shards(shards, cfg, ModelSpec(arch="mlp"), 0, 1, batch_size=16, seed=0)
        classes = outcome.amplifier.classes
        self.assertEqual(len(classes), 2)
        self.assertFalse({0, 1} & set(classes))
        self.assertEqual(outcome.report.total, sum(int(np.isin(s.targets, classes).sum()) for s in shards.values()))
        for shard in shards.values():
            for c in classes:
                rows = shard.labels[shard.targets == c]
                np.testing.assert_array_equal(rows, np.tile(outcome.amplifier.crafted_labels[c].probs, (len(rows), 1)))
            self.assertTrue(np.all(shard.labels[shard.targets == 0, 1] == 1.0))
        self.assertEqual(outcome.contrib.checkpoint, 1)
