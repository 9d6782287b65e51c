"""
Test cases for synthetic data generation and toy training
"""
import numpy as np
import pytest

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from app import tensor as T
from app.config import TrainConfig, ViTConfig
from app.datasets import Dataset, PATTERNS, generate_synthetic, load_dataset, save_dataset
from app.errors import ConfigError, DataError, TrainingDiverged
from app.storage import read_csv, save_tensor, write_csv
from app.training import sgd_step, train_toy
from app.vit import run_model


class TestSyntheticData:

    def test_labels_and_counts(self, tiny_config):
        dataset = generate_synthetic(tiny_config, per_class=3, seed=7)
        assert len(dataset) == 12
        assert sorted(set(dataset.labels.tolist())) == [0, 1, 2, 3]
        assert np.bincount(dataset.labels).tolist() == [3, 3, 3, 3]

    def test_ten_classes(self):
        cfg = ViTConfig(image_side=16, patch_side=8, depth=1, heads=1, embed_dim=8, mlp_hidden_dim=8)
        dataset = generate_synthetic(cfg, per_class=2, seed=7)
        assert set(dataset.labels.tolist()) == set(range(10))

    def test_pixels_in_unit_range(self, tiny_config):
        images = generate_synthetic(tiny_config, per_class=2, seed=1).images
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_same_seed_same_data(self, tiny_config):
        a = generate_synthetic(tiny_config, per_class=2, seed=7)
        b = generate_synthetic(tiny_config, per_class=2, seed=7)
        assert a.ids == b.ids
        assert np.array_equal(a.images, b.images)

    def test_too_many_classes(self):
        cfg = ViTConfig(image_side=8, patch_side=4, depth=1, heads=1, embed_dim=4, mlp_hidden_dim=4,
                        num_classes=len(PATTERNS) + 1)
        with pytest.raises(ConfigError):
            generate_synthetic(cfg, per_class=1, seed=0)

    def test_save_and_load(self, tiny_config, tmp_path):
        dataset = generate_synthetic(tiny_config, per_class=2, seed=3)
        save_dataset(tmp_path, dataset, {"source": "synthetic"})
        loaded = load_dataset(tmp_path, tiny_config)
        assert loaded.ids == dataset.ids
        assert np.array_equal(loaded.images, dataset.images)
        assert np.array_equal(loaded.labels, dataset.labels)

    def test_ingest_rejects_out_of_range_label(self, tiny_config, tmp_path):
        save_tensor(tmp_path / "a.vtf", np.zeros((3, 8, 8)))
        write_csv(tmp_path / "labels.csv", ["filename", "label"], [["a.vtf", 9]])
        with pytest.raises(DataError):
            load_dataset(tmp_path, tiny_config)

    def test_ingest_rejects_wrong_shape(self, tiny_config, tmp_path):
        save_tensor(tmp_path / "a.vtf", np.zeros((3, 4, 4)))
        write_csv(tmp_path / "labels.csv", ["filename", "label"], [["a.vtf", 0]])
        with pytest.raises(DataError):
            load_dataset(tmp_path, tiny_config)


class TestTraining:

    def test_zero_learning_rate_leaves_weights(self, tiny_config, tiny_weights):
        dataset = generate_synthetic(tiny_config, per_class=2, seed=0)
        hyper = TrainConfig(epochs=2, batch_size=4, learning_rate=0.0, target_accuracy=1.0)
        result = train_toy(dataset, tiny_config, hyper, seed=0, initial=tiny_weights)
        for name, value in tiny_weights.params.items():
            assert np.array_equal(result.weights.params[name], value)

    def test_memorises_single_sample(self, tiny_config):
        dataset = generate_synthetic(tiny_config, per_class=1, seed=0).subset(1)
        hyper = TrainConfig(epochs=200, batch_size=1, learning_rate=0.05, momentum=0.9, target_accuracy=1.0)
        result = train_toy(dataset, tiny_config, hyper, seed=0)
        assert result.reached_target
        assert result.history[-1].accuracy == 1.0

    def test_loss_decreases(self, tiny_config):
        dataset = generate_synthetic(tiny_config, per_class=4, seed=2)
        hyper = TrainConfig(epochs=15, batch_size=8, learning_rate=0.05, target_accuracy=1.0)
        history = train_toy(dataset, tiny_config, hyper, seed=2).history
        assert history[-1].loss < history[0].loss

    def test_training_log_written(self, tiny_config, tmp_path):
        dataset = generate_synthetic(tiny_config, per_class=1, seed=0)
        hyper = TrainConfig(epochs=2, batch_size=4, target_accuracy=1.0)
        result = train_toy(dataset, tiny_config, hyper, seed=0, log_path=tmp_path / "log.csv")
        rows = read_csv(tmp_path / "log.csv")
        assert [int(row["epoch"]) for row in rows] == [log.epoch for log in result.history]

    def test_same_seed_same_weights(self, tiny_config):
        dataset = generate_synthetic(tiny_config, per_class=2, seed=0)
        hyper = TrainConfig(epochs=2, batch_size=4, target_accuracy=1.0)
        a = train_toy(dataset, tiny_config, hyper, seed=4).weights
        b = train_toy(dataset, tiny_config, hyper, seed=4).weights
        assert all(np.array_equal(a.params[name], b.params[name]) for name in a.params)

    def test_divergence_keeps_last_finite_weights(self, tiny_config, tiny_weights):
        dataset = generate_synthetic(tiny_config, per_class=2, seed=0)
        hyper = TrainConfig(epochs=5, batch_size=8, learning_rate=1e300, target_accuracy=1.0)
        with pytest.raises(TrainingDiverged) as info:
            train_toy(dataset, tiny_config, hyper, seed=0, initial=tiny_weights)
        checkpoint = info.value.checkpoint
        assert checkpoint is not None
        assert all(np.all(np.isfinite(value)) for value in checkpoint.params.values())

    def test_divergence_on_last_batch_of_epoch(self, tiny_config, tiny_weights):
        """One batch per epoch: the blow-up only shows when the epoch is scored"""
        dataset = generate_synthetic(tiny_config, per_class=2, seed=0)
        hyper = TrainConfig(epochs=3, batch_size=64, learning_rate=1e200, target_accuracy=1.0)
        with pytest.raises(TrainingDiverged) as info:
            train_toy(dataset, tiny_config, hyper, seed=0, initial=tiny_weights)
        checkpoint = info.value.checkpoint
        assert all(np.array_equal(checkpoint.params[name], tiny_weights.params[name]) for name in tiny_weights.params)

    def test_non_finite_update_is_divergence(self, tiny_config, tiny_weights):
        dataset = generate_synthetic(tiny_config, per_class=2, seed=0)
        hyper = TrainConfig(epochs=2, batch_size=4, learning_rate=float("inf"), target_accuracy=1.0)
        with pytest.raises(TrainingDiverged, match="non-finite weights"):
            train_toy(dataset, tiny_config, hyper, seed=0, initial=tiny_weights)

    def test_empty_dataset(self, tiny_config):
        empty = Dataset([], np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int))
        with pytest.raises(DataError):
            train_toy(empty, tiny_config, TrainConfig(), seed=0)

    def test_momentum_update_rule(self, tiny_config, tiny_weights):
        """Heavy ball: v = mu v + g, w = w - lr v"""
        images = np.full((1, 3, 8, 8), 0.5)
        hyper = TrainConfig(learning_rate=0.1, momentum=0.5)
        weights = tiny_weights.copy()
        params = weights.tensors(requires_grad=True)
        loss = T.cross_entropy(run_model(params, images, tiny_config)[0], np.array([2]))
        grad = T.gradients(loss, [params["head.bias"]])[0]
        velocity = {name: np.ones_like(value) for name, value in weights.params.items()}
        sgd_step(weights, params, loss, velocity, hyper)
        expected = tiny_weights.params["head.bias"] - 0.1 * (0.5 + grad)
        assert np.allclose(weights.params["head.bias"], expected)
