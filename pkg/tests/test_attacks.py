"""
Test cases for the FGSM, PGD and Carlini-Wagner attacks
"""
import numpy as np
import pytest

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from app import attacks, tensor as T
from app.attacks import cw, fgsm, margin, merge_results, pgd, run_attack
from app.config import AttackSpec
from app.errors import DataError, NumericError
from app.models import AttackFamily
from app.vit import input_gradient, predict_logits, run_model


@pytest.fixture(name="labels")
def labels_fixture(tiny_images):
    return np.arange(len(tiny_images)) % 4


class TestFGSM:

    def test_zero_epsilon_is_identity(self, tiny_weights, tiny_images, labels):
        result = fgsm(tiny_weights, tiny_images, labels, epsilon=0.0)
        assert np.array_equal(result.images, tiny_images)
        assert not result.success.any()

    def test_every_pixel_moves_by_epsilon(self, tiny_weights, tiny_images, labels):
        """Interior pixels with a non-zero gradient move by exactly eps"""
        result = fgsm(tiny_weights, tiny_images, labels, epsilon=0.03)
        _, grad = input_gradient(tiny_weights, tiny_images, labels)
        moved = np.abs(result.images - tiny_images)
        assert np.allclose(moved[grad != 0], 0.03)
        assert np.all(result.linf <= 0.03 + 1e-9)

    def test_step_follows_gradient_sign(self, tiny_weights, tiny_images, labels):
        result = fgsm(tiny_weights, tiny_images, labels, epsilon=0.01)
        _, grad = input_gradient(tiny_weights, tiny_images, labels)
        assert np.array_equal(np.sign(result.images - tiny_images), np.sign(grad))

    def test_clipped_to_unit_range(self, tiny_weights, labels, tiny_config):
        images = np.tile(np.array([0.0, 1.0])[:, None, None, None], (3, 3, 8, 8))
        result = fgsm(tiny_weights, images, labels, epsilon=0.5)
        assert result.images.min() >= 0.0 and result.images.max() <= 1.0

    def test_loss_does_not_fall_for_small_step(self, tiny_weights, tiny_images, labels):
        before, _ = input_gradient(tiny_weights, tiny_images, labels)
        result = fgsm(tiny_weights, tiny_images, labels, epsilon=1e-4)
        after, _ = input_gradient(tiny_weights, result.images, labels)
        assert after.sum() >= before.sum()

    def test_rejects_pixels_outside_unit_range(self, tiny_weights, tiny_images, labels):
        with pytest.raises(DataError):
            fgsm(tiny_weights, tiny_images + 2.0, labels, epsilon=0.01)

    def test_rejects_label_count_mismatch(self, tiny_weights, tiny_images, labels):
        with pytest.raises(DataError):
            fgsm(tiny_weights, tiny_images, labels[:-1], epsilon=0.01)


class TestPGD:

    def test_single_step_equals_fgsm(self, tiny_weights, tiny_images, labels):
        """T = 1 with alpha >= eps reduces to FGSM"""
        one_step = pgd(tiny_weights, tiny_images, labels, epsilon=0.02, alpha=0.05, iterations=1)
        reference = fgsm(tiny_weights, tiny_images, labels, epsilon=0.02)
        assert np.array_equal(one_step.images, reference.images)

    def test_stays_in_budget(self, tiny_weights, tiny_images, labels):
        result = pgd(tiny_weights, tiny_images, labels, epsilon=0.01, alpha=0.004, iterations=10)
        assert np.all(np.abs(result.images - tiny_images) <= 0.01 + 1e-9)
        assert result.images.min() >= 0.0 and result.images.max() <= 1.0
        assert result.iterations == 10

    def test_zero_epsilon_is_identity(self, tiny_weights, tiny_images, labels):
        result = pgd(tiny_weights, tiny_images, labels, epsilon=0.0, alpha=0.01, iterations=3)
        assert np.array_equal(result.images, tiny_images)


class TestCarliniWagner:

    def test_margin_floor(self):
        """Q = max(z_y - max other, -kappa)"""
        logits = T.Tensor([[5.0, 1.0, 0.0], [0.0, 4.0, 1.0]])
        values = margin(logits, np.array([0, 2]), kappa=2.0).numpy()
        assert values.tolist() == [4.0, -2.0]

    def test_zero_c_converges_to_no_distortion(self, tiny_weights, tiny_images, labels):
        result = cw(tiny_weights, tiny_images[:2], labels[:2], c=0.0, steps=100)
        assert np.all(result.l2 < 1e-3)

    def test_output_in_unit_range(self, tiny_weights, tiny_images, labels):
        result = cw(tiny_weights, tiny_images[:2], labels[:2], c=10.0, steps=5, lr=0.1)
        assert result.images.min() >= 0.0 and result.images.max() <= 1.0

    def test_reports_steps_run(self, tiny_weights, tiny_images, labels):
        result = cw(tiny_weights, tiny_images[:2], labels[:2], c=1.0, steps=4)
        assert result.iterations == 4

    def test_early_stop_reports_last_finite_step(self, tiny_weights, tiny_images, labels, monkeypatch):
        """The model overflows at step 3, so only steps 0 to 2 count"""
        calls = []

        def overflow_on_fourth_call(*args, **kwargs):
            calls.append(1)
            if len(calls) == 4:
                raise NumericError("Non-finite values in activations after block 0")
            return run_model(*args, **kwargs)

        monkeypatch.setattr(attacks, "run_model", overflow_on_fourth_call)
        result = cw(tiny_weights, tiny_images[:2], labels[:2], c=1.0, steps=10)
        assert result.iterations == 2
        assert result.images.min() >= 0.0 and result.images.max() <= 1.0

    def test_success_is_measured_against_clean_prediction(self, tiny_weights, tiny_images, labels):
        result = cw(tiny_weights, tiny_images[:3], labels[:3], c=10.0, steps=5, lr=0.1)
        clean = predict_logits(tiny_weights, tiny_images[:3]).argmax(axis=1)
        assert np.array_equal(result.success, result.predictions != clean)


class TestDispatch:

    def test_run_attack_routes_by_family(self, tiny_weights, tiny_images, labels):
        spec = AttackSpec(family=AttackFamily.FGSM, epsilon=0.02)
        direct = fgsm(tiny_weights, tiny_images, labels, 0.02)
        assert np.array_equal(run_attack(tiny_weights, spec, tiny_images, labels).images, direct.images)

    def test_merge_preserves_order(self, tiny_weights, tiny_images, labels):
        whole = fgsm(tiny_weights, tiny_images, labels, 0.02)
        parts = [fgsm(tiny_weights, tiny_images[s:s + 2], labels[s:s + 2], 0.02) for s in (0, 2, 4)]
        merged = merge_results(parts)
        assert np.allclose(merged.images, whole.images)
        assert np.array_equal(merged.success, whole.success)

    def test_tags(self):
        assert AttackSpec(family=AttackFamily.FGSM, epsilon=0.031).tag == "fgsm_eps0.031"
        assert AttackSpec(family=AttackFamily.CW, c=1e-4).tag == "cw_c0.0001"
