import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from core.seeding import torch_generator
from core.testing import build_corpus, small_config
from datasets.services import load_manifest
from erosion.services import ErosionOp, apply_erosion
from repairer.services import images_to_tensor, init_model
from .networks import IDENTITY_MODE, PhiConfig, unit_normalize
from .services import (
    LossWeights,
    extract_features,
    fit_phi,
    init_phi,
    l2_loss,
    lpips_distance,
    phi_dtype,
    total_loss,
)


def unit_rows(features):
    norms = np.linalg.norm(features, axis=-1, keepdims=True)
    return np.divide(features, norms, out=np.zeros_like(features), where=norms > 0)


class PerceptualDistanceTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.a = self.rng.random((8, 8, 3))
        self.b = self.rng.random((8, 8, 3))

    def test_identity_phi_matches_direct_formula(self):
        phi = init_phi(PhiConfig((8, 8), 3, mode=IDENTITY_MODE), seed=0)
        self.assertEqual(phi_dtype(phi), torch.float64)
        expected = np.mean(np.sum((unit_rows(self.a) - unit_rows(self.b)) ** 2, axis=-1))
        self.assertAlmostEqual(lpips_distance(phi, self.a, self.b), expected, places=12)

    def test_distance_properties(self):
        phi = init_phi(PhiConfig((8, 8), 3), seed=0).freeze()
        self.assertAlmostEqual(lpips_distance(phi, self.a, self.a), 0.0, places=6)
        forward = lpips_distance(phi, self.a, self.b)
        self.assertAlmostEqual(forward, lpips_distance(phi, self.b, self.a), places=6)
        self.assertGreater(forward, 0.0)
        self.assertLessEqual(forward, 4.0)

    def test_features_are_unit_norm_per_position(self):
        phi = init_phi(PhiConfig((8, 8), 3, widths=(4, 6), tap_layers=(1, 2)), seed=0).freeze()
        taps = extract_features(phi, self.a)
        self.assertEqual([tap.shape for tap in taps], [(8, 8, 4), (4, 4, 6)])
        for tap in taps:
            norms = np.linalg.norm(tap, axis=-1)
            self.assertTrue(np.all(np.isclose(norms, 1.0, atol=1e-5) | (norms == 0.0)))

    def test_deepest_is_last_tap_of_full_depth(self):
        phi = init_phi(PhiConfig((8, 8), 3, widths=(4, 6), tap_layers=(1, 2)), seed=0).freeze()
        images = images_to_tensor(self.a, phi_dtype(phi))
        with torch.no_grad():
            self.assertTrue(torch.equal(phi.deepest(images), phi.raw_taps(images)[-1]))

    def test_zero_vectors_stay_zero(self):
        features = torch.zeros(1, 3, 2, 2)
        features[0, :, 0, 0] = torch.tensor([3.0, 0.0, 4.0])
        normalized = unit_normalize(features)
        np.testing.assert_allclose(normalized[0, :, 0, 0].numpy(), [0.6, 0.0, 0.8], rtol=1e-6)
        self.assertEqual(float(normalized[0, :, 1, 1].abs().sum()), 0.0)

    def test_l2_loss(self):
        self.assertAlmostEqual(l2_loss(np.ones((2, 2, 1)), np.zeros((2, 2, 1))), 1.0)
        with self.assertRaises(ValidationError) as ctx:
            l2_loss(np.ones((2, 2, 1)), np.ones((3, 3, 1)))
        self.assertEqual(ctx.exception.code, "shape_mismatch")

    def test_phi_rejects_wrong_resolution(self):
        phi = init_phi(PhiConfig((8, 8), 3), seed=0).freeze()
        with self.assertRaises(ValidationError) as ctx:
            lpips_distance(phi, np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))
        self.assertEqual(ctx.exception.code, "shape_mismatch")

    def test_invalid_weights(self):
        with self.assertRaises(ValidationError) as ctx:
            LossWeights(-1.0, 0.8)
        self.assertEqual(ctx.exception.code, "invalid_weights")
        with self.assertRaises(ValidationError):
            LossWeights(0.0, 0.0)

    def test_bad_tap_layers(self):
        with self.assertRaises(ValidationError) as ctx:
            PhiConfig((8, 8), 1, widths=(4, 8), tap_layers=(3,))
        self.assertEqual(ctx.exception.code, "inconsistent_config")


class TotalLossGradientTests(SimpleTestCase):
    """Analytic gradients of the training loss against central differences."""

    STEP = 1e-5
    TOLERANCE = 1e-4

    def setUp(self):
        torch.manual_seed(0)
        self.model = init_model(small_config(), torch_generator(0, "init"), dtype=torch.float64)
        with torch.no_grad():
            self.model.latent_mean.copy_(torch.tensor([0.2, -0.1, 0.4, 0.0], dtype=torch.float64))
        config = PhiConfig((8, 8), 1, widths=(3, 4), tap_layers=(1, 2))
        self.phi = init_phi(config, seed=0, dtype=torch.float64).freeze()
        self.weights = LossWeights(1.0, 0.8)
        self.x = np.random.default_rng(11).random((8, 8, 1))

    def numeric_gradient(self, loss_fn, parameter):
        grad = torch.zeros_like(parameter)
        flat = parameter.data.view(-1)
        out = grad.view(-1)
        for position in range(flat.numel()):
            original = flat[position].item()
            flat[position] = original + self.STEP
            plus = loss_fn().item()
            flat[position] = original - self.STEP
            minus = loss_fn().item()
            flat[position] = original
            out[position] = (plus - minus) / (2 * self.STEP)
        return grad

    def check(self, op):
        def loss_fn():
            with torch.no_grad():
                return total_loss(self.x, self.model, op, self.phi, self.weights)

        self.model.zero_grad()
        total_loss(self.x, self.model, op, self.phi, self.weights).backward()
        for name, parameter in self.model.named_parameters():
            analytic = parameter.grad.detach().clone()
            numeric = self.numeric_gradient(loss_fn, parameter)
            scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-12)
            error = float((analytic - numeric).abs().max()) / scale
            self.assertLess(error, self.TOLERANCE, f"{op.op_id} {name}: relative error {error:.2e}")

    def test_downsample_gradients(self):
        self.check(ErosionOp.downsample(2))

    def test_blackout_gradients(self):
        self.check(ErosionOp.blackout(4, 4, 2, 2))

    def test_loss_is_weighted_sum(self):
        op = ErosionOp.downsample(2)
        repaired = self.model(images_to_tensor(apply_erosion(op, self.x), torch.float64))
        repaired_image = repaired.detach().permute(0, 2, 3, 1).numpy()[0]
        expected = l2_loss(repaired_image, self.x) + 0.8 * lpips_distance(self.phi, repaired_image, self.x)
        with torch.no_grad():
            value = float(total_loss(self.x, self.model, op, self.phi, self.weights))
        self.assertAlmostEqual(value, expected, places=10)


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
class FitPhiTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        counts = {"train": 64, "val-id": 2, "test-id": 2, "val-ood": 2, "test-ood": 2}
        cls.manifest = load_manifest(build_corpus(Path(cls.tmp.name), size=16, counts=counts))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_reconstruction_loss_halves(self):
        config = PhiConfig((16, 16), 1, n_iter=300, batch_size=16, learning_rate=1e-2)
        phi = fit_phi(self.manifest, config, seed=0)
        trace = phi.fit_trace
        self.assertEqual(len(trace), 300)
        self.assertLessEqual(np.mean(trace[-10:]), 0.5 * trace[0])
        self.assertFalse(any(p.requires_grad for p in phi.parameters()))

    def test_fit_is_reproducible(self):
        config = PhiConfig((16, 16), 1, n_iter=5, batch_size=8)
        first = fit_phi(self.manifest, config, seed=2)
        second = fit_phi(self.manifest, config, seed=2)
        self.assertEqual(first.fit_trace, second.fit_trace)
        for a, b in zip(first.parameters(), second.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_identity_mode_needs_no_fitting(self):
        phi = fit_phi(self.manifest, PhiConfig((16, 16), 1, mode=IDENTITY_MODE), seed=0)
        self.assertEqual(phi.fit_trace, [])
        self.assertEqual(sum(p.numel() for p in phi.parameters()), 0)
