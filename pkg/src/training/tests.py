import copy
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from core.seeding import numpy_rng, torch_generator
from core.testing import build_corpus, small_config, write_manifest_rows, write_png
from datasets.services import TRAIN, ImageLoader, load_manifest, sample_indices
from erosion.services import ErosionOp, build_erosion_set, sample_erosion_ops
from metrics.networks import IDENTITY_MODE, PerceptualExtractor, PhiConfig
from metrics.services import LossWeights, init_phi, total_loss
from repairer.networks import RepairerConfig, RepairerModel
from repairer.services import init_model, repair_batch, update_latent_mean
from .checkpoints import FORMAT_VERSION, encode_checkpoint, read_checkpoint
from .services import (
    ADAPTIVE_MOMENTS,
    SGD,
    TRAIN_STATE_FILE,
    OptimizerState,
    TrainConfig,
    TrainTrace,
    batch_losses,
    checkpoint_io,
    gradient_step,
    load_phi,
    load_repairer,
    save_phi,
    save_repairer,
    train_repairer,
    write_trace,
)


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.model = init_model(small_config(), torch_generator(0, "init"))
        with torch.no_grad():
            self.model.latent_mean.copy_(torch.tensor([0.5, -0.25, 1.0, 0.0]))
        self.path = save_repairer(self.model, self.root / "repairer.ckpt", {"variant": "sr", "seed": 0})

    def tearDown(self):
        self.tmp.cleanup()

    def test_reload_reproduces_outputs(self):
        loaded = load_repairer(self.path)
        images = np.random.default_rng(0).random((2, 8, 8, 1))
        np.testing.assert_array_equal(repair_batch(loaded, images), repair_batch(self.model, images))
        self.assertTrue(torch.equal(loaded.latent_mean, self.model.latent_mean))
        self.assertEqual(loaded.config, self.model.config)

    def test_saving_twice_gives_identical_bytes(self):
        again = save_repairer(self.model, self.root / "again.ckpt", {"variant": "sr", "seed": 0})
        self.assertEqual(again.read_bytes(), self.path.read_bytes())

    def test_phi_checkpoint(self):
        phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0).freeze()
        loaded = load_phi(save_phi(phi, self.root / "phi.ckpt"))
        self.assertEqual(loaded.config, phi.config)
        for a, b in zip(loaded.parameters(), phi.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_truncated_file(self):
        payload = self.path.read_bytes()
        self.path.write_bytes(payload[:-7])
        with self.assertRaises(ValidationError) as ctx:
            load_repairer(self.path)
        self.assertEqual(ctx.exception.code, "truncated_checkpoint")

    def test_version_mismatch(self):
        payload = bytearray(self.path.read_bytes())
        payload[4:8] = (FORMAT_VERSION + 1).to_bytes(4, "little")
        self.path.write_bytes(bytes(payload))
        with self.assertRaises(ValidationError) as ctx:
            load_repairer(self.path)
        self.assertEqual(ctx.exception.code, "version_mismatch")
        self.assertIn("does not match supported version 1", ctx.exception.messages[0])

    def test_missing_file(self):
        with self.assertRaises(ValidationError) as ctx:
            load_repairer(self.root / "absent.ckpt")
        self.assertEqual(ctx.exception.code, "missing_checkpoint")
        self.assertIn("missing checkpoint", ctx.exception.messages[0])

    def test_wrong_kind(self):
        with self.assertRaises(ValidationError) as ctx:
            load_phi(self.path)
        self.assertEqual(ctx.exception.code, "invalid_checkpoint")

    def test_shape_disagreeing_with_config(self):
        _, config, tensors = read_checkpoint(self.path)
        config["repairer"]["latent_dim"] = 5
        self.path.write_bytes(encode_checkpoint("repairer", config, tensors))
        with self.assertRaises(ValidationError) as ctx:
            load_repairer(self.path)
        self.assertEqual(ctx.exception.code, "shape_mismatch")

    def test_checkpoint_io_dispatches_on_kind(self):
        phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0).freeze()
        self.assertIsNone(checkpoint_io(phi, self.root / "io_phi.ckpt", "save"))
        self.assertIsInstance(checkpoint_io(None, self.root / "io_phi.ckpt", "load"), PerceptualExtractor)
        self.assertIsInstance(checkpoint_io(None, self.path, "load"), RepairerModel)
        with self.assertRaises(ValidationError) as ctx:
            checkpoint_io(self.model, self.path, "append")
        self.assertEqual(ctx.exception.code, "invalid_checkpoint")


class GradientStepTests(SimpleTestCase):
    def setUp(self):
        self.weights = OrderedDict(w=torch.tensor([1.0, 2.0], requires_grad=True))
        self.grads = {"w": torch.tensor([4.0, -8.0])}

    def test_sgd_uses_batch_mean(self):
        gradient_step(self.weights, self.grads, eta=0.5, batch_size=4)
        np.testing.assert_allclose(self.weights["w"].detach().numpy(), [0.5, 3.0])

    def test_adaptive_moments_matches_adam_on_mean_gradient(self):
        reference = torch.tensor([1.0, 2.0], requires_grad=True)
        adam = torch.optim.Adam([reference], lr=0.1)
        state = OptimizerState(ADAPTIVE_MOMENTS, self.weights)
        for _ in range(3):
            gradient_step(self.weights, self.grads, eta=0.1, batch_size=4, state=state)
            reference.grad = self.grads["w"] / 4
            adam.step()
        np.testing.assert_allclose(self.weights["w"].detach().numpy(), reference.detach().numpy(), rtol=1e-6)

    def test_non_finite_gradient(self):
        with self.assertRaises(ValidationError) as ctx:
            gradient_step(self.weights, {"w": torch.tensor([np.nan, 0.0])}, eta=0.1, batch_size=1)
        self.assertEqual(ctx.exception.code, "non_finite_gradient")

    def test_gradient_names_must_match(self):
        with self.assertRaises(ValidationError) as ctx:
            gradient_step(self.weights, {"v": torch.zeros(2)}, eta=0.1, batch_size=1)
        self.assertEqual(ctx.exception.code, "shape_mismatch")

    def test_optimizer_state_survives_tensor_form(self):
        state = OptimizerState(ADAPTIVE_MOMENTS, self.weights)
        gradient_step(self.weights, self.grads, eta=0.1, batch_size=2, state=state)
        copy = OrderedDict(w=self.weights["w"].detach().clone().requires_grad_(True))
        restored = OptimizerState(ADAPTIVE_MOMENTS, copy)
        restored.restore(state.tensors())
        gradient_step(self.weights, self.grads, eta=0.1, batch_size=2, state=state)
        gradient_step(copy, self.grads, eta=0.1, batch_size=2, state=restored)
        self.assertTrue(torch.equal(copy["w"], self.weights["w"]))

    def test_invalid_train_config(self):
        with self.assertRaises(ValidationError) as ctx:
            TrainConfig(optimizer="momentum")
        self.assertEqual(ctx.exception.code, "invalid_train_config")


class BatchLossTests(SimpleTestCase):
    """The batch loss of a training step is the sum of per-sample total losses."""

    def setUp(self):
        self.model = init_model(small_config(), torch_generator(0, "init"), dtype=torch.float64)
        with torch.no_grad():
            self.model.latent_mean.copy_(torch.tensor([0.2, -0.1, 0.4, 0.0], dtype=torch.float64))
        config = PhiConfig((8, 8), 1, widths=(3, 4), tap_layers=(1, 2))
        self.phi = init_phi(config, seed=0, dtype=torch.float64).freeze()
        self.weights = LossWeights(1.0, 0.8)
        self.images = np.random.default_rng(5).random((2, 8, 8, 1))
        self.ops = [ErosionOp.downsample(2), ErosionOp.blackout(4, 4, 2, 2)]

    def gradients(self, loss):
        self.model.zero_grad(set_to_none=True)
        loss.backward()
        return {name: param.grad.detach().clone() for name, param in self.model.named_parameters()}

    def test_values_and_gradients_match_total_loss(self):
        batch = batch_losses(self.model, self.phi, self.images, self.ops, self.weights)
        singles = [
            total_loss(image, self.model, op, self.phi, self.weights) for image, op in zip(self.images, self.ops)
        ]
        np.testing.assert_allclose(
            batch.detach().numpy(), [float(value) for value in singles], rtol=1e-10, atol=1e-12
        )
        batch_grads = self.gradients(batch.sum())
        single_grads = self.gradients(singles[0] + singles[1])
        for name, grad in batch_grads.items():
            np.testing.assert_allclose(grad.numpy(), single_grads[name].numpy(), rtol=1e-9, atol=1e-12, err_msg=name)


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
class OverfitTests(SimpleTestCase):
    """A tiny repairer must drive the loss down on four fixed images."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        root = Path(cls.tmp.name)
        rows = []
        for position, bright_rows in enumerate((2, 3, 5, 6)):
            image = np.full((8, 8, 1), 0.1)
            image[:bright_rows] = 0.9
            write_png(root / f"{position}.png", image)
            rows.append([f"{position}.png", "train"])
        cls.manifest = load_manifest(write_manifest_rows(root / "manifest.csv", rows))
        cls.phi = init_phi(PhiConfig((8, 8), 1, mode=IDENTITY_MODE), seed=0).freeze()
        cls.config = RepairerConfig((8, 8), 1, 8, (4, 8), (8, 4))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def overfit(self, variant):
        model = init_model(self.config, torch_generator(0, "init"))
        cfg = TrainConfig(n_iter=2000, batch_size=4, learning_rate=3e-3, seed=0, log_every=500, checkpoint_every=500)
        _, trace = train_repairer(
            model, self.manifest, build_erosion_set(variant, (8, 8)), self.phi, LossWeights(1.0, 0.0), cfg
        )
        self.assertEqual(trace.iterations, 2000)
        self.assertLess(np.mean(trace.losses[-50:]), 0.5 * trace.losses[0], variant)

    def test_rec(self):
        self.overfit("rec")

    def test_sr(self):
        self.overfit("sr")

    def test_inpaint(self):
        self.overfit("inpaint")


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
class TrainingRunTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.manifest = load_manifest(build_corpus(self.root / "data", size=8))
        self.loader = ImageLoader(self.manifest, (8, 8))
        self.phi = init_phi(PhiConfig((8, 8), 1, mode=IDENTITY_MODE), seed=0).freeze()
        self.erosion_set = build_erosion_set("sr", (8, 8))

    def tearDown(self):
        self.tmp.cleanup()

    def run_training(self, n_iter, state_dir, learning_rate=1e-3):
        model = init_model(small_config(), torch_generator(0, "init"))
        cfg = TrainConfig(n_iter=n_iter, batch_size=4, learning_rate=learning_rate, seed=0, checkpoint_every=3)
        return train_repairer(
            model, self.manifest, self.erosion_set, self.phi, LossWeights(), cfg, self.loader, state_dir
        )

    def test_resumed_run_matches_uninterrupted_run(self):
        self.run_training(3, self.root / "resumed")
        resumed, resumed_trace = self.run_training(6, self.root / "resumed")
        straight, straight_trace = self.run_training(6, self.root / "straight")
        self.assertEqual(resumed_trace.losses, straight_trace.losses)
        for name, tensor in straight.state_dict().items():
            self.assertTrue(torch.equal(resumed.state_dict()[name], tensor), name)

    def test_state_from_other_configuration_is_ignored(self):
        self.run_training(3, self.root / "run")
        _, trace = self.run_training(4, self.root / "run", learning_rate=2e-3)
        self.assertEqual(trace.iterations, 4)

    def test_state_beyond_budget(self):
        self.run_training(6, self.root / "run")
        self.assertTrue((self.root / "run" / TRAIN_STATE_FILE).is_file())
        with self.assertRaises(ValidationError) as ctx:
            self.run_training(3, self.root / "run")
        self.assertEqual(ctx.exception.code, "invalid_train_config")

    def test_batch_larger_than_train_split(self):
        model = init_model(small_config(), torch_generator(0, "init"))
        with self.assertRaises(ValidationError) as ctx:
            train_repairer(model, self.manifest, self.erosion_set, self.phi, LossWeights(),
                           TrainConfig(n_iter=1, batch_size=100), self.loader)
        self.assertEqual(ctx.exception.code, "batch_too_large")

    def test_latent_mean_is_set_after_training(self):
        model, _ = self.run_training(2, None)
        self.assertGreater(float(model.latent_mean.abs().sum()), 0.0)

    def test_sgd_training_runs(self):
        model = init_model(small_config(), torch_generator(0, "init"))
        cfg = TrainConfig(n_iter=3, batch_size=4, learning_rate=0.1, optimizer=SGD)
        _, trace = train_repairer(model, self.manifest, self.erosion_set, self.phi, LossWeights(), cfg, self.loader)
        self.assertEqual(trace.iterations, 3)
        self.assertTrue(all(np.isfinite(trace.losses)))

    def test_trace_file(self):
        path = write_trace(self.root / "trace.csv", TrainTrace([0.5, 0.25]))
        self.assertEqual(path.read_text(), "iteration,mean_loss\n1,0.5\n2,0.25\n")

    def test_zero_iterations_only_set_the_latent_mean(self):
        fresh = init_model(small_config(), torch_generator(0, "init"))
        model, trace = self.run_training(0, None)
        self.assertEqual(trace.losses, [])
        for name, parameter in fresh.named_parameters():
            self.assertTrue(torch.equal(model.get_parameter(name), parameter), name)
        self.assertGreater(float(model.latent_mean.abs().sum()), 0.0)

    def test_full_mixing_leaves_encoder_untouched(self):
        model = init_model(small_config(mix_alpha=1.0), torch_generator(0, "init"))
        before = {name: parameter.detach().clone() for name, parameter in model.named_parameters()}
        cfg = TrainConfig(n_iter=2, batch_size=4, learning_rate=1e-2, seed=0)
        model, trace = train_repairer(
            model, self.manifest, self.erosion_set, self.phi, LossWeights(), cfg, self.loader
        )
        self.assertEqual(trace.iterations, 2)
        self.assertTrue(all(np.isfinite(trace.losses)))
        for name, parameter in model.named_parameters():
            changed = not torch.equal(parameter, before[name])
            self.assertEqual(changed, name.startswith("decoder"), name)

    def test_first_loss_is_mean_total_loss_of_first_batch(self):
        model = init_model(small_config(), torch_generator(0, "init"))
        reference = update_latent_mean(copy.deepcopy(model), self.manifest, self.loader)
        images = self.loader.images(sample_indices(self.manifest, TRAIN, 4, numpy_rng(0, "batch", 1)))
        ops = sample_erosion_ops(self.erosion_set, 4, numpy_rng(0, "erosion", 1))
        with torch.no_grad():
            expected = np.mean([
                float(total_loss(image, reference, op, self.phi, LossWeights())) for image, op in zip(images, ops)
            ])
        cfg = TrainConfig(n_iter=1, batch_size=4, learning_rate=1e-3, seed=0)
        _, trace = train_repairer(model, self.manifest, self.erosion_set, self.phi, LossWeights(), cfg, self.loader)
        self.assertAlmostEqual(trace.losses[0], expected, places=5)
