import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from core.seeding import torch_generator
from core.testing import build_corpus, repairer_reference, small_config
from datasets.services import TRAIN, ImageLoader, load_manifest
from .networks import RepairerConfig
from .services import (
    count_parameters,
    decode,
    encode,
    encode_batch,
    init_model,
    mean_latent,
    repair,
    repair_batch,
    style_mix,
    update_latent_mean,
)


class RepairerForwardTests(SimpleTestCase):
    def setUp(self):
        self.model = init_model(small_config(), torch_generator(0, "init"), dtype=torch.float64)
        with torch.no_grad():
            self.model.latent_mean.copy_(torch.linspace(-1.0, 1.0, 4, dtype=torch.float64))
        self.images = np.random.default_rng(1).random((3, 8, 8, 1))

    def test_matches_loop_reference(self):
        latents, repaired = repairer_reference(self.model, self.images)
        np.testing.assert_allclose(encode_batch(self.model, self.images), latents, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(repair_batch(self.model, self.images), repaired, rtol=1e-10, atol=1e-12)

    def test_single_image_helpers(self):
        z = encode(self.model, self.images[0])
        self.assertEqual(z.shape, (4,))
        self.assertEqual(decode(self.model, z).shape, (8, 8, 1))
        np.testing.assert_allclose(repair(self.model, self.images[0]), repair_batch(self.model, self.images)[0])

    def test_outputs_lie_in_unit_interval(self):
        repaired = repair_batch(self.model, self.images)
        self.assertTrue(np.all((repaired >= 0.0) & (repaired <= 1.0)))

    def test_mixing_endpoints(self):
        z = np.array([2.0, -2.0, 0.5, 4.0])
        mean = self.model.latent_mean.numpy()
        np.testing.assert_allclose(style_mix(self.model, z), 0.7 * z + 0.3 * mean)

        keep = init_model(small_config(mix_alpha=0.0), torch_generator(0, "init"), dtype=torch.float64)
        np.testing.assert_array_equal(style_mix(keep, z), z)

        collapse = init_model(small_config(mix_alpha=1.0), torch_generator(0, "init"), dtype=torch.float64)
        with torch.no_grad():
            collapse.latent_mean.copy_(torch.tensor(mean))
        np.testing.assert_array_equal(style_mix(collapse, z), mean)

    def test_initialisation_is_seeded(self):
        again = init_model(small_config(), torch_generator(0, "init"), dtype=torch.float64)
        other = init_model(small_config(), torch_generator(1, "init"), dtype=torch.float64)
        for name, tensor in again.named_parameters():
            np.testing.assert_array_equal(tensor.detach().numpy(), dict(self.model.named_parameters())[name].detach().numpy())
            if name.endswith("bias"):
                self.assertEqual(float(tensor.abs().sum()), 0.0)
        self.assertFalse(torch.equal(other.encoder_fc.weight, again.encoder_fc.weight))

    def test_seed_zero_repair_is_byte_identical(self):
        outputs = [
            repair_batch(init_model(small_config(), torch_generator(0, "init")), self.images) for _ in range(2)
        ]
        self.assertEqual(outputs[0].shape, (3, 8, 8, 1))
        self.assertEqual(outputs[0].tobytes(), outputs[1].tobytes())

    def test_float32_init_matches_float64_draws(self):
        single = init_model(small_config(), torch_generator(0, "init"))
        np.testing.assert_allclose(
            single.encoder_fc.weight.detach().numpy(),
            self.model.encoder_fc.weight.detach().numpy(),
            rtol=1e-6,
        )

    def test_small_config_parameter_count(self):
        self.assertLess(count_parameters(self.model), 5000)

    def test_wrong_shape(self):
        with self.assertRaises(ValidationError) as ctx:
            repair_batch(self.model, np.zeros((1, 16, 16, 1)))
        self.assertEqual(ctx.exception.code, "shape_mismatch")

    def test_non_finite_input(self):
        images = self.images.copy()
        images[0, 0, 0, 0] = np.inf
        with self.assertRaises(ValidationError) as ctx:
            repair_batch(self.model, images)
        self.assertEqual(ctx.exception.messages[0], "non-finite input")

    def test_inconsistent_config(self):
        with self.assertRaises(ValidationError) as ctx:
            RepairerConfig((10, 10), 1, 4, (2, 4), (4, 2))
        self.assertEqual(ctx.exception.code, "inconsistent_config")
        with self.assertRaises(ValidationError):
            RepairerConfig((8, 8), 1, 4, (2, 4), (4,))

    def test_config_survives_dict_form(self):
        config = small_config()
        self.assertEqual(RepairerConfig.from_dict(config.to_dict()), config)


class LatentMeanTests(SimpleTestCase):
    def test_chunked_mean(self):
        chunks = [torch.ones(3, 2), torch.zeros(1, 2), torch.full((4, 2), 2.0)]
        np.testing.assert_allclose(mean_latent(chunks, 2).numpy(), [11 / 8, 11 / 8])

    def test_empty_split(self):
        with self.assertRaises(ValidationError) as ctx:
            mean_latent([], 2)
        self.assertEqual(ctx.exception.code, "empty_split")

    @override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
    def test_update_from_train_split(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = load_manifest(build_corpus(Path(tmp), size=8))
            loader = ImageLoader(manifest, (8, 8))
            model = init_model(small_config(), torch_generator(0, "init"), dtype=torch.float64)
            update_latent_mean(model, manifest, loader, batch_size=5)
            expected = encode_batch(model, loader.split(TRAIN).images).mean(axis=0)
            np.testing.assert_allclose(model.latent_mean.numpy(), expected, rtol=1e-12, atol=1e-12)
