import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from core.seeding import numpy_rng
from core.testing import bicubic_reference
from .services import (
    BLACKOUT,
    DOWNSAMPLE,
    ErosionOp,
    ErosionSet,
    apply_erosion,
    apply_erosion_batch,
    apply_erosions,
    bicubic_resize,
    build_erosion_set,
    centered_blackout,
    mask_offsets,
    sample_erosion_index,
    sample_erosion_ops,
)


class ErosionGoldenTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)
        self.image = self.rng.random((32, 32, 1))

    def test_identity_returns_equal_copy(self):
        eroded = apply_erosion(ErosionOp.identity(), self.image)
        np.testing.assert_array_equal(eroded, self.image)
        self.assertIsNot(eroded, self.image)

    def test_centered_blackout_zeroes_rows_and_cols_8_to_24(self):
        op = ErosionOp.blackout(16, 16, 8, 8)
        eroded = apply_erosion(op, self.image)
        np.testing.assert_array_equal(eroded[8:24, 8:24], 0.0)
        outside = np.ones((32, 32, 1), dtype=bool)
        outside[8:24, 8:24] = False
        np.testing.assert_array_equal(eroded[outside], self.image[outside])

    def test_blackout_is_idempotent(self):
        op = ErosionOp.blackout(16, 16, 8, 8)
        once = apply_erosion(op, self.image)
        np.testing.assert_array_equal(apply_erosion(op, once), once)

    def test_bicubic_step_edge(self):
        row = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.float64)
        image = np.tile(row, (8, 1))[:, :, None]
        eroded = apply_erosion(ErosionOp.downsample(2), image)
        expected = np.array([0, 0, 0, 0.203125, 0.796875, 1, 1, 1])
        for line in eroded[:, :, 0]:
            np.testing.assert_array_equal(line, expected)

    def test_bicubic_matches_kernel_sum_reference(self):
        for factor in (2, 4):
            image = self.rng.random((16, 16, 3))
            reduced = bicubic_reference(image, 16 // factor, 16 // factor)
            expected = bicubic_reference(reduced, 16, 16)
            eroded = apply_erosion(ErosionOp.downsample(factor), image)
            np.testing.assert_allclose(eroded, expected, rtol=0, atol=1e-12)

    def test_resize_to_non_square_target(self):
        image = self.rng.random((16, 16, 2))
        resized = bicubic_resize(image, (6, 10))
        self.assertEqual(resized.shape, (6, 10, 2))
        np.testing.assert_allclose(resized, bicubic_reference(image, 6, 10), rtol=0, atol=1e-12)
        stacked = bicubic_resize(np.stack([image, image[::-1]]), (6, 10))
        np.testing.assert_allclose(stacked[1], bicubic_reference(image[::-1], 6, 10), rtol=0, atol=1e-12)

    def test_constant_image_survives_downsampling(self):
        image = np.full((16, 16, 1), 0.25)
        np.testing.assert_allclose(apply_erosion(ErosionOp.downsample(4), image), image, atol=1e-12)

    def test_batch_matches_single_image(self):
        images = self.rng.random((3, 32, 32, 1))
        op = ErosionOp.downsample(4)
        batch = apply_erosion_batch(op, images)
        for position in range(3):
            np.testing.assert_allclose(batch[position], apply_erosion(op, images[position]), atol=1e-12)

    def test_per_sample_ops(self):
        images = self.rng.random((2, 32, 32, 1))
        ops = [ErosionOp.identity(), ErosionOp.blackout(16, 16, 8, 8)]
        eroded = apply_erosions(ops, images)
        np.testing.assert_array_equal(eroded[0], images[0])
        np.testing.assert_array_equal(eroded[1, 8:24, 8:24], 0.0)


class ErosionValidationTests(SimpleTestCase):
    def test_non_finite_input_is_rejected(self):
        image = np.zeros((8, 8, 1))
        image[3, 3, 0] = np.nan
        with self.assertRaises(ValidationError) as ctx:
            apply_erosion(ErosionOp.identity(), image)
        self.assertEqual(ctx.exception.code, "non_finite_input")
        self.assertIn("non-finite input", ctx.exception.messages[0])

    def test_factor_must_divide_resolution(self):
        with self.assertRaises(ValidationError) as ctx:
            apply_erosion(ErosionOp.downsample(3), np.zeros((8, 8, 1)))
        self.assertEqual(ctx.exception.code, "erosion_mismatch")

    def test_mask_outside_image(self):
        with self.assertRaises(ValidationError) as ctx:
            apply_erosion(ErosionOp.blackout(8, 8, 4, 4), np.zeros((8, 8, 1)))
        self.assertEqual(ctx.exception.code, "erosion_mismatch")

    def test_op_count_must_match_images(self):
        with self.assertRaises(ValidationError):
            apply_erosions([ErosionOp.identity()], np.zeros((2, 8, 8, 1)))

    def test_mixed_kinds_are_rejected(self):
        with self.assertRaises(ValidationError):
            ErosionSet((ErosionOp.identity(), ErosionOp.downsample(2)))

    def test_unknown_id(self):
        with self.assertRaises(ValidationError):
            ErosionOp.from_id("rotate-90")

    def test_ids_parse_back(self):
        self.assertEqual(ErosionOp.from_id("downsample-x4"), ErosionOp.downsample(4))
        self.assertEqual(ErosionOp.from_id("blackout-16x16@8,12"), ErosionOp.blackout(16, 16, 8, 12))


class ErosionSetTests(SimpleTestCase):
    def test_rec_is_identity_only(self):
        erosion_set = build_erosion_set("rec", (28, 28))
        self.assertEqual(erosion_set.describe(), "identity")

    def test_sr_factors_follow_divisibility(self):
        self.assertEqual(build_erosion_set("sr", (28, 28)).describe(), "downsample-x2,downsample-x4")
        erosion_set = build_erosion_set("sr", (32, 32))
        self.assertEqual(erosion_set.kind, DOWNSAMPLE)
        self.assertEqual([op.factor for op in erosion_set], [2, 4, 8])

    def test_inpaint_masks_at_32(self):
        erosion_set = build_erosion_set("inpaint", (32, 32))
        self.assertEqual(erosion_set.kind, BLACKOUT)
        self.assertEqual(erosion_set.describe(), ",".join([
            "blackout-8x8@12,12", "blackout-8x8@12,16", "blackout-8x8@12,20",
            "blackout-16x16@8,8", "blackout-16x16@8,12", "blackout-16x16@8,16",
        ]))

    def test_offsets_at_32(self):
        self.assertEqual(mask_offsets((32, 32)), [0, 4, 8])
        op = centered_blackout((32, 32), 16, 4)
        self.assertEqual(op.center_offset((32, 32)), (0.0, 4.0))

    def test_offsets_at_28_are_floored(self):
        self.assertEqual(mask_offsets((28, 28)), [0, 3, 7])
        self.assertEqual(centered_blackout((28, 28), 7, 3).center_offset((28, 28)), (-0.5, 2.5))
        self.assertEqual(centered_blackout((28, 28), 14, 7).center_offset((28, 28)), (0.0, 7.0))

    def test_resolution_too_small(self):
        with self.assertRaises(ValidationError) as ctx:
            build_erosion_set("sr", (4, 4))
        self.assertEqual(ctx.exception.code, "resolution_too_small")

    def test_unknown_variant(self):
        with self.assertRaises(ValidationError) as ctx:
            build_erosion_set("denoise", (32, 32))
        self.assertEqual(ctx.exception.code, "invalid_variant")

    def test_description_parses_back(self):
        erosion_set = build_erosion_set("inpaint", (32, 32))
        self.assertEqual(ErosionSet.from_description(erosion_set.describe()), erosion_set)


class ErosionSamplingTests(SimpleTestCase):
    def test_index_is_one_based_and_in_range(self):
        erosion_set = build_erosion_set("sr", (32, 32))
        rng = numpy_rng(0, "erosion", 1)
        draws = {sample_erosion_index(erosion_set, rng) for _ in range(200)}
        self.assertEqual(draws, {1, 2, 3})

    def test_index_draws_are_uniform(self):
        erosion_set = ErosionSet(tuple(build_erosion_set("inpaint", (32, 32)))[:4])
        rng = numpy_rng(0, "erosion", 1)
        draws = np.array([sample_erosion_index(erosion_set, rng) for _ in range(100_000)])
        frequencies = np.bincount(draws, minlength=5)[1:] / len(draws)
        np.testing.assert_allclose(frequencies, 0.25, atol=0.01)

    def test_singleton_set_always_draws_one(self):
        erosion_set = build_erosion_set("rec", (32, 32))
        self.assertEqual(sample_erosion_index(erosion_set, numpy_rng(0, "erosion", 1)), 1)

    def test_draws_are_reproducible(self):
        erosion_set = build_erosion_set("inpaint", (32, 32))
        first = sample_erosion_ops(erosion_set, 16, numpy_rng(3, "erosion", 5))
        second = sample_erosion_ops(erosion_set, 16, numpy_rng(3, "erosion", 5))
        self.assertEqual(first, second)
