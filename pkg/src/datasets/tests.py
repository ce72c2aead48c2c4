import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from core.seeding import numpy_rng
from core.testing import build_corpus, write_idx, write_manifest_rows, write_png
from .services import (
    TEST_ID,
    TEST_OOD,
    TRAIN,
    VAL_ID,
    VAL_OOD,
    ImageLoader,
    ManifestPlan,
    convert_channels,
    decode_image,
    load_manifest,
    sample_batch,
    sample_indices,
    write_manifest,
)


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=2)
class ManifestTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write_images(self, *names, size=8, channels=1):
        for name in names:
            write_png(self.root / name, np.full((size, size, channels), 0.5))

    def test_parses_sources_labels_and_defaults(self):
        self.write_images("a.png", "b.png", "c.png")
        path = write_manifest_rows(self.root / "m.csv", [
            ["# path,split,label,source"],
            ["a.png", "train", "3"],
            ["b.png", "test-id"],
            ["c.png", "test-ood", "", "noise"],
        ])
        manifest = load_manifest(path)
        self.assertEqual(len(manifest), 3)
        self.assertEqual(manifest[0].label, 3)
        self.assertEqual(manifest[1].source, "id")
        self.assertEqual(manifest.sources(TEST_OOD), ["noise"])
        self.assertEqual(manifest.split_counts()[TRAIN], 1)
        self.assertTrue(manifest.has_labels(TRAIN))
        self.assertFalse(manifest.has_labels(TEST_ID))

    def test_duplicate_path_names_both_splits(self):
        self.write_images("a.png")
        path = write_manifest_rows(self.root / "m.csv", [["a.png", "train"], ["a.png", "test-ood"]])
        with self.assertRaises(ValidationError) as ctx:
            load_manifest(path)
        self.assertEqual(ctx.exception.code, "duplicate_path")
        self.assertIn("duplicate path 'a.png' in splits train and test-ood", ctx.exception.messages[0])

    def test_same_file_under_another_spelling_is_a_duplicate(self):
        self.write_images("a.png")
        for other in ("./a.png", str(self.root / "a.png")):
            path = write_manifest_rows(self.root / "m.csv", [["a.png", "train"], [other, "test-id"]])
            with self.assertRaises(ValidationError) as ctx:
                load_manifest(path)
            self.assertEqual(ctx.exception.code, "duplicate_path")
            self.assertIn("in splits train and test-id", ctx.exception.messages[0])

    def test_flipped_copy_is_a_distinct_entry(self):
        self.write_images("a.png")
        path = write_manifest_rows(self.root / "m.csv", [["a.png", "test-id"], ["./a.png!vflip", "test-ood"]])
        manifest = load_manifest(path)
        self.assertEqual([entry.vflip for entry in manifest.entries], [False, True])

    def test_decode_extremes(self):
        write_png(self.root / "white.png", np.ones((4, 4, 1)))
        write_png(self.root / "black.png", np.zeros((4, 4, 1)))
        np.testing.assert_array_equal(decode_image(self.root / "white.png", (4, 4)), 1.0)
        np.testing.assert_array_equal(decode_image(self.root / "black.png", (4, 4)), 0.0)

    def test_unknown_split(self):
        self.write_images("a.png")
        path = write_manifest_rows(self.root / "m.csv", [["a.png", "holdout"]])
        with self.assertRaises(ValidationError) as ctx:
            load_manifest(path)
        self.assertEqual(ctx.exception.code, "unknown_split")

    def test_empty_manifest(self):
        path = write_manifest_rows(self.root / "m.csv", [])
        with self.assertRaises(ValidationError) as ctx:
            load_manifest(path)
        self.assertEqual(ctx.exception.code, "empty_manifest")

    def test_missing_image(self):
        path = write_manifest_rows(self.root / "m.csv", [["ghost.png", "train"]])
        with self.assertRaises(ValidationError) as ctx:
            load_manifest(path)
        self.assertEqual(ctx.exception.code, "missing_file")

    def test_id_channel_mismatch(self):
        self.write_images("gray.png")
        self.write_images("rgb.png", channels=3)
        path = write_manifest_rows(self.root / "m.csv", [["gray.png", "train"], ["rgb.png", "val-id"]])
        with self.assertRaises(ValidationError) as ctx:
            load_manifest(path)
        self.assertEqual(ctx.exception.code, "channel_mismatch")

    def test_idx_records_and_vflip(self):
        records = np.zeros((3, 8, 8), dtype=np.uint8)
        records[1, 0, :] = 255
        write_idx(self.root / "digits.idx", records)
        path = write_manifest_rows(self.root / "m.csv", [
            ["digits.idx#1", "train"],
            ["digits.idx#1!vflip", "test-ood", "", "flipped"],
        ])
        manifest = load_manifest(path)
        upright = decode_image(manifest[0], (8, 8))
        flipped = decode_image(manifest[1], (8, 8))
        np.testing.assert_array_equal(upright[0, :, 0], 1.0)
        np.testing.assert_array_equal(flipped[7, :, 0], 1.0)
        np.testing.assert_array_equal(flipped, upright[::-1])

    def test_single_draws_are_uniform(self):
        for position in range(5):
            self.write_images(f"{position}.png")
        manifest = load_manifest(write_manifest_rows(
            self.root / "m.csv", [[f"{position}.png", "train"] for position in range(5)]
        ))
        loader = ImageLoader(manifest, (8, 8))
        rng = numpy_rng(0, "batch")
        draws = 100_000
        counts = np.zeros(5)
        for _ in range(draws):
            counts[sample_batch(manifest, TRAIN, 1, rng, loader).indices[0]] += 1
        np.testing.assert_allclose(counts / draws, 0.2, atol=0.01)


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=2)
class LoaderTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.manifest_path = build_corpus(Path(cls.tmp.name), size=16)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def setUp(self):
        self.manifest = load_manifest(self.manifest_path)

    def test_decode_resizes_to_target(self):
        image = decode_image(self.manifest[0], (8, 8))
        self.assertEqual(image.shape, (8, 8, 1))
        self.assertGreaterEqual(image.min(), 0.0)
        self.assertLessEqual(image.max(), 1.0)

    def test_gray_to_rgb_and_back(self):
        gray = np.random.default_rng(0).random((4, 4, 1))
        rgb = convert_channels(gray, 3)
        self.assertEqual(rgb.shape, (4, 4, 3))
        np.testing.assert_allclose(convert_channels(rgb, 1), gray, atol=1e-12)

    def test_images_come_back_in_requested_order(self):
        loader = ImageLoader(self.manifest, (16, 16))
        indices = [5, 0, 3, 0]
        stack = loader.images(indices)
        for position, index in enumerate(indices):
            np.testing.assert_array_equal(stack[position], decode_image(self.manifest[index], (16, 16)))

    def test_split_uses_manifest_order(self):
        loader = ImageLoader(self.manifest, (16, 16))
        batch = loader.split(VAL_ID)
        self.assertEqual(batch.indices, self.manifest.split_indices(VAL_ID))
        self.assertEqual(batch.images.shape, (8, 16, 16, 1))

    def test_sampling_is_without_replacement_and_reproducible(self):
        first = sample_indices(self.manifest, TRAIN, 10, numpy_rng(1, "batch", 1))
        second = sample_indices(self.manifest, TRAIN, 10, numpy_rng(1, "batch", 1))
        self.assertEqual(first, second)
        self.assertEqual(len(set(first)), 10)
        self.assertTrue(set(first) <= set(self.manifest.split_indices(TRAIN)))

    def test_batch_larger_than_split(self):
        with self.assertRaises(ValidationError) as ctx:
            sample_indices(self.manifest, TRAIN, 25, numpy_rng(0, "batch", 1))
        self.assertEqual(ctx.exception.code, "batch_too_large")

    def test_sample_batch_stays_in_bounds(self):
        batch = sample_batch(self.manifest, TRAIN, 4, numpy_rng(0, "batch", 2), resolution=(16, 16))
        self.assertEqual(len(batch), 4)
        batch.assert_bounds()


@override_settings(SROOD_DATA_ROOT=None)
class ManifestBuilderTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        rng = np.random.default_rng(0)
        write_idx(self.root / "id" / "images.idx", rng.integers(0, 256, size=(20, 8, 8)))
        write_idx(self.root / "id" / "labels.idx", np.arange(20) % 10)
        for position in range(6):
            write_png(self.root / "ood" / f"{position}.png", rng.random((8, 8, 1)))

    def tearDown(self):
        self.tmp.cleanup()

    def test_splits_are_disjoint_and_sized(self):
        plan = ManifestPlan(
            id_corpus=str(self.root / "id" / "images.idx"),
            ood_corpora={"noise": str(self.root / "ood")},
            id_labels=str(self.root / "id" / "labels.idx"),
            vflip_source=True,
        )
        manifest = write_manifest(self.root / "out" / "manifest.csv", plan, numpy_rng(0, "split"))
        counts = manifest.split_counts()
        self.assertEqual((counts[TRAIN], counts[VAL_ID], counts[TEST_ID]), (16, 2, 2))
        self.assertEqual(manifest.sources(TEST_OOD), ["noise", "vflip"])
        self.assertEqual(len(manifest.split_indices(VAL_OOD, "noise")), 3)
        self.assertEqual(len(manifest.split_indices(TEST_OOD, "vflip")), 2)
        self.assertTrue(manifest.has_labels(TRAIN))
        paths = [entry.path for entry in manifest.entries]
        self.assertEqual(len(paths), len(set(paths)))

    def test_same_seed_same_manifest(self):
        plan = ManifestPlan(id_corpus=str(self.root / "id" / "images.idx"), ood_corpora={"noise": str(self.root / "ood")})
        write_manifest(self.root / "a" / "manifest.csv", plan, numpy_rng(4, "split"))
        write_manifest(self.root / "b" / "manifest.csv", plan, numpy_rng(4, "split"))
        self.assertEqual(
            (self.root / "a" / "manifest.csv").read_text(), (self.root / "b" / "manifest.csv").read_text()
        )
