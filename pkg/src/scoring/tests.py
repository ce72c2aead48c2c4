import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from core.seeding import torch_generator
from core.testing import build_corpus, small_config
from datasets.services import TEST_ID, TEST_OOD, TRAIN, ImageLoader, load_manifest
from erosion.services import ErosionOp, apply_erosion, build_erosion_set
from evaluation.roc import auroc
from metrics.networks import PhiConfig
from metrics.services import L2_SCORE, LPIPS_SCORE, init_phi, l2_loss, lpips_distance
from repairer.services import init_model, repair
from .baselines import baseline_scores, fit_baseline_head, logit_scores
from .services import (
    FIXED,
    ScoreRecord,
    ScoringService,
    ThresholdSpec,
    best_erosion_index,
    build_records,
    calibrate_threshold,
    classify_ood,
    ood_score,
    read_score_file,
    score_batch,
    select_erosion,
    write_score_file,
)


class ThresholdTests(SimpleTestCase):
    def test_decision_is_strict(self):
        self.assertTrue(classify_ood(0.51, 0.5))
        self.assertFalse(classify_ood(0.5, 0.5))

    def test_non_finite_score(self):
        with self.assertRaises(ValidationError) as ctx:
            classify_ood(float("nan"), 0.5)
        self.assertEqual(ctx.exception.code, "non_finite_score")

    def test_quantile_uses_lower_interpolation(self):
        scores = np.arange(1.0, 11.0)
        self.assertEqual(calibrate_threshold(scores, ThresholdSpec(quantile=0.95)), 9.0)
        self.assertEqual(calibrate_threshold(scores, ThresholdSpec(quantile=1.0)), 10.0)

    def test_fixed_threshold_ignores_scores(self):
        self.assertEqual(calibrate_threshold([], ThresholdSpec(method=FIXED, epsilon=0.3)), 0.3)

    def test_invalid_specs(self):
        with self.assertRaises(ValidationError) as ctx:
            ThresholdSpec(quantile=0.0)
        self.assertEqual(ctx.exception.code, "invalid_threshold")
        with self.assertRaises(ValidationError):
            ThresholdSpec(method="otsu")

    def test_empty_scores(self):
        with self.assertRaises(ValidationError) as ctx:
            calibrate_threshold([], ThresholdSpec())
        self.assertEqual(ctx.exception.code, "empty_scores")


class SelectionRuleTests(SimpleTestCase):
    def test_ties_go_to_lowest_position(self):
        self.assertEqual(best_erosion_index([0.7, 0.9, 0.9]), 1)
        self.assertEqual(best_erosion_index([None, 0.6, None, 0.6]), 1)
        self.assertIsNone(best_erosion_index([None, None]))

    def test_single_op_needs_no_validation_data(self):
        erosion_set = build_erosion_set("rec", (8, 8))
        selection = select_erosion(None, None, erosion_set, None, None)
        self.assertEqual(selection.op, ErosionOp.identity())
        self.assertEqual(selection.index, 0)


class ScoreTests(SimpleTestCase):
    def setUp(self):
        self.model = init_model(small_config(), torch_generator(0, "init"))
        self.phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0).freeze()
        self.images = np.random.default_rng(5).random((5, 8, 8, 1))
        self.op = ErosionOp.downsample(2)

    def test_single_score_is_lpips_of_repair(self):
        x = self.images[0]
        expected = lpips_distance(self.phi, repair(self.model, apply_erosion(self.op, x)), x)
        self.assertAlmostEqual(ood_score(self.model, self.phi, self.op, x), expected, places=5)

    def test_l2_score(self):
        scores = score_batch(self.model, self.phi, self.op, self.images, L2_SCORE)
        for position, x in enumerate(self.images):
            expected = l2_loss(repair(self.model, apply_erosion(self.op, x)), x)
            self.assertAlmostEqual(scores[position], expected, places=6)

    def test_chunking_does_not_change_scores(self):
        whole = score_batch(self.model, self.phi, self.op, self.images, LPIPS_SCORE)
        chunked = score_batch(self.model, self.phi, self.op, self.images, LPIPS_SCORE, batch_size=2)
        np.testing.assert_allclose(chunked, whole, rtol=1e-6)
        self.assertTrue(np.all(whole >= 0.0))

    def test_unknown_score_function(self):
        with self.assertRaises(ValidationError) as ctx:
            score_batch(self.model, self.phi, self.op, self.images, "ssim")
        self.assertEqual(ctx.exception.code, "invalid_score_fn")

    def test_selection_follows_validation_auroc(self):
        erosion_set = build_erosion_set("sr", (8, 8))
        rng = np.random.default_rng(9)
        val_id = np.clip(0.5 + 0.05 * rng.standard_normal((6, 8, 8, 1)), 0.0, 1.0)
        val_ood = rng.random((6, 8, 8, 1))
        selection = select_erosion(self.model, self.phi, erosion_set, val_id, val_ood)
        expected = [
            auroc(score_batch(self.model, self.phi, op, val_id), score_batch(self.model, self.phi, op, val_ood))
            for op in erosion_set
        ]
        np.testing.assert_allclose(selection.aurocs, expected)
        self.assertEqual(selection.index, best_erosion_index(expected))
        self.assertEqual(selection.op, erosion_set[selection.index])

    def test_label_free_selection_uses_only_id_scores(self):
        erosion_set = build_erosion_set("sr", (8, 8))
        selection = select_erosion(self.model, self.phi, erosion_set, self.images, None, label_free=True)
        self.assertTrue(selection.label_free)
        self.assertEqual(selection.aurocs, [None, None, None])
        for op, criterion in zip(erosion_set, selection.criteria):
            scores = score_batch(self.model, self.phi, op, self.images)
            self.assertAlmostEqual(criterion, np.mean(scores) ** 2 / np.var(scores))
        self.assertEqual(selection.index, best_erosion_index(selection.criteria))

    def test_missing_val_ood(self):
        with self.assertRaises(ValidationError) as ctx:
            select_erosion(self.model, self.phi, build_erosion_set("sr", (8, 8)), self.images, None)
        self.assertEqual(ctx.exception.code, "empty_split")


class ScoreFileTests(SimpleTestCase):
    def test_file_keeps_order_and_decisions(self):
        op = ErosionOp.downsample(4)
        records = build_records([3, 1, 2], TEST_ID, [0.25, 0.75, 0.5], op, epsilon=0.5)
        self.assertEqual([r.decision for r in records], [False, True, False])
        with tempfile.TemporaryDirectory() as tmp:
            path = write_score_file(Path(tmp) / "scores.csv", records)
            self.assertEqual(
                path.read_text().splitlines()[:2],
                ["sample_id,split,score,decision,erosion_id", "3,test-id,0.25,0,downsample-x4"],
            )
            self.assertEqual(read_score_file(path), records)

    def test_undecided_records(self):
        record = ScoreRecord(0, TEST_OOD, 1.5, "identity")
        self.assertEqual(record.as_row(), ["0", "test-ood", "1.5", "", "identity"])

    def test_missing_file(self):
        with self.assertRaises(ValidationError) as ctx:
            read_score_file("/nonexistent/scores.csv")
        self.assertEqual(ctx.exception.code, "missing_artifact")


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
class ScoringServiceTests(SimpleTestCase):
    def test_records_follow_manifest_order(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = load_manifest(build_corpus(Path(tmp), size=8))
            loader = ImageLoader(manifest, (8, 8))
            model = init_model(small_config(), torch_generator(0, "init"))
            phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0).freeze()
            service = ScoringService(model, phi, ErosionOp.downsample(2))
            records = service.records(loader, TEST_OOD, epsilon=0.0)
            self.assertEqual([r.sample_id for r in records], manifest.split_indices(TEST_OOD))
            self.assertTrue(all(r.split == TEST_OOD and r.erosion_id == "downsample-x2" for r in records))
            self.assertTrue(all(r.decision == (r.score > 0.0) for r in records))


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
class BaselineTests(SimpleTestCase):
    def test_logit_scores(self):
        msp, max_logit = logit_scores([[0.0, 0.0], [2.0, 0.0]])
        np.testing.assert_allclose(msp, [-0.5, -np.exp(2) / (np.exp(2) + 1)])
        np.testing.assert_allclose(max_logit, [-0.0, -2.0])

    def test_head_needs_labels(self):
        phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0).freeze()
        with self.assertRaises(ValidationError) as ctx:
            fit_baseline_head(phi, np.zeros((2, 8, 8, 1)), [0, None], seed=0)
        self.assertEqual(ctx.exception.code, "missing_labels")

    def test_head_scores_every_image(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = load_manifest(build_corpus(Path(tmp), size=8, labels=True))
            loader = ImageLoader(manifest, (8, 8))
            phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0).freeze()
            train = loader.split(TRAIN)
            labels = [manifest[i].label for i in train.indices]
            head = fit_baseline_head(phi, train.images, labels, seed=0, n_iter=20)
            msp, max_logit = baseline_scores(head, phi, loader.split(TEST_OOD).images)
            self.assertEqual(msp.shape, (8,))
            self.assertTrue(np.all((msp >= -1.0) & (msp <= -0.5)))
            self.assertEqual(max_logit.shape, (8,))
