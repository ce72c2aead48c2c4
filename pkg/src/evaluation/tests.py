import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from core.seeding import numpy_rng, torch_generator
from core.testing import brute_force_auroc, build_corpus, power_iteration_norm, small_config
from datasets.services import TEST_ID, TEST_OOD, ImageLoader, load_manifest
from erosion.services import ErosionOp
from metrics.networks import PhiConfig
from metrics.services import init_phi
from repairer.networks import RepairerConfig
from repairer.services import init_model
from scoring.services import ScoringService
from .reports import GridTriplet, emit_report, format_table, write_ablation, write_diagnostics
from .roc import auroc
from .services import (
    LOSS_ABLATION,
    OFFSET_ABLATION,
    VARIANT_ABLATION,
    AblationContext,
    AblationTable,
    EvalReport,
    EvalRow,
    LipschitzDiagnostics,
    PairResult,
    amplification_ratio,
    check_acceptance,
    estimate_lipschitz,
    evaluate_pair,
    lipschitz_diagnostics,
    run_ablation,
    summarize_seeds,
)


class AurocTests(SimpleTestCase):
    def test_matches_pairwise_count_with_ties(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            n_id, n_ood = rng.integers(1, 201, size=2)
            id_scores = np.round(rng.normal(0.0, 1.0, n_id), 1)
            ood_scores = np.round(rng.normal(0.5, 1.0, n_ood), 1)
            self.assertAlmostEqual(
                auroc(id_scores, ood_scores), brute_force_auroc(id_scores, ood_scores), delta=1e-9
            )

    def test_extremes(self):
        self.assertEqual(auroc([0.1, 0.2], [0.3, 0.4]), 1.0)
        self.assertEqual(auroc([0.3, 0.4], [0.1, 0.2]), 0.0)
        self.assertEqual(auroc([0.5, 0.5], [0.5]), 0.5)

    def test_swapping_sides_complements(self):
        rng = np.random.default_rng(9)
        id_scores = np.round(rng.normal(0.0, 1.0, 40), 1)
        ood_scores = np.round(rng.normal(0.3, 1.0, 30), 1)
        self.assertAlmostEqual(auroc(id_scores, ood_scores), 1.0 - auroc(ood_scores, id_scores), delta=1e-12)

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(10)
        id_scores = np.round(rng.random(50), 2)
        ood_scores = np.round(rng.random(35) + 0.2, 2)
        expected = auroc(id_scores, ood_scores)
        for transform in (np.exp, lambda s: 3.0 * s - 7.0, lambda s: s ** 3):
            self.assertEqual(auroc(transform(id_scores), transform(ood_scores)), expected)

    def test_empty_side(self):
        with self.assertRaises(ValidationError) as ctx:
            auroc([], [0.1])
        self.assertEqual(ctx.exception.code, "empty_scores")

    def test_non_finite(self):
        with self.assertRaises(ValidationError) as ctx:
            auroc([0.1, np.inf], [0.2])
        self.assertEqual(ctx.exception.code, "non_finite_score")


class LipschitzTests(SimpleTestCase):
    def test_identity_decoder(self):
        base = torch.randn(4, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        estimate = estimate_lipschitz(lambda z: z, base, torch_generator(0, "probe"), n_probes=20)
        self.assertAlmostEqual(estimate, 1.0, delta=1e-3)

    def test_linear_decoder_against_power_iteration(self):
        rng = np.random.default_rng(1)
        u, _ = np.linalg.qr(rng.standard_normal((5, 3)))
        v, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        matrix = u @ np.diag([3.0, 1.0, 0.5]) @ v.T
        sigma_max = power_iteration_norm(matrix)
        self.assertAlmostEqual(sigma_max, 3.0, places=6)

        weights = torch.from_numpy(matrix)
        base = torch.zeros(2, 3, dtype=torch.float64)
        estimate = estimate_lipschitz(lambda z: z @ weights.T, base, torch_generator(0, "probe"), n_probes=10)
        self.assertLessEqual(estimate, sigma_max * (1 + 1e-6))
        self.assertGreaterEqual(estimate, 0.9 * sigma_max)

    def test_diagnostics_on_model(self):
        model = init_model(small_config(), torch_generator(0, "init"), dtype=torch.float64)
        phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0, dtype=torch.float64).freeze()
        samples = np.random.default_rng(0).random((6, 8, 8, 1))
        stats = lipschitz_diagnostics(
            model, phi, ErosionOp.downsample(2), samples, numpy_rng(0, "probe"), n_probes=10, refine_steps=3
        )
        self.assertEqual(stats.n_samples, 6)
        self.assertGreater(stats.lip_g_estimate, 0.0)
        self.assertLessEqual(stats.delta_z_mean, stats.delta_z_max)
        self.assertLessEqual(stats.delta_x_mean, stats.delta_x_max)

    def test_decoder_override(self):
        model = init_model(small_config(), torch_generator(0, "init"), dtype=torch.float64)
        phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0, dtype=torch.float64).freeze()
        samples = np.random.default_rng(0).random((2, 8, 8, 1))
        stats = lipschitz_diagnostics(
            model, phi, ErosionOp.identity(), samples, numpy_rng(0, "probe"), decoder=lambda z: z, n_probes=5
        )
        self.assertAlmostEqual(stats.lip_g_estimate, 1.0, delta=1e-3)
        self.assertEqual(stats.delta_z_max, 0.0)

    def test_needs_at_least_one_direction(self):
        base = torch.zeros(2, 3, dtype=torch.float64)
        with self.assertRaises(ValidationError) as ctx:
            estimate_lipschitz(lambda z: z, base, torch_generator(0, "init"), n_probes=0)
        self.assertEqual(ctx.exception.code, "invalid_value")
        with self.assertRaises(ValidationError):
            estimate_lipschitz(lambda z: z, base[:0], torch_generator(0, "init"), n_probes=5)

    def test_amplification_ratio(self):
        def stats(delta_z):
            return LipschitzDiagnostics(1.0, delta_z, delta_z, 0.0, 0.0, 0.0, 1)
        self.assertEqual(amplification_ratio(stats(2.0), stats(5.0)), 2.5)
        self.assertIsNone(amplification_ratio(stats(0.0), stats(5.0)))

    def test_non_finite_statistics(self):
        with self.assertRaises(ValidationError) as ctx:
            LipschitzDiagnostics(float("nan"), 0.0, 0.0, 0.0, 0.0, 0.0, 1)
        self.assertEqual(ctx.exception.code, "non_finite_activation")


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
class PairEvaluationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.manifest = load_manifest(build_corpus(Path(cls.tmp.name), size=8))
        cls.small_tmp = tempfile.TemporaryDirectory()
        cls.wide_manifest = load_manifest(build_corpus(Path(cls.small_tmp.name), size=32, counts={
            "train": 2, "val-id": 2, "test-id": 4, "val-ood": 2, "test-ood": 4,
        }))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        cls.small_tmp.cleanup()
        super().tearDownClass()

    def setUp(self):
        self.loader = ImageLoader(self.manifest, (8, 8))
        self.model = init_model(small_config(), torch_generator(0, "init"))
        self.phi = init_phi(PhiConfig((8, 8), 1, widths=(2, 4)), seed=0).freeze()
        self.op = ErosionOp.downsample(2)

    def test_pair_row_matches_records(self):
        scorer = ScoringService(self.model, self.phi, self.op)
        result = evaluate_pair(scorer, self.loader, variant="sr", seed=3)
        self.assertEqual((result.row.n_id, result.row.n_ood), (8, 8))
        self.assertEqual((result.row.id_dataset, result.row.ood_dataset), ("squares", "stripes"))
        self.assertEqual(result.row.erosion, "downsample-x2")
        self.assertAlmostEqual(result.row.auroc, brute_force_auroc(result.id_scores, result.ood_scores), delta=1e-9)
        self.assertEqual([r.split for r in result.records], [TEST_ID] * 8 + [TEST_OOD] * 8)

    def test_identical_splits_give_chance_level(self):
        scorer = ScoringService(self.model, self.phi, self.op)
        result = evaluate_pair(scorer, self.loader, id_split=TEST_ID, ood_split=TEST_ID)
        np.testing.assert_array_equal(result.id_scores, result.ood_scores)
        self.assertEqual(result.row.auroc, 0.5)

    def test_resolution_mismatch(self):
        scorer = ScoringService(self.model, self.phi, self.op)
        with self.assertRaises(ValidationError) as ctx:
            evaluate_pair(scorer, ImageLoader(self.manifest, (16, 16)))
        self.assertEqual(ctx.exception.code, "shape_mismatch")

    def test_loss_ablation_columns(self):
        context = AblationContext(loader=self.loader, model=self.model, phi=self.phi, op=self.op)
        table = run_ablation(LOSS_ABLATION, context)
        self.assertEqual(table.columns, ["L2", "L2+LPIPS", "LPIPS"])
        self.assertEqual([source for source, _ in table.rows], ["stripes"])

    def test_offset_ablation_at_32(self):
        config = RepairerConfig((32, 32), 1, 4, (2, 4), (4, 2))
        model = init_model(config, torch_generator(0, "init"))
        phi = init_phi(PhiConfig((32, 32), 1, widths=(2, 4)), seed=0).freeze()
        context = AblationContext(
            loader=ImageLoader(self.wide_manifest, (32, 32)), phi=phi, inpaint_model=model, mask_side=16,
        )
        table = run_ablation(OFFSET_ABLATION, context)
        self.assertEqual(table.columns, ["offset=0", "offset=4", "offset=8"])
        self.assertEqual(len(table.rows[0][1]), 3)

    def test_missing_prerequisite(self):
        with self.assertRaises(ValidationError) as ctx:
            run_ablation(OFFSET_ABLATION, AblationContext(loader=self.loader, phi=self.phi))
        self.assertEqual(ctx.exception.code, "missing_checkpoint")

    def test_unknown_ablation(self):
        with self.assertRaises(ValidationError) as ctx:
            run_ablation("dropout", AblationContext())
        self.assertEqual(ctx.exception.code, "invalid_ablation")


class VariantAblationTests(SimpleTestCase):
    def test_medians_over_seeds(self):
        results = {
            ("rec", 0): 0.6, ("rec", 1): 0.7, ("rec", 2): 0.65,
            ("inpaint", 0): 0.8, ("inpaint", 1): 0.7, ("inpaint", 2): 0.9,
            ("sr", 0): 0.9, ("sr", 1): 0.8, ("sr", 2): 0.85,
        }
        context = AblationContext(
            variant_runner=lambda variant, seed: {"stripes": results[(variant, seed)]}, seeds=(0, 1, 2),
        )
        table = run_ablation(VARIANT_ABLATION, context)
        self.assertEqual(table.columns, ["rec", "inpaint", "sr"])
        np.testing.assert_allclose(table.rows[0][1], [0.65, 0.8, 0.85])
        self.assertEqual(table.details["sr"]["stripes"], [0.9, 0.8, 0.85])
        checks = check_acceptance({VARIANT_ABLATION: table})
        self.assertEqual(checks, {"sr_median_auroc_at_least_0.75": True, "sr_beats_rec_by_0.03": True})

    def test_acceptance_for_loss_and_offset(self):
        loss = AblationTable(LOSS_ABLATION, ["L2", "L2+LPIPS", "LPIPS"], [("svhn", [0.3, 0.8, 0.9])])
        offset = AblationTable(OFFSET_ABLATION, ["offset=0", "offset=4", "offset=8"], [("svhn", [0.8, 0.85, 0.95])])
        checks = check_acceptance({LOSS_ABLATION: loss, OFFSET_ABLATION: offset})
        self.assertTrue(checks["lpips_at_least_l2"])
        self.assertFalse(checks["offset_spread_below_0.10"])

    def test_median_of_nothing(self):
        with self.assertRaises(ValidationError):
            summarize_seeds([])


class ReportTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def make_report(self):
        row = EvalRow("squares", "stripes", "sr", "downsample-x2", 0.875, 4, 4, 0)
        report = EvalReport(metadata={"seed": "0"})
        report.add(PairResult(row, [], np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.35, 0.5, 0.6, 0.7])))
        return report

    def test_report_files(self):
        rng = np.random.default_rng(0)
        stack = rng.random((2, 8, 8, 1))
        emit_report(self.make_report(), self.out, [GridTriplet("squares", stack, stack, stack)], bins=5)
        self.assertEqual(
            (self.out / "report.csv").read_text(),
            "id_dataset,ood_dataset,variant,erosion,auroc,n_id,n_ood,seed\n"
            "squares,stripes,sr,downsample-x2,0.875000,4,4,0\n",
        )
        self.assertTrue((self.out / "hist_squares_vs_stripes.png").is_file())
        self.assertTrue((self.out / "grid_squares.png").is_file())
        meta = (self.out / "report_meta.txt").read_text()
        self.assertIn("generated_at=", meta)
        self.assertIn("seed=0", meta)

    def test_report_csv_is_rerun_stable(self):
        emit_report(self.make_report(), self.out / "a")
        emit_report(self.make_report(), self.out / "b")
        self.assertEqual((self.out / "a" / "report.csv").read_bytes(), (self.out / "b" / "report.csv").read_bytes())
        self.assertEqual((self.out / "a" / "report.txt").read_bytes(), (self.out / "b" / "report.txt").read_bytes())

    def test_text_table(self):
        text = format_table(["a", "bb"], [["xyz", "1"]])
        self.assertEqual(text, "a    bb\n---  --\nxyz  1\n")

    def test_ablation_files(self):
        table = AblationTable(VARIANT_ABLATION, ["rec", "sr"], [("stripes", [0.6, 0.8])],
                              details={"rec": {"stripes": [0.6]}, "sr": {"stripes": [0.8]}})
        write_ablation(table, self.out, {"sr_beats_rec_by_0.03": True})
        self.assertEqual((self.out / "ablation_variant.csv").read_text(), "ood_dataset,rec,sr\nstripes,0.600000,0.800000\n")
        self.assertIn("sr_beats_rec_by_0.03: pass", (self.out / "ablation_variant.txt").read_text())
        self.assertTrue((self.out / "ablation_variant_seeds.csv").is_file())

    def test_diagnostics_files(self):
        stats = {TEST_ID: LipschitzDiagnostics(1.5, 0.5, 1.0, 0.2, 0.3, 0.1, 4)}
        write_diagnostics(self.out, stats, None)
        lines = (self.out / "diagnostics.csv").read_text().splitlines()
        self.assertEqual(lines[0].split(",")[:2], ["split", "lip_g_estimate"])
        self.assertEqual(lines[1], "test-id,1.5,0.5,1,0.2,0.3,0.1,4")
        self.assertEqual((self.out / "diagnostics.txt").read_text(), "ood_over_id_delta_z=\n")
