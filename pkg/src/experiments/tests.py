import io
import tempfile
from pathlib import Path

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, override_settings

from core.testing import build_corpus
from .cli import run_command
from .config import RESOLVED_CONFIG_FILE, load_experiment_config

TINY_CONFIG = """\
experiment.manifest = data/manifest.csv
experiment.variant = sr
repairer.resolution = 8x8
repairer.latent_dim = 4
repairer.encoder_widths = 2,4
repairer.decoder_widths = 4,2
phi.widths = 2,4
phi.n_iter = 3
phi.batch_size = 4
train.n_iter = 4
train.batch_size = 4
train.checkpoint_every = 2
baseline.n_iter = 5
report.grid_samples = 2
diagnose.n_probes = 4
diagnose.refine_steps = 2
diagnose.samples = 4
scoring.baselines = true
"""


class ExperimentConfigTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = self.root / "experiment.txt"
        path.write_text(text, encoding="utf-8")
        return path

    def test_defaults_file_and_overrides(self):
        config = load_experiment_config(self.write(TINY_CONFIG), seed=7, out=self.root / "out")
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.out_dir, self.root / "out")
        self.assertEqual(config.manifest, self.root.resolve() / "data" / "manifest.csv")
        self.assertEqual(config.repairer.encoder_widths, (2, 4))
        self.assertEqual(config.loss.lambda2, 0.8)
        self.assertEqual(config.threshold.quantile, 0.95)
        self.assertEqual(config.seeds, (0, 1, 2))

    def test_resolved_file_records_seed(self):
        config = load_experiment_config(self.write(TINY_CONFIG), seed=3, out=self.root / "out")
        path = config.write_resolved()
        self.assertEqual(path.name, RESOLVED_CONFIG_FILE)
        text = path.read_text()
        self.assertIn("experiment.seed = 3\n", text)
        self.assertEqual(text.splitlines(), sorted(text.splitlines()))

    def test_hash_is_stable_and_seed_sensitive(self):
        first = load_experiment_config(self.write(TINY_CONFIG), seed=1)
        second = load_experiment_config(self.write(TINY_CONFIG), seed=1)
        third = load_experiment_config(self.write(TINY_CONFIG), seed=2)
        self.assertEqual(first.config_hash, second.config_hash)
        self.assertNotEqual(first.config_hash, third.config_hash)

    def test_unknown_key(self):
        with self.assertRaises(ValidationError) as ctx:
            load_experiment_config(self.write("train.epochs = 3\n"))
        self.assertEqual(ctx.exception.code, "unknown_key")

    def test_bad_value(self):
        with self.assertRaises(ValidationError) as ctx:
            load_experiment_config(self.write("train.n_iter = many\n"))
        self.assertEqual(ctx.exception.code, "invalid_value")

    def test_diagnostics_need_a_direction(self):
        with self.assertRaises(ValidationError) as ctx:
            load_experiment_config(self.write("diagnose.n_probes = 0\n"))
        self.assertEqual(ctx.exception.code, "invalid_value")

    def test_missing_file(self):
        with self.assertRaises(ValidationError) as ctx:
            load_experiment_config(self.root / "absent.txt")
        self.assertEqual(ctx.exception.code, "config_error")

    def test_child_config(self):
        config = load_experiment_config(self.write(TINY_CONFIG))
        child = config.with_values(experiment__variant="inpaint", experiment__seed=4)
        self.assertEqual((child.variant, child.seed), ("inpaint", 4))
        with self.assertRaises(ValidationError):
            config.with_values(experiment__colour="red")


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
class CommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        build_corpus(self.root / "data", size=8, labels=True)
        self.config = self.root / "experiment.txt"
        self.config.write_text(TINY_CONFIG, encoding="utf-8")

    def tearDown(self):
        self.tmp.cleanup()

    def run_srood(self, *argv, out="out"):
        stdout, stderr = io.StringIO(), io.StringIO()
        code = run_command([*argv, "--config", str(self.config), "--out", str(self.root / out)], stdout, stderr)
        return code, stdout.getvalue(), stderr.getvalue()

    def test_score_before_train(self):
        code, _, stderr = self.run_srood("score")
        self.assertEqual(code, 3)
        self.assertTrue(stderr.startswith("error code=missing_checkpoint message=missing checkpoint"))
        self.assertEqual(len(stderr.splitlines()), 1)
        self.assertTrue((self.root / "out" / RESOLVED_CONFIG_FILE).is_file())

    def test_unknown_subcommand(self):
        stderr = io.StringIO()
        self.assertEqual(run_command(["retrain"], io.StringIO(), stderr), 2)
        self.assertTrue(stderr.getvalue().startswith("error code=usage"))

    def test_bad_config(self):
        self.config.write_text("train.epochs = 3\n", encoding="utf-8")
        code, _, stderr = self.run_srood("train")
        self.assertEqual(code, 2)
        self.assertIn("code=unknown_key", stderr)

    def test_full_pipeline_is_deterministic(self):
        for out in ("first", "second"):
            for stage in ("fit-phi", "train", "select-erosion", "calibrate", "score", "evaluate"):
                code, _, stderr = self.run_srood(stage, out=out)
                self.assertEqual(code, 0, f"{stage}: {stderr}")
        for name in ("scores.csv", "report.csv", "repairer.ckpt", "phi.ckpt", "threshold.txt", "erosion.txt"):
            self.assertEqual(
                (self.root / "first" / name).read_bytes(), (self.root / "second" / name).read_bytes(), name
            )
        report = (self.root / "first" / "report.csv").read_text().splitlines()
        self.assertEqual(len(report), 4)
        self.assertEqual({line.split(",")[2] for line in report[1:]}, {"sr", "msp", "maxlogit"})

        for stage in ("report", "diagnose"):
            code, _, stderr = self.run_srood(stage, out="first")
            self.assertEqual(code, 0, f"{stage}: {stderr}")
        self.assertTrue((self.root / "first" / "grid_squares.png").is_file())
        self.assertTrue((self.root / "first" / "diagnostics.csv").is_file())

        code, _, stderr = self.run_srood("ablate", "--kind", "loss", out="first")
        self.assertEqual(code, 0, stderr)
        header = (self.root / "first" / "ablation_loss.csv").read_text().splitlines()[0]
        self.assertEqual(header, "ood_dataset,L2,L2+LPIPS,LPIPS")

    def test_offset_ablation_needs_inpaint_checkpoint(self):
        for stage in ("fit-phi", "train"):
            self.assertEqual(self.run_srood(stage)[0], 0)
        code, _, stderr = self.run_srood("ablate", "--kind", "offset")
        self.assertEqual(code, 3)
        self.assertIn("variant=inpaint", stderr)


@override_settings(SROOD_DATA_ROOT=None, SROOD_NUM_WORKERS=1)
class OffsetAblationCommandTests(SimpleTestCase):
    def test_offsets_at_32(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            build_corpus(root / "data", size=32, counts={
                "train": 4, "val-id": 2, "test-id": 4, "val-ood": 2, "test-ood": 4,
            })
            config = root / "experiment.txt"
            config.write_text(
                TINY_CONFIG.replace("8x8", "32x32").replace("variant = sr", "variant = inpaint"),
                encoding="utf-8",
            )
            argv = ["--config", str(config), "--out", str(root / "out")]
            for stage in ("fit-phi", "train", "select-erosion"):
                self.assertEqual(run_command([stage, *argv], io.StringIO(), io.StringIO()), 0, stage)
            self.assertEqual(run_command(["ablate", "--kind", "offset", *argv], io.StringIO(), io.StringIO()), 0)
            header = (root / "out" / "ablation_offset.csv").read_text().splitlines()[0]
            self.assertEqual(header, "ood_dataset,offset=0,offset=4,offset=8")
