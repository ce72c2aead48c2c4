import sys

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand

from datasets.services import ManifestPlan
from evaluation.services import ABLATION_KINDS
from experiments.cli import ExperimentError, run_command
from experiments.config import load_experiment_config
from experiments.services import ExperimentService


def _named_corpus(raw: str):
    name, sep, path = raw.partition("=")
    if not sep or not name or not path:
        raise ValueError(f"expected NAME=PATH, got {raw!r}")
    return name, path


class Command(BaseCommand):
    help = "Run one stage of the erode-repair-score OOD pipeline"
    requires_system_checks = []

    def run_from_argv(self, argv):
        sys.exit(run_command(argv[2:]))

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest="stage", required=True, metavar="subcommand")

        def add_stage(name, help_text):
            stage = subparsers.add_parser(name, help=help_text)
            stage.add_argument("--config", help="flat key = value experiment config")
            stage.add_argument("--seed", type=int, help="override experiment.seed")
            stage.add_argument("--out", help="override experiment.out_dir")
            return stage

        add_stage("fit-phi", "fit the perceptual feature extractor on the ID train split")
        add_stage("train", "train the repairer on eroded ID images")
        add_stage("select-erosion", "choose the test-time erosion map on validation data")
        add_stage("calibrate", "set the decision threshold from val-id scores")
        add_stage("score", "score the test splits")
        add_stage("evaluate", "score the test splits and write the AUROC report")
        add_stage("report", "rebuild the report from scores.csv with image grids")
        add_stage("diagnose", "decoder Lipschitz and latent displacement diagnostics")

        ablate = add_stage("ablate", "loss, mask-offset or variant ablation")
        ablate.add_argument("--kind", required=True, choices=ABLATION_KINDS)

        manifest = add_stage("manifest", "build a split manifest from image corpora")
        manifest.add_argument("--id-corpus", required=True, help="PNG directory or IDX file")
        manifest.add_argument("--id-labels", help="IDX label file for the ID corpus")
        manifest.add_argument(
            "--ood", action="append", default=[], type=_named_corpus, metavar="NAME=PATH",
            help="OOD corpus, repeatable",
        )
        manifest.add_argument("--vflip", action="store_true", help="add vertically flipped ID images as OOD")
        manifest.add_argument("--id-limit", type=int)
        manifest.add_argument("--ood-limit", type=int)
        manifest.add_argument("--manifest-out", help="defaults to experiment.manifest")

    def handle(self, *args, **options):
        stage = options["stage"]
        try:
            config = load_experiment_config(options["config"], options["seed"], options["out"])
            service = ExperimentService(config)
            if stage == "ablate":
                table = service.ablate(options["kind"])
                self.stdout.write(f"ablation {table.kind}: {len(table.rows)} rows")
            elif stage == "manifest":
                plan = ManifestPlan(
                    id_corpus=options["id_corpus"],
                    ood_corpora=dict(options["ood"]),
                    id_labels=options["id_labels"],
                    id_limit=options["id_limit"],
                    ood_limit=options["ood_limit"],
                    vflip_source=options["vflip"],
                    seed=config.seed,
                )
                manifest = service.build_manifest(plan, options["manifest_out"])
                self.stdout.write(f"manifest: {len(manifest)} entries")
            else:
                self._run_stage(service, stage)
        except ValidationError as exc:
            raise ExperimentError.from_validation(exc)

    def _run_stage(self, service: ExperimentService, stage: str) -> None:
        if stage == "fit-phi":
            service.fit_phi()
        elif stage == "train":
            service.train()
        elif stage == "select-erosion":
            op = service.select_erosion()
            self.stdout.write(f"erosion: {op.op_id}")
        elif stage == "calibrate":
            self.stdout.write(f"epsilon: {service.calibrate()!r}")
        elif stage == "score":
            records = service.score()
            self.stdout.write(f"scored {len(records)} samples")
        elif stage in ("evaluate", "report"):
            report = getattr(service, stage)()
            for row in report.rows:
                self.stdout.write(f"{row.id_dataset} vs {row.ood_dataset} [{row.variant}]: AUROC {row.auroc:.4f}")
        elif stage == "diagnose":
            result = service.diagnose()
            self.stdout.write(f"ood/id latent displacement ratio: {result['ratio']}")
        self.stdout.write(self.style.SUCCESS(f"{stage} done"))
