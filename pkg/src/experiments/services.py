"""
Experiment Service Layer

This module wires the pipeline stages to their on-disk artifacts. Each
stage reads its prerequisites from the run's output directory, fails with
a ``missing_checkpoint`` / ``missing_artifact`` error when one is absent,
and writes its own outputs next to the resolved config.
"""

import csv
import logging
import time
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from django.conf import settings
from django.core.exceptions import ValidationError

from core.seeding import numpy_rng, torch_generator
from datasets.services import (
    TEST_ID,
    TEST_OOD,
    TRAIN,
    VAL_ID,
    VAL_OOD,
    ImageLoader,
    ManifestPlan,
    load_manifest,
    write_manifest,
)
from erosion.services import ErosionOp, ErosionSet, apply_erosion_batch, build_erosion_set
from evaluation.reports import GridTriplet, emit_report, write_ablation, write_diagnostics
from evaluation.roc import auroc
from evaluation.services import (
    OFFSET_ABLATION,
    VARIANT_ABLATION,
    AblationContext,
    AblationTable,
    EvalReport,
    EvalRow,
    PairResult,
    amplification_ratio,
    check_acceptance,
    evaluate_pair,
    lipschitz_diagnostics,
    run_ablation,
)
from metrics.networks import IDENTITY_MODE, PerceptualExtractor
from metrics.services import fit_phi, init_phi
from repairer.networks import RepairerModel
from repairer.services import init_model, repair_batch
from scoring.baselines import baseline_scores, fit_baseline_head
from scoring.services import (
    ScoreRecord,
    ScoringService,
    calibrate_threshold,
    read_score_file,
    select_erosion,
    write_score_file,
)
from training.services import (
    checkpoint_meta,
    load_phi,
    load_repairer,
    save_phi,
    save_repairer,
    train_repairer,
    write_trace,
)
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

PHI_CHECKPOINT = "phi.ckpt"
REPAIRER_CHECKPOINT = "repairer.ckpt"
EROSION_FILE = "erosion.txt"
SELECTION_FILE = "erosion_selection.csv"
THRESHOLD_FILE = "threshold.txt"
SCORES_FILE = "scores.csv"
TRACE_FILE = "train_trace.csv"
PHI_TRACE_FILE = "phi_trace.csv"


class ExperimentService:
    """
    One experiment run rooted at ``config.out_dir``.

    Every stage method writes the resolved config first, so each output
    directory records what produced it.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out_dir = config.out_dir
        torch.set_num_threads(settings.SROOD_TORCH_THREADS)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def begin(self, stage: str) -> float:
        self.config.write_resolved(self.out_dir)
        logger.info(f"[{stage}] seed={self.config.seed} config={self.config.config_hash} out={self.out_dir}")
        return time.monotonic()

    def finish(self, stage: str, started: float) -> None:
        logger.info(f"[{stage}] finished in {time.monotonic() - started:.1f}s")

    @cached_property
    def manifest(self):
        return load_manifest(self.config.manifest)

    @cached_property
    def loader(self) -> ImageLoader:
        return ImageLoader(self.manifest, self.config.resolution, self.config.channels)

    @cached_property
    def erosion_set(self) -> ErosionSet:
        return build_erosion_set(self.config.variant, self.config.resolution)

    # artifacts

    def load_phi(self) -> PerceptualExtractor:
        path = self.path(PHI_CHECKPOINT)
        if not path.is_file() and self.config.phi.mode == IDENTITY_MODE:
            return init_phi(self.config.phi, self.config.seed).freeze()
        if not path.is_file():
            raise ValidationError(f"missing checkpoint: {path} (run fit-phi first)", code="missing_checkpoint")
        return load_phi(path)

    def load_model(self) -> RepairerModel:
        path = self.path(REPAIRER_CHECKPOINT)
        if not path.is_file():
            raise ValidationError(f"missing checkpoint: {path} (run train first)", code="missing_checkpoint")
        return load_repairer(path)

    def selected_op(self) -> ErosionOp:
        path = self.path(EROSION_FILE)
        if path.is_file():
            return ErosionOp.from_id(path.read_text(encoding="utf-8"))
        if len(self.erosion_set) == 1:
            return self.erosion_set[0]
        raise ValidationError(
            f"missing erosion selection: {path} (run select-erosion first)", code="missing_artifact"
        )

    def epsilon(self) -> Optional[float]:
        path = self.path(THRESHOLD_FILE)
        return float(path.read_text(encoding="utf-8")) if path.is_file() else None

    def scorer(self, model: RepairerModel, phi: PerceptualExtractor, op: ErosionOp) -> ScoringService:
        return ScoringService(
            model, phi, op, self.config.score_fn, self.config.loss, self.config.get("scoring.batch_size", int)
        )

    # stages

    def fit_phi(self) -> PerceptualExtractor:
        started = self.begin("fit-phi")
        phi = fit_phi(self.manifest, self.config.phi, self.config.seed, self.loader)
        save_phi(phi, self.path(PHI_CHECKPOINT))
        with open(self.path(PHI_TRACE_FILE), "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["iteration", "loss"])
            writer.writerows((i, repr(v)) for i, v in enumerate(phi.fit_trace, start=1))
        self.finish("fit-phi", started)
        return phi

    def train(self, phi: Optional[PerceptualExtractor] = None) -> RepairerModel:
        started = self.begin("train")
        phi = phi or self.load_phi()
        model = init_model(self.config.repairer, torch_generator(self.config.seed, "init"))
        model, trace = train_repairer(
            model, self.manifest, self.erosion_set, phi, self.config.loss, self.config.train,
            loader=self.loader, state_dir=self.out_dir,
        )
        save_repairer(model, self.path(REPAIRER_CHECKPOINT), {"variant": self.config.variant, "seed": self.config.seed})
        write_trace(self.path(TRACE_FILE), trace)
        self.finish("train", started)
        return model

    def select_erosion(self, model: Optional[RepairerModel] = None, phi: Optional[PerceptualExtractor] = None) -> ErosionOp:
        started = self.begin("select-erosion")
        model = model or self.load_model()
        phi = phi or self.load_phi()
        label_free = self.config.flag("scoring.label_free_selection")
        val_ood = None if label_free else self.loader.split(VAL_OOD).images
        selection = select_erosion(
            model, phi, self.erosion_set, self.loader.split(VAL_ID).images, val_ood,
            self.config.score_fn, self.config.loss, label_free,
        )
        self.path(EROSION_FILE).write_text(selection.op.op_id + "\n", encoding="utf-8")
        with open(self.path(SELECTION_FILE), "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["position", "erosion_id", "val_auroc", "criterion", "selected"])
            for position, op in enumerate(self.erosion_set):
                value = selection.aurocs[position] if position < len(selection.aurocs) else None
                criterion = selection.criteria[position] if position < len(selection.criteria) else None
                writer.writerow([
                    position, op.op_id,
                    "" if value is None else f"{value:.6f}",
                    "" if criterion is None else f"{criterion:.6f}",
                    int(position == selection.index),
                ])
        logger.info(f"Selected erosion {selection.op.op_id}")
        self.finish("select-erosion", started)
        return selection.op

    def calibrate(self) -> float:
        started = self.begin("calibrate")
        spec = self.config.threshold
        id_scores = []
        if spec.method != "fixed":
            scorer = self.scorer(self.load_model(), self.load_phi(), self.selected_op())
            id_scores = scorer.scores(self.loader.split(VAL_ID).images)
        epsilon = calibrate_threshold(id_scores, spec)
        self.path(THRESHOLD_FILE).write_text(f"{epsilon!r}\n", encoding="utf-8")
        self.finish("calibrate", started)
        return epsilon

    def score(self) -> List[ScoreRecord]:
        started = self.begin("score")
        model = self.load_model()
        scorer = self.scorer(model, self.load_phi(), self.selected_op())
        epsilon = self.epsilon()
        records = scorer.records(self.loader, TEST_ID, epsilon=epsilon)
        records += scorer.records(self.loader, TEST_OOD, epsilon=epsilon)
        write_score_file(self.path(SCORES_FILE), records)
        self.finish("score", started)
        return records

    def _pairs(self, scorer: ScoringService, epsilon: Optional[float]) -> List[PairResult]:
        if not self.manifest.sources(TEST_OOD):
            raise ValidationError(f"split '{TEST_OOD}' is empty", code="empty_split")
        return [
            evaluate_pair(
                scorer, self.loader, TEST_ID, TEST_OOD, epsilon,
                ood_source=source, variant=self.config.variant, seed=self.config.seed,
            )
            for source in self.manifest.sources(TEST_OOD)
        ]

    def _report(self) -> EvalReport:
        return EvalReport(metadata={
            "config_hash": self.config.config_hash,
            "seed": str(self.config.seed),
            "manifest": str(self.config.manifest),
            "split_counts": " ".join(f"{k}:{v}" for k, v in self.manifest.split_counts().items()),
        })

    def _baseline_rows(self, phi: PerceptualExtractor) -> List[EvalRow]:
        train = self.loader.split(TRAIN)
        labels = [self.manifest[i].label for i in train.indices]
        head = fit_baseline_head(
            phi, train.images, labels, self.config.seed,
            self.config.get("baseline.n_iter", int), self.config.get("baseline.learning_rate", float),
        )
        test_id = self.loader.split(TEST_ID)
        id_msp, id_max_logit = baseline_scores(head, phi, test_id.images)
        rows = []
        for source in self.manifest.sources(TEST_OOD):
            ood = self.loader.split(TEST_OOD, source)
            ood_msp, ood_max_logit = baseline_scores(head, phi, ood.images)
            for name, id_scores, ood_scores in (("msp", id_msp, ood_msp), ("maxlogit", id_max_logit, ood_max_logit)):
                rows.append(EvalRow(
                    "+".join(self.manifest.sources(TEST_ID)), source, name, "none",
                    auroc(id_scores, ood_scores), len(id_scores), len(ood_scores), self.config.seed,
                ))
        return rows

    def evaluate(self) -> EvalReport:
        started = self.begin("evaluate")
        model, phi = self.load_model(), self.load_phi()
        scorer = self.scorer(model, phi, self.selected_op())
        pairs = self._pairs(scorer, self.epsilon())

        report = self._report()
        records = [r for r in pairs[0].records if r.split == TEST_ID]
        for pair in pairs:
            report.add(pair)
            records += [r for r in pair.records if r.split == TEST_OOD]
        write_score_file(self.path(SCORES_FILE), records)

        if self.config.flag("scoring.baselines"):
            if self.manifest.has_labels(TRAIN):
                report.rows.extend(self._baseline_rows(phi))
            else:
                logger.warning("Skipping MSP/MaxLogit baselines: the train split has no labels")
        emit_report(report, self.out_dir, bins=self.config.get("report.histogram_bins", int))
        self.finish("evaluate", started)
        return report

    def report(self) -> EvalReport:
        """Rebuild the report from ``scores.csv`` and add image grids."""
        started = self.begin("report")
        model = self.load_model()
        op = self.selected_op()
        records = read_score_file(self.path(SCORES_FILE))
        by_id = {r.sample_id: r for r in records}

        report = self._report()
        id_indices = [i for i in self.manifest.split_indices(TEST_ID) if i in by_id]
        id_scores = np.array([by_id[i].score for i in id_indices])
        id_name = "+".join(self.manifest.sources(TEST_ID))
        for source in self.manifest.sources(TEST_OOD):
            ood_scores = np.array([
                by_id[i].score for i in self.manifest.split_indices(TEST_OOD, source) if i in by_id
            ])
            if not len(id_scores) or not len(ood_scores):
                raise ValidationError(f"{SCORES_FILE} lacks scores for {source}", code="missing_artifact")
            report.add(PairResult(
                EvalRow(id_name, source, self.config.variant, op.op_id, auroc(id_scores, ood_scores),
                        len(id_scores), len(ood_scores), self.config.seed),
                [], id_scores, ood_scores,
            ))

        grids = self._grids(model, op, [(id_name, TEST_ID, None)] + [
            (source, TEST_OOD, source) for source in self.manifest.sources(TEST_OOD)
        ])
        emit_report(report, self.out_dir, grids, self.config.get("report.histogram_bins", int))
        self.finish("report", started)
        return report

    def _grids(self, model: RepairerModel, op: ErosionOp, datasets: List[Tuple[str, str, Optional[str]]]) -> List[GridTriplet]:
        count = self.config.get("report.grid_samples", int)
        if count == 0:
            return []
        grids = []
        for name, split, source in datasets:
            indices = self.manifest.split_indices(split, source)[:count]
            originals = self.loader.images(indices)
            eroded = apply_erosion_batch(op, originals)
            grids.append(GridTriplet(name, originals, eroded, repair_batch(model, eroded)))
        return grids

    def ablate(self, kind: str) -> AblationTable:
        started = self.begin(f"ablate-{kind}")
        context = AblationContext(
            loader=self.loader, weights=self.config.loss, seeds=self.config.seeds,
        )
        if kind == VARIANT_ABLATION:
            context.phi = self.load_phi()
            context.variant_runner = self._variant_runner(context.phi)
        else:
            context.phi = self.load_phi()
            context.model = self.load_model()
            if kind == OFFSET_ABLATION:
                meta = checkpoint_meta(self.path(REPAIRER_CHECKPOINT))
                if meta.get("variant") != "inpaint":
                    raise ValidationError(
                        "missing checkpoint: offset ablation needs a repairer trained with variant=inpaint",
                        code="missing_checkpoint",
                    )
                context.inpaint_model = context.model
            context.op = self.selected_op()
        table = run_ablation(kind, context)
        write_ablation(table, self.out_dir, check_acceptance({kind: table}))
        self.finish(f"ablate-{kind}", started)
        return table

    def _variant_runner(self, phi: PerceptualExtractor):
        def run(variant: str, seed: int) -> Dict[str, float]:
            child = ExperimentService(self.config.with_values(
                experiment__variant=variant,
                experiment__seed=str(seed),
                experiment__out_dir=str(self.out_dir / "ablation_variant" / variant / f"seed{seed}"),
            ))
            model = child.train(phi)
            op = child.select_erosion(model, phi)
            scorer = child.scorer(model, phi, op)
            return {pair.row.ood_dataset: pair.row.auroc for pair in child._pairs(scorer, None)}
        return run

    def diagnose(self) -> Dict[str, object]:
        started = self.begin("diagnose")
        model, phi, op = self.load_model(), self.load_phi(), self.selected_op()
        count = self.config.get("diagnose.samples", int)
        stats = {}
        datasets = [(TEST_ID, None, TEST_ID)] + [
            (TEST_OOD, source, f"{TEST_OOD}:{source}") for source in self.manifest.sources(TEST_OOD)
        ]
        for position, (split, source, label) in enumerate(datasets):
            indices = self.manifest.split_indices(split, source)
            rng = numpy_rng(self.config.seed, "probe", position)
            chosen = sorted(rng.choice(len(indices), size=min(count, len(indices)), replace=False))
            stats[label] = lipschitz_diagnostics(
                model, phi, op, self.loader.images([indices[i] for i in chosen]), rng,
                n_probes=self.config.get("diagnose.n_probes", int),
                refine_steps=self.config.get("diagnose.refine_steps", int),
            )
        ood_labels = [label for label in stats if label != TEST_ID]
        ratios = [amplification_ratio(stats[TEST_ID], stats[label]) for label in ood_labels]
        defined = [r for r in ratios if r is not None]
        ratio = float(np.mean(defined)) if defined else None
        write_diagnostics(self.out_dir, stats, ratio)
        self.finish("diagnose", started)
        return {"stats": stats, "ratio": ratio}

    def build_manifest(self, plan: ManifestPlan, out_path: Optional[Path] = None):
        started = self.begin("manifest")
        out_path = out_path or self.config.manifest
        manifest = write_manifest(out_path, plan, numpy_rng(self.config.seed, "split"))
        self.finish("manifest", started)
        return manifest
