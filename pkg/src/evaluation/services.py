"""
Evaluation Service Layer

This module provides the ID/OOD pair evaluation, the loss, mask-offset and
variant ablations, and the Lipschitz diagnostics of the decoder. Reports
are written by :mod:`evaluation.reports`.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from django.core.exceptions import ValidationError
from torch.autograd.functional import jvp, vjp

from core.seeding import as_torch_generator
from datasets.services import TEST_ID, TEST_OOD, ImageBatch, ImageLoader
from erosion.services import (
    BLACKOUT,
    VARIANTS,
    ErosionOp,
    apply_erosion_batch,
    centered_blackout,
    mask_offsets,
)
from metrics.networks import PerceptualExtractor
from metrics.services import COMBINED_SCORE, L2_SCORE, LPIPS_SCORE, LossWeights, lpips_per_sample
from repairer.networks import RepairerModel
from repairer.services import check_images, images_to_tensor, model_dtype
from scoring.services import ScoreRecord, ScoringService
from .roc import auroc

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["id_dataset", "ood_dataset", "variant", "erosion", "auroc", "n_id", "n_ood", "seed"]

LOSS_ABLATION = "loss"
OFFSET_ABLATION = "offset"
VARIANT_ABLATION = "variant"
ABLATION_KINDS = (LOSS_ABLATION, OFFSET_ABLATION, VARIANT_ABLATION)

LOSS_COLUMNS = {"L2": L2_SCORE, "L2+LPIPS": COMBINED_SCORE, "LPIPS": LPIPS_SCORE}

PROBE_SIGMA = 1e-3


@dataclass(frozen=True)
class EvalRow:
    id_dataset: str
    ood_dataset: str
    variant: str
    erosion: str
    auroc: float
    n_id: int
    n_ood: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.auroc <= 1.0:
            raise ValidationError(f"auroc {self.auroc} outside [0, 1]", code="invalid_report")
        if self.n_id < 1 or self.n_ood < 1:
            raise ValidationError("evaluation counts must be positive", code="invalid_report")

    def as_row(self) -> List[str]:
        return [
            self.id_dataset, self.ood_dataset, self.variant, self.erosion,
            f"{self.auroc:.6f}", str(self.n_id), str(self.n_ood), str(self.seed),
        ]


@dataclass
class PairResult:
    row: EvalRow
    records: List[ScoreRecord]
    id_scores: np.ndarray
    ood_scores: np.ndarray


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)
    scores: Dict[Tuple[str, str], Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, result: PairResult) -> None:
        self.rows.append(result.row)
        self.scores[(result.row.id_dataset, result.row.ood_dataset)] = (result.id_scores, result.ood_scores)


def evaluate_pair(
    scorer: ScoringService,
    loader: ImageLoader,
    id_split: str = TEST_ID,
    ood_split: str = TEST_OOD,
    epsilon: Optional[float] = None,
    id_source: Optional[str] = None,
    ood_source: Optional[str] = None,
    variant: str = "",
    seed: int = 0,
) -> PairResult:
    """
    Score both splits with the scorer's fixed erosion map and compute AUROC.

    Records come back in manifest order, ID split first.
    """
    if tuple(loader.resolution) != tuple(scorer.model.config.resolution):
        raise ValidationError(
            f"loader resolution {loader.resolution} does not match model resolution "
            f"{scorer.model.config.resolution}",
            code="shape_mismatch",
        )
    manifest = loader.manifest
    if not manifest.split_indices(id_split, id_source):
        raise ValidationError(f"split '{id_split}' is empty", code="empty_split")
    if not manifest.split_indices(ood_split, ood_source):
        raise ValidationError(f"split '{ood_split}' is empty", code="empty_split")

    id_records = scorer.records(loader, id_split, id_source, epsilon)
    ood_records = scorer.records(loader, ood_split, ood_source, epsilon)
    id_scores = np.array([r.score for r in id_records])
    ood_scores = np.array([r.score for r in ood_records])
    row = EvalRow(
        id_dataset=id_source or "+".join(manifest.sources(id_split)),
        ood_dataset=ood_source or "+".join(manifest.sources(ood_split)),
        variant=variant,
        erosion=scorer.op.op_id,
        auroc=auroc(id_scores, ood_scores),
        n_id=len(id_scores),
        n_ood=len(ood_scores),
        seed=seed,
    )
    logger.info(f"{row.id_dataset} vs {row.ood_dataset} ({row.erosion}): AUROC {row.auroc:.4f}")
    return PairResult(row, id_records + ood_records, id_scores, ood_scores)


@dataclass
class AblationTable:
    kind: str
    columns: List[str]
    rows: List[Tuple[str, List[float]]] = field(default_factory=list)
    details: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)

    def column(self, name: str) -> List[float]:
        position = self.columns.index(name)
        return [values[position] for _, values in self.rows]


@dataclass
class AblationContext:
    """What an ablation may need; each kind names the pieces it is missing."""
    loader: Optional[ImageLoader] = None
    model: Optional[RepairerModel] = None
    phi: Optional[PerceptualExtractor] = None
    op: Optional[ErosionOp] = None
    weights: LossWeights = field(default_factory=LossWeights)
    id_split: str = TEST_ID
    ood_split: str = TEST_OOD
    inpaint_model: Optional[RepairerModel] = None
    mask_side: Optional[int] = None
    variant_runner: Optional[Callable[[str, int], Dict[str, float]]] = None
    seeds: Sequence[int] = (0,)
    variants: Sequence[str] = VARIANTS


def summarize_seeds(values: Sequence[float]) -> float:
    """Median over seeds."""
    if not len(values):
        raise ValidationError("no seed results to summarise", code="empty_scores")
    return float(np.median(np.asarray(values, dtype=np.float64)))


def _require(context: AblationContext, kind: str, *names: str) -> None:
    missing = [name for name in names if getattr(context, name) is None]
    if missing:
        raise ValidationError(
            f"{kind} ablation is missing prerequisites: {', '.join(missing)}", code="missing_checkpoint"
        )


def _source_aurocs(context: AblationContext, scorer: ScoringService) -> List[Tuple[str, float]]:
    loader = context.loader
    id_scores = scorer.scores(loader.split(context.id_split).images)
    results = []
    for source in loader.manifest.sources(context.ood_split):
        ood_scores = scorer.scores(loader.split(context.ood_split, source).images)
        results.append((source, auroc(id_scores, ood_scores)))
    if not results:
        raise ValidationError(f"split '{context.ood_split}' is empty", code="empty_split")
    return results


def _table_from_columns(kind: str, columns: Dict[str, List[Tuple[str, float]]]) -> AblationTable:
    names = list(columns)
    sources = [source for source, _ in columns[names[0]]]
    table = AblationTable(kind, names)
    for position, source in enumerate(sources):
        table.rows.append((source, [columns[name][position][1] for name in names]))
    return table


def _loss_ablation(context: AblationContext) -> AblationTable:
    _require(context, LOSS_ABLATION, "loader", "model", "phi", "op")
    columns = {
        label: _source_aurocs(
            context, ScoringService(context.model, context.phi, context.op, score_fn, context.weights)
        )
        for label, score_fn in LOSS_COLUMNS.items()
    }
    return _table_from_columns(LOSS_ABLATION, columns)


def _offset_ablation(context: AblationContext) -> AblationTable:
    _require(context, OFFSET_ABLATION, "loader", "inpaint_model", "phi")
    resolution = context.inpaint_model.config.resolution
    side = context.mask_side
    if side is None:
        side = context.op.mask[0] if context.op is not None and context.op.kind == BLACKOUT else min(resolution) // 2
    columns = {}
    for offset in mask_offsets(resolution):
        op = centered_blackout(resolution, side, offset)
        scorer = ScoringService(context.inpaint_model, context.phi, op, LPIPS_SCORE, context.weights)
        columns[f"offset={offset}"] = _source_aurocs(context, scorer)
    return _table_from_columns(OFFSET_ABLATION, columns)


def _variant_ablation(context: AblationContext) -> AblationTable:
    _require(context, VARIANT_ABLATION, "variant_runner")
    details: Dict[str, Dict[str, List[float]]] = {}
    for variant in context.variants:
        for seed in context.seeds:
            for source, value in context.variant_runner(variant, seed).items():
                details.setdefault(variant, {}).setdefault(source, []).append(value)
    sources = list(details[context.variants[0]])
    table = AblationTable(VARIANT_ABLATION, list(context.variants), details=details)
    for source in sources:
        table.rows.append((source, [summarize_seeds(details[v][source]) for v in context.variants]))
    return table


def run_ablation(kind: str, context: AblationContext) -> AblationTable:
    """
    Tabulate AUROC per OOD source for one ablation.

    ``loss`` re-scores with the L2, L2+LPIPS and LPIPS score functions;
    ``offset`` re-scores an inpainting repairer with masks shifted by
    {0, S/8, S/4}; ``variant`` trains and evaluates every variant for every
    seed through ``context.variant_runner`` and reports medians.
    """
    runners = {
        LOSS_ABLATION: _loss_ablation,
        OFFSET_ABLATION: _offset_ablation,
        VARIANT_ABLATION: _variant_ablation,
    }
    if kind not in runners:
        raise ValidationError(f"unknown ablation kind: {kind}", code="invalid_ablation")
    table = runners[kind](context)
    logger.info(f"{kind} ablation: {len(table.rows)} rows x {len(table.columns)} columns")
    return table


def check_acceptance(tables: Dict[str, AblationTable]) -> Dict[str, bool]:
    """Directional checks over whichever ablation tables are available."""
    checks: Dict[str, bool] = {}
    variant = tables.get(VARIANT_ABLATION)
    if variant and {"sr", "rec"} <= set(variant.columns):
        sr, rec = variant.column("sr"), variant.column("rec")
        checks["sr_median_auroc_at_least_0.75"] = all(v >= 0.75 for v in sr)
        checks["sr_beats_rec_by_0.03"] = all(s >= r + 0.03 for s, r in zip(sr, rec))
    loss = tables.get(LOSS_ABLATION)
    if loss:
        checks["lpips_at_least_l2"] = all(
            p >= q for p, q in zip(loss.column("LPIPS"), loss.column("L2"))
        )
    offset = tables.get(OFFSET_ABLATION)
    if offset:
        checks["offset_spread_below_0.10"] = all(max(v) - min(v) < 0.10 for _, v in offset.rows)
    return checks


@dataclass
class LipschitzDiagnostics:
    lip_g_estimate: float
    delta_z_mean: float
    delta_z_max: float
    delta_x_mean: float
    delta_x_max: float
    delta_x_perceptual_mean: float
    n_samples: int

    def __post_init__(self):
        values = [v for k, v in asdict(self).items() if k != "n_samples"]
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ValidationError("non-finite activations in diagnostics", code="non_finite_activation")

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def _difference_ratio(decoder, base: torch.Tensor, direction: torch.Tensor, sigma: float) -> float:
    shifted = decoder((base + sigma * direction)[None]).reshape(-1)
    reference = decoder(base[None]).reshape(-1)
    return float((shifted - reference).norm() / sigma)


def estimate_lipschitz(
    decoder: Callable[[torch.Tensor], torch.Tensor],
    base_points: torch.Tensor,
    generator: torch.Generator,
    n_probes: int = 200,
    sigma: float = PROBE_SIGMA,
    refine_steps: int = 20,
) -> float:
    """
    Lower estimate of Lip(g) from finite differences along unit directions.

    The best random probe is refined by power iteration on JᵀJ at its base
    point (Jacobian-vector products), which drives the direction toward the
    top singular vector of the local Jacobian.
    """
    if n_probes < 1 or len(base_points) == 0:
        raise ValidationError(
            f"Lipschitz estimate needs at least one direction and one base point, got {n_probes}",
            code="invalid_value",
        )
    with torch.no_grad():
        best, best_base, best_direction = -1.0, None, None
        for probe in range(n_probes):
            base = base_points[probe % len(base_points)]
            direction = torch.randn(base.shape, generator=generator, dtype=base.dtype)
            direction = direction / direction.norm()
            ratio = _difference_ratio(decoder, base, direction, sigma)
            if ratio > best:
                best, best_base, best_direction = ratio, base, direction

    def flat(z: torch.Tensor) -> torch.Tensor:
        return decoder(z[None]).reshape(-1)

    direction = best_direction
    for _ in range(refine_steps):
        _, forward = jvp(flat, best_base, direction)
        _, backward = vjp(flat, best_base, forward)
        norm = backward.norm()
        if not torch.isfinite(norm) or norm == 0:
            break
        direction = (backward / norm).detach()
        with torch.no_grad():
            best = max(best, _difference_ratio(decoder, best_base, direction, sigma))
    return best


def lipschitz_diagnostics(
    model: RepairerModel,
    phi: PerceptualExtractor,
    op: ErosionOp,
    samples: Union[ImageBatch, np.ndarray],
    rng,
    decoder: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    n_probes: int = 200,
    sigma: float = PROBE_SIGMA,
    refine_steps: int = 20,
) -> LipschitzDiagnostics:
    """
    Empirical decoder Lipschitz estimate and latent/pixel displacement stats.

    δz is ‖f(x) - f(T(x))‖ per sample; the pixel proxy is ‖x - R(x)‖ with no
    erosion, and its perceptual counterpart LPIPS(R(x), x). ``decoder``
    replaces g for the Lipschitz probes (test doubles).
    """
    images = samples.images if isinstance(samples, ImageBatch) else samples
    images = check_images(model, images)
    if len(images) == 0:
        raise ValidationError("diagnostics need at least one sample", code="empty_split")
    dtype = model_dtype(model)

    with torch.no_grad():
        originals = images_to_tensor(images, dtype)
        eroded = images_to_tensor(apply_erosion_batch(op, images), dtype)
        latents = model.encode(originals)
        delta_z = (latents - model.encode(eroded)).norm(dim=1)
        repaired = model(originals)
        delta_x = (originals - repaired).flatten(start_dim=1).norm(dim=1)
        perceptual = lpips_per_sample(phi, repaired, originals)
        if not (torch.isfinite(latents).all() and torch.isfinite(repaired).all()):
            raise ValidationError("non-finite activations in diagnostics", code="non_finite_activation")

    lip = estimate_lipschitz(
        decoder or model.decode, latents, as_torch_generator(rng), n_probes, sigma, refine_steps
    )
    return LipschitzDiagnostics(
        lip_g_estimate=lip,
        delta_z_mean=float(delta_z.mean()),
        delta_z_max=float(delta_z.max()),
        delta_x_mean=float(delta_x.mean()),
        delta_x_max=float(delta_x.max()),
        delta_x_perceptual_mean=float(perceptual.mean()),
        n_samples=len(images),
    )


def amplification_ratio(id_stats: LipschitzDiagnostics, ood_stats: LipschitzDiagnostics) -> Optional[float]:
    """Mean OOD latent displacement over mean ID displacement."""
    if id_stats.delta_z_mean == 0:
        return None
    return ood_stats.delta_z_mean / id_stats.delta_z_mean
