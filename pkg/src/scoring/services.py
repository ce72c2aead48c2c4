"""
Scoring Service Layer

This module provides the test stage: the OOD score of an input (perceptual
distance between the input and its repaired erosion), the threshold
decision, threshold calibration on ID validation scores and the selection
of the test-time erosion map on the validation splits.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from django.core.exceptions import ValidationError

from erosion.services import ErosionOp, ErosionSet, apply_erosion_batch
from evaluation.roc import auroc
from metrics.networks import PerceptualExtractor
from metrics.services import (
    L2_SCORE,
    LPIPS_SCORE,
    SCORE_FUNCTIONS,
    LossWeights,
    l2_per_sample,
    lpips_per_sample,
)
from repairer.networks import RepairerModel
from repairer.services import INFERENCE_BATCH, check_images, images_to_tensor, model_dtype

logger = logging.getLogger(__name__)

FIXED = "fixed"
ID_QUANTILE = "id-quantile"
THRESHOLD_METHODS = (FIXED, ID_QUANTILE)

SCORE_COLUMNS = ["sample_id", "split", "score", "decision", "erosion_id"]


@dataclass(frozen=True)
class ThresholdSpec:
    method: str = ID_QUANTILE
    epsilon: float = 0.0
    quantile: float = 0.95

    def __post_init__(self):
        if self.method not in THRESHOLD_METHODS:
            raise ValidationError(f"unknown threshold method: {self.method}", code="invalid_threshold")
        if self.method == ID_QUANTILE and not 0.0 < self.quantile <= 1.0:
            raise ValidationError(
                f"quantile must lie in (0, 1], got {self.quantile}", code="invalid_threshold"
            )


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: int
    split: str
    score: float
    erosion_id: str
    decision: Optional[bool] = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValidationError(f"non-finite score for sample {self.sample_id}", code="non_finite_score")

    def as_row(self) -> List[str]:
        decision = "" if self.decision is None else str(int(self.decision))
        return [str(self.sample_id), self.split, repr(float(self.score)), decision, self.erosion_id]


@dataclass
class ErosionSelection:
    op: ErosionOp
    index: int
    aurocs: List[Optional[float]] = field(default_factory=list)
    criteria: List[Optional[float]] = field(default_factory=list)
    label_free: bool = False


@torch.no_grad()
def score_batch(
    model: RepairerModel,
    phi: PerceptualExtractor,
    op: ErosionOp,
    images: np.ndarray,
    score_fn: str = LPIPS_SCORE,
    weights: Optional[LossWeights] = None,
    batch_size: int = INFERENCE_BATCH,
) -> np.ndarray:
    """Scores of R(T(x)) against x for a stack of images, in input order."""
    if score_fn not in SCORE_FUNCTIONS:
        raise ValidationError(f"unknown score function: {score_fn}", code="invalid_score_fn")
    weights = weights or LossWeights()
    images = check_images(model, images)
    if len(images) == 0:
        return np.zeros(0, dtype=np.float64)
    dtype = model_dtype(model)
    eroded = apply_erosion_batch(op, images)

    scores = []
    for start in range(0, len(images), batch_size):
        originals = images_to_tensor(images[start:start + batch_size], dtype)
        repaired = model(images_to_tensor(eroded[start:start + batch_size], dtype))
        if score_fn == L2_SCORE:
            chunk = l2_per_sample(repaired, originals)
        elif score_fn == LPIPS_SCORE:
            chunk = lpips_per_sample(phi, repaired, originals)
        else:
            chunk = weights.combine(
                l2_per_sample(repaired, originals), lpips_per_sample(phi, repaired, originals)
            )
        scores.append(chunk.to(torch.float64))
    return torch.cat(scores).numpy()


def ood_score(model: RepairerModel, phi: PerceptualExtractor, op: ErosionOp, x: np.ndarray) -> float:
    """S(x) = LPIPS(R(T(x)), x)."""
    return float(score_batch(model, phi, op, x[None] if np.ndim(x) == 3 else x)[0])


def classify_ood(score: float, epsilon: float) -> bool:
    """δ = 1 iff the score strictly exceeds ε."""
    if not np.isfinite(score):
        raise ValidationError("non-finite score", code="non_finite_score")
    return bool(score > epsilon)


def calibrate_threshold(id_val_scores: Sequence[float], spec: ThresholdSpec) -> float:
    if spec.method == FIXED:
        return float(spec.epsilon)
    scores = np.asarray(id_val_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("cannot calibrate a threshold on empty scores", code="empty_scores")
    epsilon = float(np.quantile(scores, spec.quantile, method="lower"))
    logger.info(f"Calibrated threshold {epsilon:.6g} at ID quantile {spec.quantile} over {scores.size} scores")
    return epsilon


def _mean_square_over_variance(scores: np.ndarray) -> Optional[float]:
    variance = float(np.var(scores))
    if variance <= 0.0:
        return None
    return float(np.mean(scores) ** 2 / variance)


def best_erosion_index(values: List[Optional[float]]) -> Optional[int]:
    """Position of the largest defined value, ties to the lowest position."""
    best = None
    for position, value in enumerate(values):
        if value is not None and (best is None or value > values[best]):
            best = position
    return best


def select_erosion(
    model: RepairerModel,
    phi: PerceptualExtractor,
    erosion_set: ErosionSet,
    val_id: np.ndarray,
    val_ood: Optional[np.ndarray],
    score_fn: str = LPIPS_SCORE,
    weights: Optional[LossWeights] = None,
    label_free: bool = False,
) -> ErosionSelection:
    """
    Choose the test-time erosion map T*.

    Picks the op with the highest validation AUROC, ties to the lowest
    index. In label-free mode no OOD data is used: the op maximising
    mean²/var of the ID validation scores wins.
    """
    if len(erosion_set) == 1:
        return ErosionSelection(erosion_set[0], 0, label_free=label_free)
    if val_id is None or len(val_id) == 0:
        raise ValidationError("val-id split is empty", code="empty_split")
    if not label_free and (val_ood is None or len(val_ood) == 0):
        raise ValidationError("val-ood split is empty", code="empty_split")

    selection = ErosionSelection(erosion_set[0], 0, label_free=label_free)
    for op in erosion_set:
        id_scores = score_batch(model, phi, op, val_id, score_fn, weights)
        if label_free:
            value = _mean_square_over_variance(id_scores)
            selection.criteria.append(value)
            selection.aurocs.append(None)
        else:
            ood_scores = score_batch(model, phi, op, val_ood, score_fn, weights)
            try:
                value = auroc(id_scores, ood_scores)
            except ValidationError as exc:
                logger.warning(f"AUROC undefined for {op.op_id}: {exc.messages[0]}")
                value = None
            selection.aurocs.append(value)
            selection.criteria.append(value)
        logger.info(f"Erosion {op.op_id}: {'criterion' if label_free else 'val AUROC'} {value}")

    best = best_erosion_index(selection.criteria)
    if best is None:
        raise ValidationError("selection criterion undefined for every erosion op", code="undefined_auroc")
    selection.op, selection.index = erosion_set[best], best
    return selection


def build_records(
    indices: Sequence[int],
    split: str,
    scores: Sequence[float],
    op: ErosionOp,
    epsilon: Optional[float] = None,
) -> List[ScoreRecord]:
    if len(indices) != len(scores):
        raise ValidationError(f"{len(scores)} scores for {len(indices)} samples", code="shape_mismatch")
    return [
        ScoreRecord(
            int(index), split, float(score), op.op_id,
            None if epsilon is None else classify_ood(float(score), epsilon),
        )
        for index, score in zip(indices, scores)
    ]


def write_score_file(path: Union[str, Path], records: Sequence[ScoreRecord]) -> Path:
    """Score CSV in the given record order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for record in records:
            writer.writerow(record.as_row())
    return path


def read_score_file(path: Union[str, Path]) -> List[ScoreRecord]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing score file: {path}", code="missing_artifact")
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != SCORE_COLUMNS:
            raise ValidationError(f"unexpected score file header in {path}", code="malformed_row")
        return [
            ScoreRecord(
                int(row["sample_id"]), row["split"], float(row["score"]), row["erosion_id"],
                None if row["decision"] == "" else row["decision"] == "1",
            )
            for row in reader
        ]


class ScoringService:
    """Scores manifest splits with a fixed model, φ and erosion map."""

    def __init__(
        self,
        model: RepairerModel,
        phi: PerceptualExtractor,
        op: ErosionOp,
        score_fn: str = LPIPS_SCORE,
        weights: Optional[LossWeights] = None,
        batch_size: int = INFERENCE_BATCH,
    ):
        self.model = model
        self.phi = phi
        self.op = op
        self.score_fn = score_fn
        self.weights = weights or LossWeights()
        self.batch_size = batch_size

    def scores(self, images: np.ndarray) -> np.ndarray:
        return score_batch(self.model, self.phi, self.op, images, self.score_fn, self.weights, self.batch_size)

    def records(self, loader, split: str, source: Optional[str] = None, epsilon: Optional[float] = None) -> List[ScoreRecord]:
        batch = loader.split(split, source)
        scores = self.scores(batch.images)
        logger.info(f"Scored {len(batch)} samples of {split}{'/' + source if source else ''} with {self.op.op_id}")
        return build_records(batch.indices, split, scores, self.op, epsilon)


