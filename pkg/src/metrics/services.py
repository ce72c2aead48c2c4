"""
Metrics Service Layer

This module provides the perception network φ (fitting and feature
extraction), the perceptual (LPIPS-style) distance, the L2 loss and the
weighted training loss. Distances are computed per sample on NCHW tensors
so training, scoring and the ablations share one code path.
"""

import logging
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
from django.core.exceptions import ValidationError

from core.seeding import numpy_rng, torch_generator
from datasets.services import TRAIN, DatasetManifest, ImageLoader, sample_indices
from erosion.services import ErosionOp, apply_erosion
from repairer.networks import RepairerModel, init_fan_in_
from repairer.services import DEFAULT_DTYPE, images_to_tensor, model_dtype, tensor_to_images
from .networks import LEARNED_MODE, PerceptualExtractor, PhiConfig, ReconstructionHead

logger = logging.getLogger(__name__)

L2_SCORE = "l2"
LPIPS_SCORE = "lpips"
COMBINED_SCORE = "l2+lpips"
SCORE_FUNCTIONS = (L2_SCORE, COMBINED_SCORE, LPIPS_SCORE)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.8

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("loss weights must be nonnegative", code="invalid_weights")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValidationError("loss weights cannot both be zero", code="invalid_weights")

    def combine(self, l2, lpips):
        return self.lambda1 * l2 + self.lambda2 * lpips


@dataclass
class LossTerms:
    total: torch.Tensor
    l2: torch.Tensor
    lpips: torch.Tensor


def phi_dtype(phi: PerceptualExtractor) -> torch.dtype:
    """Parameter dtype of φ; the parameter-free identity extractor works in float64."""
    for parameter in phi.parameters():
        return parameter.dtype
    return torch.float64


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}", code="shape_mismatch"
        )


def l2_per_sample(repaired: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    _check_pair(repaired, original)
    return ((repaired - original) ** 2).flatten(start_dim=1).mean(dim=1)


def lpips_per_sample(phi: PerceptualExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over taps of the position-averaged squared distance of unit feature vectors."""
    _check_pair(a, b)
    expected = (phi.config.channels, *phi.config.resolution)
    if tuple(a.shape[1:]) != expected:
        raise ValidationError(
            f"phi expects inputs of shape {expected}, got {tuple(a.shape[1:])}",
            code="shape_mismatch",
        )
    per_tap = [
        ((fa - fb) ** 2).sum(dim=1).flatten(start_dim=1).mean(dim=1)
        for fa, fb in zip(phi(a), phi(b))
    ]
    return torch.stack(per_tap).mean(dim=0)


def loss_terms(
    phi: PerceptualExtractor,
    repaired: torch.Tensor,
    original: torch.Tensor,
    weights: LossWeights,
) -> LossTerms:
    l2 = l2_per_sample(repaired, original)
    lpips = lpips_per_sample(phi, repaired, original)
    return LossTerms(weights.combine(l2, lpips), l2, lpips)


def l2_loss(repaired: np.ndarray, original: np.ndarray) -> float:
    repaired = np.asarray(repaired, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    if repaired.shape != original.shape:
        raise ValidationError(
            f"shape mismatch: {repaired.shape} vs {original.shape}", code="shape_mismatch"
        )
    return float(np.mean((repaired - original) ** 2))


@torch.no_grad()
def lpips_distance(phi: PerceptualExtractor, a: np.ndarray, b: np.ndarray) -> float:
    dtype = phi_dtype(phi)
    return float(lpips_per_sample(phi, images_to_tensor(a, dtype), images_to_tensor(b, dtype))[0])


@torch.no_grad()
def extract_features(phi: PerceptualExtractor, image: np.ndarray) -> List[np.ndarray]:
    """One ``h x w x c`` map per tap layer, unit-normalised per position."""
    dtype = phi_dtype(phi)
    return [tensor_to_images(tap)[0] for tap in phi(images_to_tensor(image, dtype))]


def total_loss(
    x: np.ndarray,
    model: RepairerModel,
    op: ErosionOp,
    phi: PerceptualExtractor,
    weights: LossWeights,
) -> torch.Tensor:
    """λ1·L2 + λ2·LPIPS of R(T(x)) against x, differentiable in the model weights."""
    dtype = model_dtype(model)
    eroded = images_to_tensor(apply_erosion(op, x), dtype)
    original = images_to_tensor(x, dtype)
    repaired = model(eroded)
    return loss_terms(phi, repaired, original, weights).total[0]


def init_phi(config: PhiConfig, seed: int, dtype: torch.dtype = DEFAULT_DTYPE) -> PerceptualExtractor:
    phi = PerceptualExtractor(config).to(dtype)
    if config.mode == LEARNED_MODE:
        init_fan_in_(list(phi.convs), torch_generator(seed, "phi"))
    return phi


def fit_phi(
    manifest: DatasetManifest,
    config: PhiConfig,
    seed: int,
    loader: Optional[ImageLoader] = None,
    dtype: torch.dtype = DEFAULT_DTYPE,
) -> PerceptualExtractor:
    """
    Fit φ by reconstruction on the ID train split and freeze it.

    A throw-away head upsamples the deepest activation back to image size;
    both are trained with Adam on the per-pixel squared error. The loss of
    each iteration is kept on ``phi.fit_trace``.
    """
    n_train = manifest.n_train
    if n_train == 0:
        raise ValidationError("cannot fit phi on an empty train split", code="empty_split")

    phi = init_phi(config, seed, dtype)
    phi.fit_trace = []
    if config.mode != LEARNED_MODE or config.n_iter == 0:
        return phi.freeze()

    loader = loader or ImageLoader(manifest, config.resolution, config.channels)
    head = ReconstructionHead(config).to(dtype)
    init_fan_in_([head.conv], torch_generator(seed, "phi", 0))
    phi.train()
    optimizer = torch.optim.Adam(
        list(phi.parameters()) + list(head.parameters()), lr=config.learning_rate
    )
    batch_size = min(config.batch_size, n_train)
    started = time.monotonic()
    logger.info(f"Fitting phi ({config.widths}) for {config.n_iter} iterations on {n_train} images")

    for iteration in range(1, config.n_iter + 1):
        indices = sample_indices(manifest, TRAIN, batch_size, numpy_rng(seed, "phi", iteration))
        images = images_to_tensor(loader.images(indices), dtype)
        reconstruction = head(phi.deepest(images))
        loss = ((reconstruction - images) ** 2).mean()
        if not torch.isfinite(loss):
            raise ValidationError(
                f"phi fit diverged: non-finite loss at iteration {iteration}", code="non_finite_loss"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        phi.fit_trace.append(float(loss.detach()))

    logger.info(
        f"Fitted phi in {time.monotonic() - started:.1f}s: loss {phi.fit_trace[0]:.5f} -> "
        f"{phi.fit_trace[-1]:.5f}"
    )
    return phi.freeze()
