"""
Labeled baselines: a linear classifier over pooled φ features scored by
maximum softmax probability and maximum logit. Both scores are negated so
that, like the repair score, higher means more likely OOD.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from django.core.exceptions import ValidationError
from torch import nn

from core.seeding import torch_generator
from metrics.networks import PerceptualExtractor
from metrics.services import phi_dtype
from repairer.networks import init_fan_in_
from repairer.services import images_to_tensor

logger = logging.getLogger(__name__)


@torch.no_grad()
def pooled_features(phi: PerceptualExtractor, images: np.ndarray) -> torch.Tensor:
    """Spatial mean of every normalised tap, concatenated per sample."""
    taps = phi(images_to_tensor(images, phi_dtype(phi)))
    return torch.cat([tap.mean(dim=(2, 3)) for tap in taps], dim=1)


class BaselineHead(nn.Module):
    def __init__(self, n_features: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(n_features, n_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.linear(features)


def fit_baseline_head(
    phi: PerceptualExtractor,
    images: np.ndarray,
    labels: Sequence[Optional[int]],
    seed: int,
    n_iter: int = 500,
    learning_rate: float = 1e-2,
) -> BaselineHead:
    """Train the linear head with full-batch cross-entropy (Adam)."""
    if len(images) == 0:
        raise ValidationError("cannot fit a baseline head without images", code="empty_split")
    if any(label is None for label in labels):
        raise ValidationError("missing labels: baselines need a label for every train image", code="missing_labels")
    targets = torch.as_tensor([int(label) for label in labels], dtype=torch.long)
    if targets.min() < 0:
        raise ValidationError("labels must be nonnegative class indices", code="missing_labels")

    features = pooled_features(phi, images)
    n_classes = int(targets.max()) + 1
    head = BaselineHead(features.shape[1], n_classes).to(features.dtype)
    init_fan_in_([head.linear], torch_generator(seed, "baseline"))
    optimizer = torch.optim.Adam(head.parameters(), lr=learning_rate)
    for _ in range(n_iter):
        loss = F.cross_entropy(head(features), targets)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    logger.info(f"Fitted baseline head over {n_classes} classes on {len(targets)} images")
    return head.eval()


def logit_scores(logits) -> Tuple[np.ndarray, np.ndarray]:
    """(-max softmax probability, -max logit) per row of ``logits``."""
    logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    if logits.ndim == 1:
        logits = logits[None]
    msp = -F.softmax(logits, dim=1).max(dim=1).values
    max_logit = -logits.max(dim=1).values
    return msp.numpy(), max_logit.numpy()


@torch.no_grad()
def baseline_scores(head: BaselineHead, phi: PerceptualExtractor, images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    logits = head(pooled_features(phi, images))
    return logit_scores(logits.to(torch.float64).numpy())
