"""
Repairer Service Layer

This module provides the operations on the repairing network: seeded
initialisation, encoding, decoding, style mixing, repair and the latent
mean update. Single-image operations take and return numpy images
(``H x W x C`` in [0, 1]); the ``*_batch`` variants and the tensor helpers
are the paths used by training and scoring.
"""

import logging
from typing import Iterable, Optional, Union

import numpy as np
import torch
from django.core.exceptions import ValidationError

from core.seeding import as_torch_generator
from datasets.services import TRAIN, DatasetManifest, ImageLoader, iter_chunks
from .networks import RepairerConfig, RepairerModel, init_fan_in_

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = torch.float32
INFERENCE_BATCH = 256


def init_model(
    config: RepairerConfig,
    rng: Union[torch.Generator, int],
    dtype: torch.dtype = DEFAULT_DTYPE,
) -> RepairerModel:
    """Fresh model with fan-in scaled weights and a zero latent mean."""
    model = RepairerModel(config).to(dtype)
    init_fan_in_(model.weighted_modules(), as_torch_generator(rng))
    model.eval()
    logger.debug(f"Initialised repairer with {count_parameters(model)} parameters")
    return model


def count_parameters(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def images_to_tensor(images: np.ndarray, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """``N x H x W x C`` (or a single ``H x W x C``) array to an NCHW tensor."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_images(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().to(torch.float64).permute(0, 2, 3, 1).contiguous().numpy()


def check_images(model: RepairerModel, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    expected = (*model.config.resolution, model.config.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValidationError(
            f"expected images of shape {expected}, got {images.shape[1:]}", code="shape_mismatch"
        )
    if not np.all(np.isfinite(images)):
        raise ValidationError("non-finite input", code="non_finite_input")
    return images


def check_latents(model: RepairerModel, latents) -> torch.Tensor:
    latents = torch.as_tensor(np.asarray(latents, dtype=np.float64)).to(model_dtype(model))
    if latents.ndim == 1:
        latents = latents[None]
    if latents.ndim != 2 or latents.shape[1] != model.config.latent_dim:
        raise ValidationError(
            f"expected latents of dimension {model.config.latent_dim}, got shape {tuple(latents.shape)}",
            code="shape_mismatch",
        )
    if not torch.isfinite(latents).all():
        raise ValidationError("non-finite latent", code="non_finite_input")
    return latents


@torch.no_grad()
def encode_batch(model: RepairerModel, images: np.ndarray) -> np.ndarray:
    images = check_images(model, images)
    chunks = [
        model.encode(images_to_tensor(images[start:start + INFERENCE_BATCH], model_dtype(model)))
        for start in range(0, len(images), INFERENCE_BATCH)
    ]
    return torch.cat(chunks).to(torch.float64).numpy()


@torch.no_grad()
def decode_batch(model: RepairerModel, latents) -> np.ndarray:
    return tensor_to_images(model.decode(check_latents(model, latents)))


@torch.no_grad()
def repair_batch(model: RepairerModel, images: np.ndarray) -> np.ndarray:
    """R(x) = g(mix(f(x))) for every image of a stack."""
    images = check_images(model, images)
    chunks = [
        model(images_to_tensor(images[start:start + INFERENCE_BATCH], model_dtype(model)))
        for start in range(0, len(images), INFERENCE_BATCH)
    ]
    return tensor_to_images(torch.cat(chunks))


def encode(model: RepairerModel, image: np.ndarray) -> np.ndarray:
    return encode_batch(model, image)[0]


def decode(model: RepairerModel, z) -> np.ndarray:
    return decode_batch(model, z)[0]


@torch.no_grad()
def style_mix(model: RepairerModel, z) -> np.ndarray:
    return model.mix(check_latents(model, z))[0].to(torch.float64).numpy()


def repair(model: RepairerModel, image: np.ndarray) -> np.ndarray:
    return repair_batch(model, image)[0]


def mean_latent(chunks: Iterable[torch.Tensor], latent_dim: int) -> torch.Tensor:
    """Arithmetic mean of streamed latent chunks, accumulated in float64 in chunk order."""
    total = torch.zeros(latent_dim, dtype=torch.float64)
    count = 0
    for chunk in chunks:
        total += chunk.to(torch.float64).sum(dim=0)
        count += chunk.shape[0]
    if count == 0:
        raise ValidationError("cannot average latents of an empty split", code="empty_split")
    return total / count


@torch.no_grad()
def update_latent_mean(
    model: RepairerModel,
    manifest: DatasetManifest,
    loader: Optional[ImageLoader] = None,
    batch_size: int = INFERENCE_BATCH,
) -> RepairerModel:
    """Set z̄ to the mean encoding of the train split, streamed in manifest order."""
    indices = manifest.split_indices(TRAIN)
    if not indices:
        raise ValidationError("train split is empty", code="empty_split")
    loader = loader or ImageLoader(manifest, model.config.resolution, model.config.channels)
    dtype = model_dtype(model)

    def latent_chunks():
        for chunk in iter_chunks(indices, batch_size):
            images = check_images(model, loader.images(chunk))
            yield model.encode(images_to_tensor(images, dtype))

    mean = mean_latent(latent_chunks(), model.config.latent_dim)
    model.latent_mean.copy_(mean.to(model.latent_mean.dtype))
    logger.info(f"Updated latent mean over {len(indices)} train images (norm {mean.norm().item():.4f})")
    return model
