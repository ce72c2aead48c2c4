"""
Training Service Layer

This module provides the repairer training loop: each iteration draws a
batch from the train split, draws one erosion map per sample, sums the
per-sample losses and applies one gradient step. It also provides the
checkpoint operations for the repairer, φ and the resumable training state.
"""

import csv
import hashlib
import json
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from django.core.exceptions import ValidationError

from core.seeding import numpy_rng
from datasets.services import TRAIN, DatasetManifest, ImageLoader, sample_indices
from erosion.services import ErosionOp, ErosionSet, apply_erosions, sample_erosion_ops
from metrics.networks import PerceptualExtractor, PhiConfig
from metrics.services import LossWeights, loss_terms
from repairer.networks import RepairerConfig, RepairerModel
from repairer.services import DEFAULT_DTYPE, images_to_tensor, model_dtype, update_latent_mean
from .checkpoints import (
    PHI_KIND,
    REPAIRER_KIND,
    TRAIN_STATE_KIND,
    load_tensors_into,
    read_checkpoint,
    write_checkpoint,
)

logger = logging.getLogger(__name__)

SGD = "sgd"
ADAPTIVE_MOMENTS = "adaptive-moments"
OPTIMIZERS = (SGD, ADAPTIVE_MOMENTS)

TRAIN_STATE_FILE = "train_state.ckpt"


@dataclass(frozen=True)
class TrainConfig:
    n_iter: int = 3000
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = ADAPTIVE_MOMENTS
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if self.n_iter < 0:
            raise ValidationError("n_iter must be nonnegative", code="invalid_train_config")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive", code="invalid_train_config")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive", code="invalid_train_config")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer: {self.optimizer}", code="invalid_train_config")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValidationError("checkpoint_every and log_every must be positive", code="invalid_train_config")


@dataclass
class TrainTrace:
    losses: List[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def record(self, mean_loss: float) -> None:
        # float32 rounding keeps resumed traces identical to uninterrupted ones
        self.losses.append(float(np.float32(mean_loss)))


class OptimizerState:
    """
    Wraps the torch optimizer behind :func:`gradient_step`.

    ``sgd`` applies θ - (η/B)·Σ∇ exactly; ``adaptive-moments`` is Adam with
    its default betas (0.9, 0.999) and eps 1e-8 at learning rate η on the
    batch-averaged gradient.
    """

    def __init__(self, mode: str, weights: Dict[str, torch.Tensor]):
        if mode not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer: {mode}", code="invalid_train_config")
        self.mode = mode
        self.names = list(weights)
        params = [weights[name] for name in self.names]
        if mode == SGD:
            self.optimizer = torch.optim.SGD(params, lr=1.0)
        else:
            self.optimizer = torch.optim.Adam(params, lr=1.0)

    def apply(self, weights, grads, eta: float, batch_size: int) -> None:
        scale = 1.0
        lr = eta / batch_size
        if self.mode == ADAPTIVE_MOMENTS:
            scale, lr = 1.0 / batch_size, eta
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        with torch.no_grad():
            for name in self.names:
                grad = grads[name].detach()
                weights[name].grad = grad.clone() if scale == 1.0 else grad * scale
        self.optimizer.step()

    def tensors(self) -> "OrderedDict[str, torch.Tensor]":
        named = OrderedDict()
        for index, values in sorted(self.optimizer.state_dict()["state"].items()):
            for key, value in sorted(values.items()):
                named[f"optimizer.{index}.{key}"] = torch.as_tensor(value)
        return named

    def restore(self, tensors: Dict[str, torch.Tensor]) -> None:
        state: Dict[int, Dict[str, torch.Tensor]] = {}
        for name, value in tensors.items():
            _, index, key = name.split(".", 2)
            state.setdefault(int(index), {})[key] = value.clone()
        groups = self.optimizer.state_dict()["param_groups"]
        self.optimizer.load_state_dict({"state": state, "param_groups": groups})


def gradient_step(
    weights: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    eta: float,
    batch_size: int,
    state: Optional[OptimizerState] = None,
) -> Dict[str, torch.Tensor]:
    """
    Apply one update from the summed gradients of a batch of ``batch_size``.

    Args:
        weights: named leaf tensors, updated in place
        grads: summed gradients with the same names and shapes
        eta: learning rate η
        batch_size: B
        state: optimizer state; a plain sgd state is created when omitted

    Returns:
        The updated weights
    """
    if set(weights) != set(grads):
        raise ValidationError(
            f"gradient names {sorted(grads)} do not match weights {sorted(weights)}",
            code="shape_mismatch",
        )
    for name, weight in weights.items():
        grad = grads[name]
        if grad is None or tuple(grad.shape) != tuple(weight.shape):
            raise ValidationError(f"gradient shape mismatch for {name}", code="shape_mismatch")
        if not torch.isfinite(grad).all():
            raise ValidationError(f"non-finite gradient for {name}", code="non_finite_gradient")
    if not eta > 0 or batch_size < 1:
        raise ValidationError("eta must be positive and B at least 1", code="invalid_train_config")
    state = state or OptimizerState(SGD, weights)
    state.apply(weights, grads, eta, batch_size)
    return weights


def batch_losses(
    model: RepairerModel,
    phi: PerceptualExtractor,
    images: np.ndarray,
    ops: Sequence[ErosionOp],
    weights: LossWeights,
) -> torch.Tensor:
    """Per-sample λ1·L2 + λ2·LPIPS of R(T_i(x_i)) against x_i, mixing toward the stored z̄."""
    dtype = model_dtype(model)
    originals = images_to_tensor(images, dtype)
    eroded = images_to_tensor(apply_erosions(ops, images), dtype)
    return loss_terms(phi, model(eroded), originals, weights).total


def collect_grads(params: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    # weights outside the graph (the encoder at α = 1) get a zero gradient
    return {
        name: param.grad if param.grad is not None else torch.zeros_like(param)
        for name, param in params.items()
    }


def training_fingerprint(
    model: RepairerModel,
    erosion_set: ErosionSet,
    phi: PerceptualExtractor,
    weights: LossWeights,
    cfg: TrainConfig,
) -> str:
    """Everything a resumed run must share with the run that wrote the state."""
    payload = {
        "repairer": model.config.to_dict(),
        "erosion": erosion_set.describe(),
        "phi": phi.config.to_dict(),
        "loss": asdict(weights),
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "seed": cfg.seed,
        "optimizer": cfg.optimizer,
        "checkpoint_every": cfg.checkpoint_every,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def save_train_state(path, model: RepairerModel, state: OptimizerState, iteration: int, trace: TrainTrace, fingerprint: str) -> None:
    tensors = OrderedDict((f"model.{name}", tensor) for name, tensor in model.state_dict().items())
    tensors.update(state.tensors())
    tensors["trace"] = torch.tensor(trace.losses, dtype=torch.float32)
    write_checkpoint(path, TRAIN_STATE_KIND, {"iteration": iteration, "fingerprint": fingerprint}, tensors)


def load_train_state(path, model: RepairerModel, state: OptimizerState, trace: TrainTrace, fingerprint: str) -> int:
    """Restore a matching training state; returns the completed iteration (0 when none applies)."""
    path = Path(path)
    if not path.is_file():
        return 0
    _, config, tensors = read_checkpoint(path, TRAIN_STATE_KIND)
    if config.get("fingerprint") != fingerprint:
        logger.warning(f"Ignoring {path}: written by a run with a different configuration")
        return 0
    model_tensors = OrderedDict(
        (name[len("model."):], tensor) for name, tensor in tensors.items() if name.startswith("model.")
    )
    load_tensors_into(model, model_tensors, path)
    state.restore({name: t for name, t in tensors.items() if name.startswith("optimizer.")})
    trace.losses = [float(v) for v in tensors["trace"].tolist()]
    iteration = int(config["iteration"])
    logger.info(f"Resuming training from {path} at iteration {iteration}")
    return iteration


def train_repairer(
    model: RepairerModel,
    manifest: DatasetManifest,
    erosion_set: ErosionSet,
    phi: PerceptualExtractor,
    weights: LossWeights,
    cfg: TrainConfig,
    loader: Optional[ImageLoader] = None,
    state_dir: Optional[Union[str, Path]] = None,
) -> "tuple[RepairerModel, TrainTrace]":
    """
    Run ``cfg.n_iter`` iterations, then set the latent mean from the train split.

    Each iteration minimises the same loss as :func:`metrics.services.total_loss`,
    mixing toward the stored z̄. z̄ is re-estimated from the train split at the
    start of every ``cfg.checkpoint_every`` iterations. With ``state_dir`` a
    training state is written at the end of each such interval and a
    matching state is resumed.
    """
    n_train = manifest.n_train
    if cfg.batch_size > n_train:
        raise ValidationError(
            f"batch size {cfg.batch_size} exceeds train split size {n_train}", code="batch_too_large"
        )
    for op in erosion_set:
        op.validate_for(model.config.resolution)
    loader = loader or ImageLoader(manifest, model.config.resolution, model.config.channels)

    params = OrderedDict(model.named_parameters())
    state = OptimizerState(cfg.optimizer, params)
    trace = TrainTrace()
    fingerprint = training_fingerprint(model, erosion_set, phi, weights, cfg)
    state_path = Path(state_dir) / TRAIN_STATE_FILE if state_dir else None
    start = load_train_state(state_path, model, state, trace, fingerprint) if state_path else 0
    if start > cfg.n_iter:
        raise ValidationError(
            f"training state at iteration {start} exceeds n_iter {cfg.n_iter}; remove {state_path}",
            code="invalid_train_config",
        )

    started = time.monotonic()
    logger.info(
        f"Training repairer for {cfg.n_iter} iterations (B={cfg.batch_size}, {cfg.optimizer}, "
        f"{len(erosion_set)} erosion ops) from iteration {start}"
    )
    model.train()
    for iteration in range(start + 1, cfg.n_iter + 1):
        indices = sample_indices(manifest, TRAIN, cfg.batch_size, numpy_rng(cfg.seed, "batch", iteration))
        images = loader.images(indices)
        ops = sample_erosion_ops(erosion_set, len(indices), numpy_rng(cfg.seed, "erosion", iteration))
        if (iteration - 1) % cfg.checkpoint_every == 0:
            update_latent_mean(model, manifest, loader)

        summed = batch_losses(model, phi, images, ops, weights).sum()
        if not torch.isfinite(summed):
            raise ValidationError(f"non-finite loss at iteration {iteration}", code="non_finite_loss")

        model.zero_grad(set_to_none=True)
        summed.backward()
        gradient_step(params, collect_grads(params), cfg.learning_rate, cfg.batch_size, state)
        trace.record(summed.item() / cfg.batch_size)

        if iteration % cfg.log_every == 0:
            logger.debug(f"iteration {iteration}: mean loss {trace.losses[-1]:.6f}")
        if state_path and iteration % cfg.checkpoint_every == 0:
            save_train_state(state_path, model, state, iteration, trace, fingerprint)

    model.eval()
    update_latent_mean(model, manifest, loader)
    trace.seconds = time.monotonic() - started
    if trace.losses:
        logger.info(
            f"Trained {trace.iterations} iterations in {trace.seconds:.1f}s: mean loss "
            f"{trace.losses[0]:.6f} -> {trace.losses[-1]:.6f}"
        )
    return model, trace


def write_trace(path: Union[str, Path], trace: TrainTrace) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["iteration", "mean_loss"])
        for iteration, loss in enumerate(trace.losses, start=1):
            writer.writerow([iteration, repr(loss)])
    return path


def save_repairer(model: RepairerModel, path: Union[str, Path], meta: Optional[Dict] = None) -> Path:
    config = {"repairer": model.config.to_dict(), "meta": meta or {}}
    return write_checkpoint(path, REPAIRER_KIND, config, model.state_dict())


def load_repairer(path: Union[str, Path], dtype: torch.dtype = DEFAULT_DTYPE) -> RepairerModel:
    _, config, tensors = read_checkpoint(path, REPAIRER_KIND)
    model = RepairerModel(RepairerConfig.from_dict(config["repairer"])).to(dtype)
    load_tensors_into(model, tensors, Path(path))
    return model.eval()


def save_phi(phi: PerceptualExtractor, path: Union[str, Path]) -> Path:
    return write_checkpoint(path, PHI_KIND, {"phi": phi.config.to_dict()}, phi.state_dict())


def load_phi(path: Union[str, Path], dtype: torch.dtype = DEFAULT_DTYPE) -> PerceptualExtractor:
    _, config, tensors = read_checkpoint(path, PHI_KIND)
    phi = PerceptualExtractor(PhiConfig.from_dict(config["phi"])).to(dtype)
    load_tensors_into(phi, tensors, Path(path))
    return phi.freeze()


def checkpoint_meta(path: Union[str, Path]) -> Dict:
    _, config, _ = read_checkpoint(path)
    return config.get("meta", {})


def checkpoint_io(obj, path: Union[str, Path], direction: str, dtype: torch.dtype = DEFAULT_DTYPE):
    """Save ``obj`` (a repairer or φ) to ``path``, or load whichever kind ``path`` holds."""
    if direction == "save":
        if isinstance(obj, RepairerModel):
            save_repairer(obj, path)
        elif isinstance(obj, PerceptualExtractor):
            save_phi(obj, path)
        else:
            raise ValidationError(f"cannot checkpoint {type(obj).__name__}", code="invalid_checkpoint")
        return None
    if direction == "load":
        kind, _, _ = read_checkpoint(path)
        return load_phi(path, dtype) if kind == PHI_KIND else load_repairer(path, dtype)
    raise ValidationError(f"unknown checkpoint direction: {direction}", code="invalid_checkpoint")
