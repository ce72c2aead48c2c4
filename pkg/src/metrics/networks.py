from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
from django.core.exceptions import ValidationError
from torch import nn

from repairer.networks import NEGATIVE_SLOPE

IDENTITY_MODE = "identity"
LEARNED_MODE = "learned"
PHI_MODES = (IDENTITY_MODE, LEARNED_MODE)


@dataclass(frozen=True)
class PhiConfig:
    """
    Architecture and fitting budget of the perception network.

    Tap 0 is the raw input; tap ``i`` is the activation of conv layer ``i``.
    The identity mode has no layers and emits tap 0 only.
    """
    resolution: Tuple[int, int]
    channels: int
    mode: str = LEARNED_MODE
    widths: Tuple[int, ...] = (8, 16)
    tap_layers: Tuple[int, ...] = (1, 2)
    n_iter: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if self.mode == IDENTITY_MODE:
            object.__setattr__(self, "widths", ())
            object.__setattr__(self, "tap_layers", (0,))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "tap_layers", tuple(int(v) for v in self.tap_layers))
        self.validate()

    def validate(self) -> None:
        if self.mode not in PHI_MODES:
            raise ValidationError(f"unknown phi mode: {self.mode}", code="inconsistent_config")
        if not self.tap_layers:
            raise ValidationError("phi needs at least one tap layer", code="inconsistent_config")
        if any(tap < 0 or tap > len(self.widths) for tap in self.tap_layers):
            raise ValidationError(
                f"tap layers {self.tap_layers} out of range for {len(self.widths)} layers",
                code="inconsistent_config",
            )
        if len(set(self.tap_layers)) != len(self.tap_layers):
            raise ValidationError("duplicate tap layers", code="inconsistent_config")
        if self.mode == LEARNED_MODE:
            if not self.widths or any(w < 1 for w in self.widths):
                raise ValidationError("learned phi needs positive widths", code="inconsistent_config")
            stride = self.downscale
            if self.resolution[0] % stride or self.resolution[1] % stride:
                raise ValidationError(
                    f"resolution {self.resolution} is not divisible by {stride}",
                    code="inconsistent_config",
                )
        if self.n_iter < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError("invalid phi fitting budget", code="inconsistent_config")

    @property
    def downscale(self) -> int:
        """Spatial reduction of the deepest layer (first layer keeps stride 1)."""
        return 2 ** max(len(self.widths) - 1, 0)

    def to_dict(self) -> Dict:
        return {
            "resolution": list(self.resolution),
            "channels": self.channels,
            "mode": self.mode,
            "widths": list(self.widths),
            "tap_layers": list(self.tap_layers),
            "n_iter": self.n_iter,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PhiConfig":
        return cls(
            resolution=tuple(data["resolution"]),
            channels=int(data["channels"]),
            mode=data["mode"],
            widths=tuple(data["widths"]),
            tap_layers=tuple(data["tap_layers"]),
            n_iter=int(data["n_iter"]),
            batch_size=int(data["batch_size"]),
            learning_rate=float(data["learning_rate"]),
        )


def unit_normalize(features: torch.Tensor) -> torch.Tensor:
    """Scale each position's channel vector to unit norm; zero vectors stay zero."""
    squared = (features * features).sum(dim=1, keepdim=True)
    nonzero = squared > 0
    norm = torch.sqrt(torch.where(nonzero, squared, torch.ones_like(squared)))
    return torch.where(nonzero, features / norm, torch.zeros_like(features))


class PerceptualExtractor(nn.Module):
    """The perception network φ; frozen once fitted."""

    def __init__(self, config: PhiConfig):
        super().__init__()
        self.config = config
        self.convs = nn.ModuleList()
        in_channels = config.channels
        for position, width in enumerate(config.widths):
            stride = 1 if position == 0 else 2
            self.convs.append(nn.Conv2d(in_channels, width, kernel_size=3, stride=stride, padding=1))
            in_channels = width
        self.activation = nn.LeakyReLU(NEGATIVE_SLOPE)

    def _activations(self, images: torch.Tensor) -> List[torch.Tensor]:
        """The input followed by every conv layer's activation."""
        activations = [images]
        for conv in self.convs:
            activations.append(self.activation(conv(activations[-1])))
        return activations

    def raw_taps(self, images: torch.Tensor) -> List[torch.Tensor]:
        activations = self._activations(images)
        return [activations[tap] for tap in self.config.tap_layers]

    def deepest(self, images: torch.Tensor) -> torch.Tensor:
        return self._activations(images)[-1]

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        return [unit_normalize(tap) for tap in self.raw_taps(images)]

    def freeze(self) -> "PerceptualExtractor":
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        return self.eval()


class ReconstructionHead(nn.Module):
    """Throw-away decoder used only while fitting φ."""

    def __init__(self, config: PhiConfig):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=config.downscale, mode="nearest")
        self.conv = nn.Conv2d(config.widths[-1], config.channels, kernel_size=3, padding=1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(self.upsample(features)))
