import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import torch
from django.core.exceptions import ValidationError
from torch import nn

NEGATIVE_SLOPE = 0.2


@dataclass(frozen=True)
class RepairerConfig:
    resolution: Tuple[int, int]
    channels: int
    latent_dim: int
    encoder_widths: Tuple[int, ...]
    decoder_widths: Tuple[int, ...]
    mix_alpha: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        object.__setattr__(self, "encoder_widths", tuple(int(v) for v in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(v) for v in self.decoder_widths))
        self.validate()

    def validate(self) -> None:
        if not self.encoder_widths or not self.decoder_widths:
            raise ValidationError("encoder and decoder widths must be nonempty", code="inconsistent_config")
        if len(self.encoder_widths) != len(self.decoder_widths):
            raise ValidationError(
                f"encoder has {len(self.encoder_widths)} layers but decoder has {len(self.decoder_widths)}",
                code="inconsistent_config",
            )
        if any(width < 1 for width in self.encoder_widths + self.decoder_widths):
            raise ValidationError("layer widths must be positive", code="inconsistent_config")
        if self.latent_dim < 1:
            raise ValidationError("latent_dim must be at least 1", code="inconsistent_config")
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}", code="inconsistent_config")
        if not 0.0 <= self.mix_alpha <= 1.0:
            raise ValidationError(f"mix_alpha must lie in [0, 1], got {self.mix_alpha}", code="inconsistent_config")
        stride = 2 ** self.depth
        rows, cols = self.resolution
        if rows % stride or cols % stride:
            raise ValidationError(
                f"resolution {rows}x{cols} is not divisible by 2^{self.depth}",
                code="inconsistent_config",
            )

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    @property
    def bottleneck(self) -> Tuple[int, int]:
        stride = 2 ** self.depth
        return (self.resolution[0] // stride, self.resolution[1] // stride)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["resolution"] = list(self.resolution)
        data["encoder_widths"] = list(self.encoder_widths)
        data["decoder_widths"] = list(self.decoder_widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "RepairerConfig":
        return cls(
            resolution=tuple(data["resolution"]),
            channels=int(data["channels"]),
            latent_dim=int(data["latent_dim"]),
            encoder_widths=tuple(data["encoder_widths"]),
            decoder_widths=tuple(data["decoder_widths"]),
            mix_alpha=float(data["mix_alpha"]),
        )


def fan_in(module: nn.Module) -> float:
    """Inputs feeding one output unit (per stride-2 phase for transposed convs)."""
    weight = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        in_channels, _, k_rows, k_cols = weight.shape
        return in_channels * k_rows * k_cols / (module.stride[0] * module.stride[1])
    if isinstance(module, nn.Conv2d):
        _, in_channels, k_rows, k_cols = weight.shape
        return in_channels * k_rows * k_cols
    return weight.shape[1]


def init_fan_in_(modules, generator: torch.Generator) -> None:
    """Weights ~ N(0, 1/fan_in), biases 0, drawn in float64 so every dtype sees the same values."""
    with torch.no_grad():
        for module in modules:
            std = 1.0 / math.sqrt(fan_in(module))
            draw = torch.randn(module.weight.shape, generator=generator, dtype=torch.float64) * std
            module.weight.copy_(draw.to(module.weight.dtype))
            if module.bias is not None:
                module.bias.zero_()


class RepairerModel(nn.Module):
    """
    Encoder f, flat latent space, decoder g and style mixing toward the
    latent mean z̄ (stored as the ``latent_mean`` buffer).
    """

    def __init__(self, config: RepairerConfig):
        super().__init__()
        self.config = config
        rows, cols = config.bottleneck
        widths = config.encoder_widths

        self.register_buffer("latent_mean", torch.zeros(config.latent_dim))
        self.encoder_convs = nn.ModuleList()
        in_channels = config.channels
        for width in widths:
            self.encoder_convs.append(nn.Conv2d(in_channels, width, kernel_size=3, stride=2, padding=1))
            in_channels = width
        self.encoder_fc = nn.Linear(widths[-1] * rows * cols, config.latent_dim)

        dec = config.decoder_widths
        self.decoder_fc = nn.Linear(config.latent_dim, dec[0] * rows * cols)
        self.decoder_convs = nn.ModuleList()
        for position, width in enumerate(dec):
            out_channels = dec[position + 1] if position + 1 < len(dec) else config.channels
            self.decoder_convs.append(
                nn.ConvTranspose2d(width, out_channels, kernel_size=4, stride=2, padding=1)
            )
        self.activation = nn.LeakyReLU(NEGATIVE_SLOPE)

    def weighted_modules(self):
        return [*self.encoder_convs, self.encoder_fc, self.decoder_fc, *self.decoder_convs]

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        hidden = images
        for conv in self.encoder_convs:
            hidden = self.activation(conv(hidden))
        return self.encoder_fc(torch.flatten(hidden, start_dim=1))

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        rows, cols = self.config.bottleneck
        hidden = self.activation(self.decoder_fc(latents))
        hidden = hidden.view(-1, self.config.decoder_widths[0], rows, cols)
        last = len(self.decoder_convs) - 1
        for position, conv in enumerate(self.decoder_convs):
            hidden = conv(hidden)
            hidden = torch.sigmoid(hidden) if position == last else self.activation(hidden)
        return hidden

    def mix(self, latents: torch.Tensor, mean: Optional[torch.Tensor] = None) -> torch.Tensor:
        """z' = (1 - α) z + α z̄; ``mean`` defaults to the stored latent mean."""
        alpha = self.config.mix_alpha
        mean = self.latent_mean if mean is None else mean
        if alpha == 0.0:
            return latents
        if alpha == 1.0:
            return mean.expand_as(latents).clone()
        return (1.0 - alpha) * latents + alpha * mean

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode(self.mix(self.encode(images)))
