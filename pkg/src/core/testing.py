"""
Shared test fixtures and reference implementations.

The oracles here are deliberately naive loop implementations used to
check the vectorised code paths.
"""

import csv
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image as PILImage

from erosion.services import BICUBIC_A
from repairer.networks import NEGATIVE_SLOPE, RepairerConfig, RepairerModel


# corpora

def write_png(path: Path, image: np.ndarray) -> Path:
    """Write an ``H x W x C`` array in [0, 1] as an 8-bit PNG."""
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pixels.shape[2] == 1:
        PILImage.fromarray(pixels[:, :, 0]).save(path)
    else:
        PILImage.fromarray(pixels).save(path)
    return path


def write_idx(path: Path, array: np.ndarray) -> Path:
    """Unsigned-byte IDX file (images ``N x H x W`` or labels ``N``)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + array.tobytes())
    return path


def write_manifest_rows(path: Path, rows: Iterable[Sequence[str]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in rows:
            writer.writerow(row)
    return path


def square_image(size: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Dark background with one bright square at a random position."""
    image = np.full((size, size, channels), 0.1)
    side = size // 3
    top, left = rng.integers(0, size - side, size=2)
    image[top:top + side, left:left + side, :] = 0.9
    return image


def stripe_image(size: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Horizontal stripes with a random period."""
    period = int(rng.integers(2, 5))
    rows = (np.arange(size) // period) % 2
    image = np.where(rows[:, None, None] == 1, 0.85, 0.15) * np.ones((size, size, channels))
    return image


def build_corpus(
    root: Path,
    size: int = 16,
    counts: Optional[Dict[str, int]] = None,
    seed: int = 0,
    labels: bool = False,
) -> Path:
    """
    PNG corpus plus manifest: squares are in-distribution, stripes are the
    ``stripes`` OOD source. Returns the manifest path.
    """
    counts = counts or {"train": 24, "val-id": 8, "test-id": 8, "val-ood": 8, "test-ood": 8}
    rng = np.random.default_rng(seed)
    rows: List[List[str]] = []
    for split, count in counts.items():
        ood = split.endswith("-ood")
        for position in range(count):
            image = stripe_image(size, rng) if ood else square_image(size, rng)
            name = f"{split}/{position:03d}.png"
            write_png(root / name, image)
            label = "" if ood or not labels else str(position % 2)
            rows.append([name, split, label, "stripes" if ood else "squares"])
    return write_manifest_rows(root / "manifest.csv", rows)


# reference implementations

def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """NCHW cross-correlation, written out as loops."""
    n, _, rows, cols = x.shape
    out_channels, in_channels, k_rows, k_cols = weight.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_rows = (rows + 2 * padding - k_rows) // stride + 1
    out_cols = (cols + 2 * padding - k_cols) // stride + 1
    out = np.zeros((n, out_channels, out_rows, out_cols))
    for i in range(out_rows):
        for j in range(out_cols):
            patch = padded[:, :, i * stride:i * stride + k_rows, j * stride:j * stride + k_cols]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, weight) + bias
    return out


def conv_transpose2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """NCHW transposed convolution by scattering every input pixel."""
    n, in_channels, rows, cols = x.shape
    _, out_channels, k_rows, k_cols = weight.shape
    full_rows = (rows - 1) * stride + k_rows
    full_cols = (cols - 1) * stride + k_cols
    full = np.zeros((n, out_channels, full_rows, full_cols))
    for i in range(rows):
        for j in range(cols):
            contribution = np.einsum("nc,cohw->nohw", x[:, :, i, j], weight)
            full[:, :, i * stride:i * stride + k_rows, j * stride:j * stride + k_cols] += contribution
    cropped = full[:, :, padding:full_rows - padding, padding:full_cols - padding]
    return cropped + bias[None, :, None, None]


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, NEGATIVE_SLOPE * x)


def _numpy(parameter: torch.Tensor) -> np.ndarray:
    return parameter.detach().to(torch.float64).numpy()


def repairer_reference(model: RepairerModel, images: np.ndarray, mean: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(latents, repaired NHWC images) computed with the loop oracles."""
    config = model.config
    hidden = np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2)
    for conv in model.encoder_convs:
        hidden = leaky_relu(conv2d_reference(hidden, _numpy(conv.weight), _numpy(conv.bias), 2, 1))
    latents = hidden.reshape(len(hidden), -1) @ _numpy(model.encoder_fc.weight).T + _numpy(model.encoder_fc.bias)

    mean = _numpy(model.latent_mean) if mean is None else mean
    alpha = config.mix_alpha
    mixed = (1.0 - alpha) * latents + alpha * mean

    rows, cols = config.bottleneck
    hidden = leaky_relu(mixed @ _numpy(model.decoder_fc.weight).T + _numpy(model.decoder_fc.bias))
    hidden = hidden.reshape(len(hidden), config.decoder_widths[0], rows, cols)
    for position, conv in enumerate(model.decoder_convs):
        hidden = conv_transpose2d_reference(hidden, _numpy(conv.weight), _numpy(conv.bias), 2, 1)
        if position == len(model.decoder_convs) - 1:
            hidden = 1.0 / (1.0 + np.exp(-hidden))
        else:
            hidden = leaky_relu(hidden)
    return latents, hidden.transpose(0, 2, 3, 1)


def bicubic_reference(image: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Separable Keys-kernel resize summing the four taps per output sample."""
    def kernel(t: float) -> float:
        a, t = BICUBIC_A, abs(t)
        if t <= 1:
            return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
        if t < 2:
            return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
        return 0.0

    def resize_axis(data: np.ndarray, size_out: int) -> np.ndarray:
        size_in = data.shape[0]
        out = np.zeros((size_out, *data.shape[1:]))
        for o in range(size_out):
            position = (o + 0.5) * size_in / size_out - 0.5
            first = int(np.floor(position)) - 1
            for tap in range(first, first + 4):
                out[o] += kernel(position - tap) * data[min(max(tap, 0), size_in - 1)]
        return out

    rows = resize_axis(np.asarray(image, dtype=np.float64), out_rows)
    cols = resize_axis(rows.transpose(1, 0, 2), out_cols).transpose(1, 0, 2)
    return np.clip(cols, 0.0, 1.0)


def brute_force_auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """Fraction of (ID, OOD) pairs ranked correctly, ties counting one half."""
    wins = 0.0
    for ood in ood_scores:
        for in_dist in id_scores:
            if ood > in_dist:
                wins += 1.0
            elif ood == in_dist:
                wins += 0.5
    return wins / (len(id_scores) * len(ood_scores))


def power_iteration_norm(matrix: np.ndarray, steps: int = 500, seed: int = 0) -> float:
    """Largest singular value of ``matrix`` by power iteration on AᵀA."""
    vector = np.random.default_rng(seed).standard_normal(matrix.shape[1])
    for _ in range(steps):
        vector = matrix.T @ (matrix @ vector)
        vector /= np.linalg.norm(vector)
    return float(np.linalg.norm(matrix @ vector))


def small_config(resolution: int = 8, latent_dim: int = 4, channels: int = 1, mix_alpha: float = 0.3) -> RepairerConfig:
    return RepairerConfig(
        resolution=(resolution, resolution),
        channels=channels,
        latent_dim=latent_dim,
        encoder_widths=(2, 4),
        decoder_widths=(4, 2),
        mix_alpha=mix_alpha,
    )
