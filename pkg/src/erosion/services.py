"""
Erosion Service Layer

This module provides the erosion maps applied to an image before it is
repaired: the identity map, bicubic downsample-then-upsample, and
rectangular black-out. It also builds the candidate family of erosion maps
for each SR-OOD variant and draws erosion indices uniformly from a family.

Images are ``H x W x C`` float arrays in [0, 1]; every operation here is a
pure function of its inputs.
"""

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

IDENTITY = "identity"
DOWNSAMPLE = "downsample"
BLACKOUT = "blackout"
EROSION_KINDS = (IDENTITY, DOWNSAMPLE, BLACKOUT)

VARIANTS = ("rec", "inpaint", "sr")
VARIANT_KINDS = {
    "rec": IDENTITY,
    "sr": DOWNSAMPLE,
    "inpaint": BLACKOUT,
}

# Keys cubic convolution parameter
BICUBIC_A = -0.5

SR_FACTORS = (2, 4, 8)
MIN_RESOLUTION = 8

_DOWNSAMPLE_ID = re.compile(r"^downsample-x(\d+)$")
_BLACKOUT_ID = re.compile(r"^blackout-(\d+)x(\d+)@(\d+),(\d+)$")


@dataclass(frozen=True)
class ErosionOp:
    """
    A single erosion map T.

    ``mask`` is ``(height, width, offset_y, offset_x)`` where the offsets are
    the top-left row and column of the blacked-out rectangle.
    """
    kind: str
    factor: int = 1
    mask: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        if self.kind not in EROSION_KINDS:
            raise ValidationError(f"Unknown erosion kind: {self.kind}", code="invalid_erosion")
        if self.kind == IDENTITY and (self.factor != 1 or self.mask is not None):
            raise ValidationError("identity erosion carries no parameters", code="invalid_erosion")
        if self.kind == DOWNSAMPLE:
            if self.mask is not None or int(self.factor) != self.factor or self.factor < 1:
                raise ValidationError(
                    f"downsample factor must be an integer >= 1, got {self.factor}",
                    code="invalid_erosion",
                )
        if self.kind == BLACKOUT:
            if self.factor != 1 or self.mask is None or len(self.mask) != 4:
                raise ValidationError("blackout erosion needs a 4-tuple mask", code="invalid_erosion")
            height, width, top, left = self.mask
            if height < 1 or width < 1 or top < 0 or left < 0:
                raise ValidationError(f"invalid blackout mask {self.mask}", code="invalid_erosion")

    @classmethod
    def identity(cls) -> "ErosionOp":
        return cls(IDENTITY)

    @classmethod
    def downsample(cls, factor: int) -> "ErosionOp":
        return cls(DOWNSAMPLE, factor=int(factor))

    @classmethod
    def blackout(cls, height: int, width: int, offset_y: int, offset_x: int) -> "ErosionOp":
        return cls(BLACKOUT, mask=(int(height), int(width), int(offset_y), int(offset_x)))

    @classmethod
    def from_id(cls, op_id: str) -> "ErosionOp":
        """Inverse of :attr:`op_id`."""
        op_id = op_id.strip()
        if op_id == IDENTITY:
            return cls.identity()
        match = _DOWNSAMPLE_ID.match(op_id)
        if match:
            return cls.downsample(int(match.group(1)))
        match = _BLACKOUT_ID.match(op_id)
        if match:
            return cls.blackout(*(int(g) for g in match.groups()))
        raise ValidationError(f"Unrecognised erosion id: {op_id}", code="invalid_erosion")

    @property
    def op_id(self) -> str:
        if self.kind == IDENTITY:
            return IDENTITY
        if self.kind == DOWNSAMPLE:
            return f"downsample-x{self.factor}"
        height, width, top, left = self.mask
        return f"blackout-{height}x{width}@{top},{left}"

    def validate_for(self, resolution: Tuple[int, int]) -> None:
        """Raise unless the op is applicable at ``resolution``."""
        rows, cols = resolution
        if self.kind == DOWNSAMPLE and (rows % self.factor or cols % self.factor):
            raise ValidationError(
                f"{self.op_id} does not divide resolution {rows}x{cols}",
                code="erosion_mismatch",
            )
        if self.kind == BLACKOUT:
            height, width, top, left = self.mask
            if top + height > rows or left + width > cols:
                raise ValidationError(
                    f"{self.op_id} lies outside a {rows}x{cols} image",
                    code="erosion_mismatch",
                )

    def center_offset(self, resolution: Tuple[int, int]) -> Tuple[float, float]:
        """(dy, dx) from the image centre to the mask centre, in pixels."""
        if self.kind != BLACKOUT:
            return (0.0, 0.0)
        rows, cols = resolution
        height, width, top, left = self.mask
        return (top + height / 2 - rows / 2, left + width / 2 - cols / 2)

    def __str__(self):
        return self.op_id


@dataclass(frozen=True)
class ErosionSet:
    """The candidate family of erosion maps used for one variant."""
    ops: Tuple[ErosionOp, ...]

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if not self.ops:
            raise ValidationError("erosion set is empty", code="invalid_erosion_set")
        kinds = {op.kind for op in self.ops}
        if len(kinds) != 1:
            raise ValidationError(
                f"erosion set mixes kinds {sorted(kinds)}", code="invalid_erosion_set"
            )
        ids = [op.op_id for op in self.ops]
        if len(set(ids)) != len(ids):
            raise ValidationError("erosion set contains duplicate ops", code="invalid_erosion_set")

    @property
    def kind(self) -> str:
        return self.ops[0].kind

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def __getitem__(self, position: int) -> ErosionOp:
        return self.ops[position]

    def index(self, op: ErosionOp) -> int:
        return self.ops.index(op)

    def describe(self) -> str:
        """Serialised form stored in resolved configs."""
        return ",".join(op.op_id for op in self.ops)

    @classmethod
    def from_description(cls, description: str) -> "ErosionSet":
        return cls(tuple(ErosionOp.from_id(part) for part in description.split(",") if part.strip()))


def _check_resolution(resolution: Tuple[int, int]) -> Tuple[int, int]:
    rows, cols = (int(v) for v in resolution)
    if rows < MIN_RESOLUTION or cols < MIN_RESOLUTION:
        raise ValidationError(
            f"resolution {rows}x{cols} is too small to host any erosion (minimum "
            f"{MIN_RESOLUTION}x{MIN_RESOLUTION})",
            code="resolution_too_small",
        )
    return rows, cols


def mask_offsets(resolution: Tuple[int, int]) -> List[int]:
    """
    Mask-centre offsets {0, S/8, S/4} with S = min(H, W), floored to whole
    pixels (3 and 7 at S = 28). A mask whose side has the other parity than
    the image cannot sit on the exact centre: its centre lands 0.5 px up and
    left of it, as :meth:`ErosionOp.center_offset` reports.
    """
    side = min(resolution)
    return [0, side // 8, side // 4]


def centered_blackout(resolution: Tuple[int, int], side: int, offset: int) -> ErosionOp:
    """Square mask of ``side`` centred in the image, shifted right by ``offset`` pixels."""
    rows, cols = resolution
    top = (rows - side) // 2
    left = (cols - side) // 2 + offset
    op = ErosionOp.blackout(side, side, top, left)
    op.validate_for(resolution)
    return op


def build_erosion_set(variant: str, resolution: Tuple[int, int]) -> ErosionSet:
    """
    Build the erosion family for an SR-OOD variant.

    rec uses the identity map; sr uses bicubic downsampling by each of
    2, 4 and 8 that divides the resolution; inpaint uses centred square
    masks of side S/4 and S/2 at centre offsets {0, S/8, S/4}.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"Unknown variant: {variant}", code="invalid_variant")
    rows, cols = _check_resolution(resolution)

    if variant == "rec":
        return ErosionSet((ErosionOp.identity(),))

    if variant == "sr":
        ops = [
            ErosionOp.downsample(factor)
            for factor in SR_FACTORS
            if rows % factor == 0 and cols % factor == 0
        ]
        if not ops:
            raise ValidationError(
                f"resolution {rows}x{cols} is not divisible by any downsample factor",
                code="resolution_too_small",
            )
        return ErosionSet(tuple(ops))

    side = min(rows, cols)
    ops: List[ErosionOp] = []
    for mask_side in (side // 4, side // 2):
        for offset in mask_offsets((rows, cols)):
            op = centered_blackout((rows, cols), mask_side, offset)
            if op not in ops:
                ops.append(op)
    return ErosionSet(tuple(ops))


def _keys_kernel(distance: np.ndarray) -> np.ndarray:
    a = BICUBIC_A
    t = np.abs(distance)
    t2 = t * t
    t3 = t2 * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=128)
def resize_matrix(size_in: int, size_out: int) -> np.ndarray:
    """
    ``size_out x size_in`` bicubic interpolation matrix along one axis.

    Sample positions use half-pixel centres; taps falling outside the
    source are clamped to the border pixel.
    """
    scale = size_in / size_out
    positions = (np.arange(size_out, dtype=np.float64) + 0.5) * scale - 0.5
    first_tap = np.floor(positions).astype(np.int64) - 1
    rows = np.arange(size_out)
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    for k in range(4):
        taps = first_tap + k
        weights = _keys_kernel(positions - taps)
        np.add.at(matrix, (rows, np.clip(taps, 0, size_in - 1)), weights)
    matrix.setflags(write=False)
    return matrix


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an ``H x W x C`` image with values in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValidationError(
            f"expected an HxWxC image with C in {{1, 3}}, got shape {image.shape}",
            code="shape_mismatch",
        )
    if not np.all(np.isfinite(image)):
        raise ValidationError("non-finite input", code="non_finite_input")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValidationError("image values must lie in [0, 1]", code="out_of_range")
    return image


def bicubic_resize(image: np.ndarray, out_resolution: Tuple[int, int]) -> np.ndarray:
    """
    Resize an ``H x W x C`` image (or an ``N x H x W x C`` stack) with the
    Keys bicubic kernel; the output is clamped to [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    out_rows, out_cols = (int(v) for v in out_resolution)
    if out_rows < 1 or out_cols < 1:
        raise ValidationError(
            f"output resolution must be at least 1x1, got {out_rows}x{out_cols}",
            code="resolution_too_small",
        )
    rows, cols = image.shape[-3], image.shape[-2]
    if (rows, cols) == (out_rows, out_cols):
        return image.copy()

    along_rows = np.einsum("ih,...hwc->...iwc", resize_matrix(rows, out_rows), image)
    resized = np.einsum("jw,...iwc->...ijc", resize_matrix(cols, out_cols), along_rows)
    return np.clip(resized, 0.0, 1.0)


def apply_erosion(op: ErosionOp, image: np.ndarray) -> np.ndarray:
    """Apply T to one image; the output always has the input's shape."""
    image = check_image(image).astype(np.float64, copy=False)
    return _apply(op, image)


def apply_erosion_batch(op: ErosionOp, images: np.ndarray) -> np.ndarray:
    """Apply the same T to every image of an ``N x H x W x C`` stack."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValidationError(f"expected NxHxWxC images, got {images.shape}", code="shape_mismatch")
    return _apply(op, images)


def apply_erosions(ops: Sequence[ErosionOp], images: np.ndarray) -> np.ndarray:
    """Apply ``ops[i]`` to ``images[i]``."""
    images = np.asarray(images, dtype=np.float64)
    if len(ops) != len(images):
        raise ValidationError(
            f"{len(ops)} erosion ops for {len(images)} images", code="shape_mismatch"
        )
    eroded = np.empty_like(images)
    for position, op in enumerate(ops):
        eroded[position] = _apply(op, images[position])
    return eroded


def _apply(op: ErosionOp, image: np.ndarray) -> np.ndarray:
    rows, cols = image.shape[-3], image.shape[-2]
    op.validate_for((rows, cols))

    if op.kind == IDENTITY:
        return image.copy()

    if op.kind == BLACKOUT:
        height, width, top, left = op.mask
        eroded = image.copy()
        eroded[..., top:top + height, left:left + width, :] = 0.0
        return eroded

    reduced = bicubic_resize(image, (rows // op.factor, cols // op.factor))
    return bicubic_resize(reduced, (rows, cols))


def sample_erosion_index(erosion_set: ErosionSet, rng: np.random.Generator) -> int:
    """Draw u uniformly from {1, ..., |T|} (1-based)."""
    if len(erosion_set) == 1:
        return 1
    return int(rng.integers(1, len(erosion_set) + 1))


def sample_erosion_ops(erosion_set: ErosionSet, count: int, rng: np.random.Generator) -> List[ErosionOp]:
    """One independently drawn op per sample."""
    return [erosion_set[sample_erosion_index(erosion_set, rng) - 1] for _ in range(count)]
