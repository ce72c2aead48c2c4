"""
Dataset Service Layer

This module ingests image datasets through a manifest file, decodes images
into float arrays in [0, 1], and delivers deterministic batches for the
training and scoring stages.

Manifest format: one record per line, ``path,split[,label[,source]]``.
``path`` may address a record inside an IDX file as ``file#index`` and may
carry the ``!vflip`` modifier (vertical flip at decode).
"""

import csv
import logging
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from PIL import Image as PILImage, UnidentifiedImageError

from erosion.services import bicubic_resize

logger = logging.getLogger(__name__)

TRAIN = "train"
VAL_ID = "val-id"
TEST_ID = "test-id"
VAL_OOD = "val-ood"
TEST_OOD = "test-ood"
SPLITS = (TRAIN, VAL_ID, TEST_ID, VAL_OOD, TEST_OOD)
ID_SPLITS = (TRAIN, VAL_ID, TEST_ID)
OOD_SPLITS = (VAL_OOD, TEST_OOD)

DEFAULT_ID_SOURCE = "id"
DEFAULT_OOD_SOURCE = "ood"

MODIFIERS = ("vflip",)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif")

# Pillow modes accepted at decode and the channel count they carry
_GRAY_MODES = ("L", "1")
_RGB_MODES = ("RGB", "P")

# ITU-R 601-2 luma, the transform Pillow applies for RGB -> L
_LUMA = np.array([0.299, 0.587, 0.114])

_IDX_DTYPES = {0x08: np.uint8}


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    label: Optional[int]
    source: str
    location: Path
    record: Optional[int] = None
    vflip: bool = False

    @property
    def is_idx(self) -> bool:
        return self.record is not None


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable list of manifest entries; index = manifest row order."""
    entries: Tuple[ManifestEntry, ...]
    path: Optional[Path] = None

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index: int) -> ManifestEntry:
        return self.entries[index]

    @property
    def n_train(self) -> int:
        return len(self.split_indices(TRAIN))

    def split_indices(self, split: str, source: Optional[str] = None) -> List[int]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split: {split}", code="unknown_split")
        return [
            index for index, entry in enumerate(self.entries)
            if entry.split == split and (source is None or entry.source == source)
        ]

    def sources(self, split: str) -> List[str]:
        """Distinct sources of a split in first-appearance order."""
        seen: List[str] = []
        for index in self.split_indices(split):
            source = self.entries[index].source
            if source not in seen:
                seen.append(source)
        return seen

    def split_counts(self) -> Dict[str, int]:
        return {split: len(self.split_indices(split)) for split in SPLITS}

    def has_labels(self, split: str) -> bool:
        indices = self.split_indices(split)
        return bool(indices) and all(self.entries[i].label is not None for i in indices)


@dataclass
class ImageBatch:
    images: np.ndarray
    indices: List[int]

    def __post_init__(self):
        if len(self.images) != len(self.indices):
            raise ValidationError(
                f"batch has {len(self.images)} images for {len(self.indices)} indices",
                code="shape_mismatch",
            )

    def __len__(self):
        return len(self.indices)

    def assert_bounds(self) -> None:
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("batch values outside [0, 1]", code="out_of_range")


def _data_root(manifest_path: Path, data_root: Optional[Union[str, Path]]) -> Path:
    root = data_root or settings.SROOD_DATA_ROOT
    return Path(root) if root else manifest_path.parent


def parse_entry_path(raw: str, root: Path) -> Tuple[Path, Optional[int], bool]:
    """Split ``file[#index][!modifier...]`` into its parts."""
    base, *modifiers = raw.split("!")
    for modifier in modifiers:
        if modifier not in MODIFIERS:
            raise ValidationError(f"unknown path modifier '!{modifier}' in {raw}", code="malformed_row")
    record = None
    if "#" in base:
        base, _, index_text = base.rpartition("#")
        if not index_text.isdigit():
            raise ValidationError(f"malformed record index in {raw}", code="malformed_row")
        record = int(index_text)
    location = Path(base)
    if not location.is_absolute():
        location = root / location
    return location, record, "vflip" in modifiers


def load_manifest(
    path: Union[str, Path],
    data_root: Optional[Union[str, Path]] = None,
    verify: bool = True,
) -> DatasetManifest:
    """
    Parse and validate a manifest.

    Relative paths resolve against ``data_root``, then ``SROOD_DATA_ROOT``,
    then the manifest's own directory. With ``verify`` every entry is
    checked to exist and the channel counts of the ID splits are compared
    (image headers only, no full decode).
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}", code="missing_file")
    root = _data_root(path, data_root)

    entries: List[ManifestEntry] = []
    seen: Dict[Tuple[Path, Optional[int], bool], str] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        for line_number, row in enumerate(csv.reader(handle), start=1):
            row = [cell.strip() for cell in row]
            if not row or not any(row) or row[0].startswith("#"):
                continue
            if len(row) < 2 or len(row) > 4 or not row[0]:
                raise ValidationError(f"malformed row at line {line_number}: {row}", code="malformed_row")
            raw_path, split = row[0], row[1]
            if split not in SPLITS:
                raise ValidationError(
                    f"unknown split '{split}' at line {line_number}", code="unknown_split"
                )
            label = None
            if len(row) >= 3 and row[2]:
                try:
                    label = int(row[2])
                except ValueError:
                    raise ValidationError(
                        f"malformed label '{row[2]}' at line {line_number}", code="malformed_row"
                    )
            source = row[3] if len(row) == 4 and row[3] else (
                DEFAULT_ID_SOURCE if split in ID_SPLITS else DEFAULT_OOD_SOURCE
            )
            location, record, vflip = parse_entry_path(raw_path, root)
            key = (location.resolve(), record, vflip)
            if key in seen:
                raise ValidationError(
                    f"duplicate path '{raw_path}' in splits {seen[key]} and {split}",
                    code="duplicate_path",
                )
            seen[key] = split
            entries.append(ManifestEntry(raw_path, split, label, source, location, record, vflip))

    if not entries:
        raise ValidationError(f"empty manifest: {path}", code="empty_manifest")

    manifest = DatasetManifest(tuple(entries), path)
    if verify:
        _verify_manifest(manifest)
    logger.info(f"Loaded manifest {path} with split counts {manifest.split_counts()}")
    return manifest


def _verify_manifest(manifest: DatasetManifest) -> None:
    id_channels: Dict[int, str] = {}
    for entry in manifest.entries:
        if not entry.location.is_file():
            raise ValidationError(f"image not found: {entry.location}", code="missing_file")
        channels = peek_channels(entry)
        if entry.split in ID_SPLITS:
            id_channels.setdefault(channels, entry.path)
    if len(id_channels) > 1:
        raise ValidationError(
            f"ID splits mix channel counts {sorted(id_channels)}", code="channel_mismatch"
        )


def peek_channels(entry: ManifestEntry) -> int:
    """Channel count of an entry from its header."""
    if entry.is_idx:
        records = _read_idx(str(entry.location))
        if entry.record >= len(records):
            raise ValidationError(
                f"record {entry.record} out of range for {entry.location}", code="malformed_row"
            )
        return 1 if records.ndim == 3 else records.shape[3]
    try:
        with PILImage.open(entry.location) as image:
            return _mode_channels(image.mode, entry.location)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValidationError(f"unreadable image {entry.location}: {exc}", code="unreadable_image")


def _mode_channels(mode: str, location: Path) -> int:
    if mode in _GRAY_MODES:
        return 1
    if mode in _RGB_MODES:
        return 3
    raise ValidationError(
        f"unsupported channel layout '{mode}' in {location}", code="unsupported_channels"
    )


@lru_cache(maxsize=8)
def _read_idx(location: str) -> np.ndarray:
    """Decode a whole IDX file (big-endian header, unsigned bytes)."""
    try:
        with open(location, "rb") as handle:
            payload = handle.read()
    except OSError as exc:
        raise ValidationError(f"unreadable image {location}: {exc}", code="unreadable_image")
    if len(payload) < 4 or payload[0] != 0 or payload[1] != 0:
        raise ValidationError(f"not an IDX file: {location}", code="unreadable_image")
    dtype_code, ndim = payload[2], payload[3]
    if dtype_code not in _IDX_DTYPES:
        raise ValidationError(f"unsupported IDX element type {dtype_code:#x}", code="unreadable_image")
    header_end = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", payload[4:header_end])
    expected = int(np.prod(dims))
    data = np.frombuffer(payload, dtype=_IDX_DTYPES[dtype_code], offset=header_end)
    if data.size != expected:
        raise ValidationError(f"truncated IDX file: {location}", code="unreadable_image")
    records = data.reshape(dims)
    records.setflags(write=False)
    return records


def read_idx_labels(location: Union[str, Path]) -> np.ndarray:
    labels = _read_idx(str(location))
    if labels.ndim != 1:
        raise ValidationError(f"{location} is not an IDX label file", code="unreadable_image")
    return labels


def _decode_pixels(entry: ManifestEntry) -> np.ndarray:
    if entry.is_idx:
        records = _read_idx(str(entry.location))
        if entry.record >= len(records):
            raise ValidationError(
                f"record {entry.record} out of range for {entry.location}", code="malformed_row"
            )
        pixels = np.asarray(records[entry.record], dtype=np.float64)
    else:
        try:
            with PILImage.open(entry.location) as image:
                channels = _mode_channels(image.mode, entry.location)
                if image.mode != ("L" if channels == 1 else "RGB"):
                    image = image.convert("L" if channels == 1 else "RGB")
                pixels = np.asarray(image, dtype=np.float64)
        except (UnidentifiedImageError, OSError) as exc:
            raise ValidationError(f"unreadable image {entry.location}: {exc}", code="unreadable_image")
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.shape[2] not in (1, 3):
        raise ValidationError(
            f"unsupported channel count {pixels.shape[2]} in {entry.location}",
            code="unsupported_channels",
        )
    return pixels / 255.0


def convert_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Map between grayscale and RGB."""
    if image.shape[2] == channels:
        return image
    if channels == 1:
        return np.clip(image @ _LUMA, 0.0, 1.0)[:, :, None]
    if channels == 3:
        return np.repeat(image, 3, axis=2)
    raise ValidationError(f"unsupported channel count {channels}", code="unsupported_channels")


def decode_image(
    path: Union[ManifestEntry, str, Path],
    resolution: Tuple[int, int],
    channels: Optional[int] = None,
) -> np.ndarray:
    """
    Decode one image to an ``H x W x C`` float array in [0, 1].

    Sources whose size differs from ``resolution`` are bicubic-resized.
    When ``channels`` is given, grayscale and RGB sources are converted.
    """
    if isinstance(path, ManifestEntry):
        entry = path
    else:
        location, record, vflip = parse_entry_path(str(path), Path.cwd())
        entry = ManifestEntry(str(path), TEST_ID, None, DEFAULT_ID_SOURCE, location, record, vflip)

    image = _decode_pixels(entry)
    if entry.vflip:
        image = image[::-1]
    if channels is not None:
        image = convert_channels(image, channels)
    if image.shape[:2] != tuple(resolution):
        image = bicubic_resize(image, resolution)
    return np.ascontiguousarray(image, dtype=np.float64)


class ImageLoader:
    """
    Decodes manifest entries at a fixed resolution and keeps them in memory.

    Decoding runs on a thread pool; results are always returned in the
    order of the requested indices.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        resolution: Tuple[int, int],
        channels: Optional[int] = None,
        workers: Optional[int] = None,
    ):
        self.manifest = manifest
        self.resolution = tuple(int(v) for v in resolution)
        self.channels = channels
        self.workers = workers or settings.SROOD_NUM_WORKERS
        self._cache: Dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def _decode(self, index: int) -> np.ndarray:
        return decode_image(self.manifest[index], self.resolution, self.channels)

    def images(self, indices: Sequence[int]) -> np.ndarray:
        indices = [int(i) for i in indices]
        for index in indices:
            if index < 0 or index >= len(self.manifest):
                raise ValidationError(f"manifest index {index} out of range", code="invalid_index")
        with self._lock:
            missing = sorted({i for i in indices if i not in self._cache})
        if missing:
            if self.workers > 1 and len(missing) > 1:
                with ThreadPoolExecutor(max_workers=self.workers) as pool:
                    decoded = list(pool.map(self._decode, missing))
            else:
                decoded = [self._decode(index) for index in missing]
            with self._lock:
                self._cache.update(zip(missing, decoded))
        if not indices:
            channels = self.channels or 1
            return np.zeros((0, *self.resolution, channels), dtype=np.float64)
        return np.stack([self._cache[i] for i in indices])

    def split(self, split: str, source: Optional[str] = None) -> ImageBatch:
        """Every image of a split (optionally one source), in manifest order."""
        indices = self.manifest.split_indices(split, source)
        return ImageBatch(self.images(indices), indices)


def sample_indices(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    rng: np.random.Generator,
) -> List[int]:
    """B distinct manifest indices drawn uniformly without replacement."""
    candidates = manifest.split_indices(split)
    if not candidates:
        raise ValidationError(f"split '{split}' is empty", code="empty_split")
    if batch_size < 1:
        raise ValidationError(f"batch size must be positive, got {batch_size}", code="invalid_batch")
    if batch_size > len(candidates):
        raise ValidationError(
            f"batch size {batch_size} exceeds split '{split}' size {len(candidates)}",
            code="batch_too_large",
        )
    picks = rng.choice(len(candidates), size=batch_size, replace=False)
    return [candidates[int(p)] for p in picks]


def sample_batch(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    rng: np.random.Generator,
    loader: Optional[ImageLoader] = None,
    resolution: Optional[Tuple[int, int]] = None,
) -> ImageBatch:
    """
    Draw a batch from ``split``; fully reproducible from the generator state.

    Images come from ``loader`` (which caches decodes) or are decoded at
    ``resolution``.
    """
    indices = sample_indices(manifest, split, batch_size, rng)
    if loader is None:
        if resolution is None:
            raise ValidationError("sample_batch needs a loader or a resolution", code="invalid_batch")
        loader = ImageLoader(manifest, resolution)
    elif loader.manifest is not manifest:
        raise ValidationError("loader was built for a different manifest", code="invalid_batch")
    batch = ImageBatch(loader.images(indices), indices)
    batch.assert_bounds()
    return batch


def _corpus_items(corpus: Union[str, Path]) -> List[str]:
    """Manifest paths for every image of a PNG directory or an IDX file."""
    corpus = Path(corpus)
    if corpus.is_dir():
        items = sorted(
            str(p) for p in corpus.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES
        )
    elif corpus.is_file():
        items = [f"{corpus}#{i}" for i in range(len(_read_idx(str(corpus))))]
    else:
        raise ValidationError(f"corpus not found: {corpus}", code="missing_file")
    if not items:
        raise ValidationError(f"corpus {corpus} holds no images", code="empty_split")
    return items


@dataclass
class ManifestPlan:
    """What :func:`write_manifest` should produce."""
    id_corpus: str
    ood_corpora: Dict[str, str] = field(default_factory=dict)
    id_labels: Optional[str] = None
    id_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    ood_fraction_val: float = 0.5
    id_limit: Optional[int] = None
    ood_limit: Optional[int] = None
    vflip_source: bool = False
    seed: int = 0


def write_manifest(out_path: Union[str, Path], plan: ManifestPlan, rng: np.random.Generator) -> DatasetManifest:
    """
    Build a manifest from an ID corpus and OOD corpora (PNG directories or
    IDX files), with seeded, disjoint splits.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    base = out_path.parent.resolve()

    def relative(item: str) -> str:
        location, _, suffix = item.partition("#")
        location = os.path.relpath(Path(location).resolve(), base)
        return f"{location}#{suffix}" if suffix else location

    id_items = _corpus_items(plan.id_corpus)
    labels = read_idx_labels(plan.id_labels) if plan.id_labels else None
    order = rng.permutation(len(id_items))
    if plan.id_limit:
        order = order[:plan.id_limit]
    n_train = int(round(plan.id_fractions[0] * len(order)))
    n_val = int(round(plan.id_fractions[1] * len(order)))
    id_splits = {
        TRAIN: order[:n_train],
        VAL_ID: order[n_train:n_train + n_val],
        TEST_ID: order[n_train + n_val:],
    }

    rows: List[List[str]] = []
    for split, picks in id_splits.items():
        for pick in sorted(int(p) for p in picks):
            label = "" if labels is None else str(int(labels[pick]))
            rows.append([relative(id_items[pick]), split, label, DEFAULT_ID_SOURCE])

    for source, corpus in plan.ood_corpora.items():
        items = _corpus_items(corpus)
        picks = rng.permutation(len(items))
        if plan.ood_limit:
            picks = picks[:plan.ood_limit]
        n_val_ood = int(round(plan.ood_fraction_val * len(picks)))
        for split, chosen in ((VAL_OOD, picks[:n_val_ood]), (TEST_OOD, picks[n_val_ood:])):
            for pick in sorted(int(p) for p in chosen):
                rows.append([relative(items[pick]), split, "", source])

    if plan.vflip_source:
        for split, id_split in ((VAL_OOD, VAL_ID), (TEST_OOD, TEST_ID)):
            for pick in sorted(int(p) for p in id_splits[id_split]):
                rows.append([relative(id_items[pick]) + "!vflip", split, "", "vflip"])

    with open(out_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in rows:
            while row and row[-1] == "" and len(row) > 2:
                row.pop()
            if len(row) == 3 and row[2] == "":
                row = row[:2]
            writer.writerow(row)

    logger.info(f"Wrote manifest {out_path} with {len(rows)} entries")
    return load_manifest(out_path, data_root=out_path.parent)


def iter_chunks(indices: Sequence[int], size: int) -> Iterable[List[int]]:
    for start in range(0, len(indices), size):
        yield list(indices[start:start + size])
