"""
Binary checkpoint format shared by the repairer, φ and the resumable
training state.

Layout (little-endian): magic ``SROD``, uint32 format version, uint32
length + kind, uint32 length + UTF-8 JSON config, uint32 tensor count, then
per tensor uint32 length + name, uint32 ndim, ndim x uint32 dims and the
float32 data.
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import torch
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"SROD"
FORMAT_VERSION = 1

REPAIRER_KIND = "repairer"
PHI_KIND = "phi"
TRAIN_STATE_KIND = "train-state"
KINDS = (REPAIRER_KIND, PHI_KIND, TRAIN_STATE_KIND)

_U32 = struct.Struct("<I")


def _pack_bytes(payload: bytes) -> bytes:
    return _U32.pack(len(payload)) + payload


def encode_checkpoint(kind: str, config: Dict, tensors: "OrderedDict[str, torch.Tensor]") -> bytes:
    if kind not in KINDS:
        raise ValidationError(f"unknown checkpoint kind: {kind}", code="invalid_checkpoint")
    parts = [
        MAGIC,
        _U32.pack(FORMAT_VERSION),
        _pack_bytes(kind.encode("utf-8")),
        _pack_bytes(json.dumps(config, sort_keys=True).encode("utf-8")),
        _U32.pack(len(tensors)),
    ]
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().to(torch.float32).numpy()
        parts.append(_pack_bytes(name.encode("utf-8")))
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(dim) for dim in array.shape)
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise ValidationError(f"truncated checkpoint: {self.path}", code="truncated_checkpoint")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_checkpoint(payload: bytes, path: Path = Path("<memory>")) -> Tuple[str, Dict, "OrderedDict[str, torch.Tensor]"]:
    reader = _Reader(payload, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise ValidationError(f"not a checkpoint file: {path}", code="invalid_checkpoint")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ValidationError(
            f"checkpoint format version {version} does not match supported version {FORMAT_VERSION}",
            code="version_mismatch",
        )
    kind = reader.text()
    try:
        config = json.loads(reader.text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corrupt checkpoint config in {path}: {exc}", code="invalid_checkpoint")

    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(reader.u32()):
        name = reader.text()
        ndim = reader.u32()
        shape = tuple(reader.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(data.astype(np.float32))
    if reader.offset != len(payload):
        raise ValidationError(f"trailing bytes in checkpoint {path}", code="invalid_checkpoint")
    return kind, config, tensors


def write_checkpoint(path: Union[str, Path], kind: str, config: Dict, tensors) -> Path:
    """Write atomically: a sibling temp file is renamed over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scratch = path.with_name(path.name + ".tmp")
    with open(scratch, "wb") as handle:
        handle.write(encode_checkpoint(kind, config, tensors))
    os.replace(scratch, path)
    logger.debug(f"Wrote {kind} checkpoint {path}")
    return path


def read_checkpoint(path: Union[str, Path], expected_kind: str = None):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing checkpoint: {path}", code="missing_checkpoint")
    with open(path, "rb") as handle:
        kind, config, tensors = decode_checkpoint(handle.read(), path)
    if expected_kind and kind != expected_kind:
        raise ValidationError(
            f"{path} holds a {kind} checkpoint, expected {expected_kind}", code="invalid_checkpoint"
        )
    return kind, config, tensors


def load_tensors_into(module: torch.nn.Module, tensors: Dict[str, torch.Tensor], path: Path) -> None:
    """Copy named tensors into ``module`` after checking names and shapes against it."""
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    unexpected = sorted(set(tensors) - set(state))
    if missing or unexpected:
        raise ValidationError(
            f"checkpoint {path} tensors do not match the model (missing {missing}, unexpected {unexpected})",
            code="shape_mismatch",
        )
    for name, tensor in tensors.items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ValidationError(
                f"shape mismatch for {name} in {path}: header says {tuple(tensor.shape)}, "
                f"config implies {tuple(state[name].shape)}",
                code="shape_mismatch",
            )
    module.load_state_dict(
        OrderedDict((name, tensor.to(state[name].dtype)) for name, tensor in tensors.items())
    )
