"""Binary checkpoint format for named tensors plus string metadata.

Layout, all integers little-endian::

    b"MOMCKPT1" | u32 version | u32 entry count
    entry*: u32 name length | name (UTF-8) | u8 dtype code | u32 rank
            | u64 dim * rank | raw scalars
    u32 metadata count | (u32 length | key | u32 length | value)*
"""

from __future__ import annotations

from collections.abc import Mapping
import logging
import os
from pathlib import Path
import struct

import numpy as np

from .errors import CheckpointError, ConfigurationError
from .model import MomModel, parse_chunk_plan, parse_mom_config
from .modules import ModelConfig
from .routing import RouterKind
from .tensor import default_dtype

logger = logging.getLogger("momlm")

MAGIC = b"MOMCKPT1"
VERSION = 1
DTYPE_CODES = {"float32": 0, "float64": 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _string(value: str) -> bytes:
    raw = value.encode("utf8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(
    tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str]
) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        if array.dtype.name not in DTYPE_CODES:
            raise CheckpointError(f"cannot store {name} with dtype {array.dtype}")
        parts.append(_string(name))
        parts.append(struct.pack("<BI", DTYPE_CODES[array.dtype.name], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        stored = CODE_DTYPES[DTYPE_CODES[array.dtype.name]]
        parts.append(np.ascontiguousarray(array, dtype=stored).tobytes())
    parts.append(struct.pack("<I", len(metadata)))
    for key, value in metadata.items():
        parts.append(_string(key))
        parts.append(_string(value))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(
                f"checkpoint truncated at byte {self.offset} (needed {size} more)"
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (length,) = self.unpack("<I")
        try:
            return self.take(length).decode("utf8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid UTF-8 string at byte {self.offset}") from exc


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    reader = _Reader(data)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"not a momlm checkpoint (magic {magic!r})")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.string()
        code, rank = reader.unpack("<BI")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = reader.unpack(f"<{rank}Q")
        dtype = CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        array = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape)
        tensors[name] = array.astype(dtype.newbyteorder("="))
    (meta_count,) = reader.unpack("<I")
    metadata = {}
    for _ in range(meta_count):
        key = reader.string()
        metadata[key] = reader.string()
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after metadata")
    return tensors, metadata


def save_checkpoint(
    path: Path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str]
) -> None:
    """Write atomically: a temporary sibling file is renamed into place."""
    path = Path(path)
    payload = encode_checkpoint(tensors, metadata)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors, metadata = decode_checkpoint(data)
    logger.debug(f"loaded {len(tensors)} tensors from {path}")
    return tensors, metadata


def model_metadata(model: MomModel) -> dict[str, str]:
    config = model.config
    return {
        "d_model": str(config.d_model),
        "n_heads": str(config.n_heads),
        "d_ff": str(config.d_ff),
        "max_len": str(config.max_len),
        "vocab_size": str(config.vocab_size),
        "eps": repr(config.eps),
        "plan": model.plan.render(),
        "mom": "" if model.mom is None else model.mom.render(),
        "router": model.router_kind.value,
    }


def save_model(
    model: MomModel, path: Path, extra: Mapping[str, str] | None = None
) -> None:
    tensors = {name: t.data for name, t in model.named_parameters()}
    save_checkpoint(path, tensors, {**model_metadata(model), **(extra or {})})


def load_model(path: Path) -> tuple[MomModel, dict[str, str]]:
    """Rebuild a model from a checkpoint; returns it with the metadata."""
    tensors, metadata = load_checkpoint(path)
    try:
        config = ModelConfig(
            d_model=int(metadata["d_model"]),
            n_heads=int(metadata["n_heads"]),
            d_ff=int(metadata["d_ff"]),
            max_len=int(metadata["max_len"]),
            vocab_size=int(metadata["vocab_size"]),
            eps=float(metadata["eps"]),
        )
        plan = parse_chunk_plan(metadata["plan"])
        mom = parse_mom_config(metadata["mom"]) if metadata["mom"] else None
        router = RouterKind(metadata["router"])
    except (KeyError, ValueError, ConfigurationError) as exc:
        raise CheckpointError(f"checkpoint metadata is incomplete or invalid: {exc}") from exc

    dtype = next(iter(tensors.values())).dtype.name if tensors else "float32"
    with default_dtype(dtype):
        model = MomModel.build(config, plan, mom, router_kind=router)
    named = dict(model.named_parameters())
    missing = sorted(set(named) - set(tensors))
    unexpected = sorted(set(tensors) - set(named))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not match model: missing {missing}, unexpected {unexpected}"
        )
    for name, tensor in named.items():
        if tensors[name].shape != tensor.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {tensors[name].shape} != model {tensor.shape}"
            )
    for name, tensor in named.items():
        tensor.data = tensors[name]
    return model, metadata
