"""
HNK1 checkpoint files.

Layout: the magic b"HNK1", then per parameter in lexicographic name order: u32 name length,
UTF-8 name, u8 group tag (0 enc, 1 det, 2 seg), u32 rank, u32 dims, little-endian f64 values.
All integers are little-endian.
"""
from __future__ import annotations

import logging
import struct
from typing import BinaryIO, NamedTuple

import numpy as np

from .exception import HnkExceptBadFile
from .model import GROUPS, ModelConfig, ModelParams, build
from .tensor import Tensor

MAGIC = b"HNK1"
GROUP_TAGS = {group: tag for tag, group in enumerate(GROUPS)}

logger = logging.getLogger("debug_log")


class StoredParam(NamedTuple):
    group: str
    data: np.ndarray


def encode_checkpoint(params: ModelParams) -> bytes:
    chunks = [MAGIC]
    for name in sorted(params.tensors):
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", GROUP_TAGS[params.groups[name]], data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.payload):
            raise HnkExceptBadFile(f"Checkpoint {self.source} is truncated while reading {what} "
                                   f"at byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.payload)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> dict[str, StoredParam]:
    reader = _Reader(payload, source)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise HnkExceptBadFile(f"Checkpoint {source} does not start with {MAGIC!r}")
    tags = {tag: group for group, tag in GROUP_TAGS.items()}
    stored: dict[str, StoredParam] = {}
    previous = None
    while not reader.exhausted:
        (name_length,) = reader.unpack("<I", "name length")
        try:
            name = reader.take(name_length, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise HnkExceptBadFile(f"Checkpoint {source}: parameter name at byte {reader.offset} is not UTF-8")
        if previous is not None and name <= previous:
            raise HnkExceptBadFile(f"Checkpoint {source}: parameter {name} is out of lexicographic order")
        tag, rank = reader.unpack("<BI", f"header of {name}")
        if tag not in tags:
            raise HnkExceptBadFile(f"Checkpoint {source}: parameter {name} has unknown group tag {tag}")
        shape = reader.unpack(f"<{rank}I", f"shape of {name}")
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * count, f"values of {name}"), dtype="<f8")
        stored[name] = StoredParam(tags[tag], values.reshape(shape).astype(np.float64))
        previous = name
    return stored


def save_checkpoint(params: ModelParams, path: str):
    with open(path, "wb") as handle:
        handle.write(encode_checkpoint(params))
    logger.debug(f"Wrote checkpoint {path} ({len(params)} tensors)")


def read_checkpoint(handle: BinaryIO, source: str) -> dict[str, StoredParam]:
    return decode_checkpoint(handle.read(), source)


def load_checkpoint(path: str, cfg: ModelConfig) -> ModelParams:
    """
    Restores parameters into the layout cfg describes. Names, groups and shapes must match exactly.
    """
    try:
        with open(path, "rb") as handle:
            stored = read_checkpoint(handle, path)
    except OSError as e:
        raise HnkExceptBadFile(f"Cannot read checkpoint {path}: {e}")
    template = build(cfg, 0)
    missing = sorted(set(template.tensors) - set(stored))
    extra = sorted(set(stored) - set(template.tensors))
    if missing or extra:
        raise HnkExceptBadFile(f"Checkpoint {path} does not fit the configured model. "
                               f"Missing: {missing[:5]}, unexpected: {extra[:5]}")
    tensors = {}
    for name, entry in stored.items():
        expected = template[name]
        if entry.data.shape != expected.shape:
            raise HnkExceptBadFile(f"Checkpoint {path}: {name} has shape {entry.data.shape}, "
                                   f"model expects {expected.shape}")
        if entry.group != template.groups[name]:
            raise HnkExceptBadFile(f"Checkpoint {path}: {name} is tagged {entry.group}, "
                                   f"model puts it in {template.groups[name]}")
        tensors[name] = Tensor(entry.data, requires_grad=True, name=name)
    logger.debug(f"Loaded checkpoint {path}")
    return ModelParams(cfg, tensors)
