"""ACLK1 checkpoint container.

Layout (little-endian): magic b"ACLK1", u32 record count, then per record
u16 name length, name bytes, u8 dtype tag, u8 rank, rank x u32 extents, payload.
Boolean tensors (masks, flags) are stored as packed bits.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from src.core.errors import FormatError
from src.models.network import Network

logger = logging.getLogger(__name__)

MAGIC = b"ACLK1"
TAG_FLOAT32 = 1
TAG_FLOAT64 = 2
TAG_INT64 = 3
TAG_BITS = 4

_NUMERIC_TAGS = {TAG_FLOAT32: np.dtype("<f4"), TAG_FLOAT64: np.dtype("<f8"), TAG_INT64: np.dtype("<i8")}
_TAG_FOR_KIND = {np.dtype("float32"): TAG_FLOAT32, np.dtype("float64"): TAG_FLOAT64, np.dtype("int64"): TAG_INT64}


def encode_records(records: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(records))]
    for name, array in records.items():
        array = np.asarray(array)
        raw_name = name.encode("utf-8")
        if array.dtype == bool:
            tag = TAG_BITS
            payload = np.packbits(array.ravel(), bitorder="little").tobytes()
        else:
            tag = _TAG_FOR_KIND.get(array.dtype)
            if tag is None:
                raise FormatError(f"unsupported dtype {array.dtype}", field=name)
            payload = np.ascontiguousarray(array, dtype=_NUMERIC_TAGS[tag]).tobytes()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", tag, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated payload", field=field)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode_records(data: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not an ACLK1 checkpoint", field="magic")
    (count,) = struct.unpack("<I", reader.take(4, "record_count"))
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2, "name_length"))
        name = reader.take(name_len, "name").decode("utf-8")
        tag, rank = struct.unpack("<BB", reader.take(2, f"{name}.dtype"))
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"{name}.extents"))
        size = int(np.prod(shape)) if rank else 1
        if tag == TAG_BITS:
            packed = np.frombuffer(reader.take((size + 7) // 8, name), dtype=np.uint8)
            array = np.unpackbits(packed, count=size, bitorder="little").astype(bool)
        elif tag in _NUMERIC_TAGS:
            dtype = _NUMERIC_TAGS[tag]
            array = np.frombuffer(reader.take(size * dtype.itemsize, name), dtype=dtype).astype(dtype.newbyteorder("="))
        else:
            raise FormatError(f"unknown dtype tag {tag}", field=f"{name}.dtype")
        records[name] = array.reshape(shape)
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} bytes after {count} records", field="record_count")
    return records


def save_checkpoint(network: Network, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_records(network.state_dict()))
    logger.info(f"Checkpoint written: {path}")
    return path


def read_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_records(Path(path).read_bytes())


def load_checkpoint(network: Network, path: Union[str, Path]) -> Network:
    network.load_state_dict(read_checkpoint(path))
    return network
