"""
HVMF checkpoint codec shared by the flow prior and the watermark decoder.

Layout, all little-endian:
    b"HVMF" | u16 version | u32 record count
    per record: u32 name length | UTF-8 name | u32 rank | rank x u64 dims | float32 payload
"""
import logging
import math
import struct
from typing import Dict

import numpy as np

from .const import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .exceptions import CheckpointFormatException
from .utils import atomic_write

_LOGGER = logging.getLogger(__name__)


def encode_checkpoint(records: Dict[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(records))]
    for name, value in records.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(payload)
    offset = 0

    def take(size: int) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise CheckpointFormatException(f"checkpoint truncated at byte {offset}, wanted {size} more")
        chunk = view[offset:offset + size]
        offset += size
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatException("not an HVMF checkpoint (bad magic)")
    version, count = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatException(f"unsupported HVMF version {version}")

    records = {}
    for _ in range(count):
        (name_length,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_length)).decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointFormatException(f"record name is not UTF-8 at byte {offset}") from err
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = math.prod(dims)
        if 4 * size > len(view) - offset:
            raise CheckpointFormatException(f"record {name!r} claims {size} values, more than the checkpoint holds")
        array = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(dims)
        records[name] = array.astype(np.float32)
    if offset != len(view):
        raise CheckpointFormatException(f"checkpoint has {len(view) - offset} trailing bytes")
    return records


def save_checkpoint(path, records: Dict[str, np.ndarray]):
    payload = encode_checkpoint(records)
    with atomic_write(path, "wb") as handle:
        handle.write(payload)
    _LOGGER.info("Wrote checkpoint %s (%d records, %d bytes)", path, len(records), len(payload))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as handle:
        payload = handle.read()
    _LOGGER.debug("Read checkpoint %s (%d bytes)", path, len(payload))
    return decode_checkpoint(payload)
