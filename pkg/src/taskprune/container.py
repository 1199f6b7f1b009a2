"""Binary container: a JSON header followed by raw row-major array blocks.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON
header, then the block bytes back to back. Callers own the block layout;
the header must carry whatever is needed to slice the payload back out.
"""

import json
import struct
from pathlib import Path

import numpy as np

from . import jsonio
from .errors import ValidationError

MAGIC = b"TPC1"


def write_container(path, header: dict, blocks: list[np.ndarray]) -> None:
    header_bytes = jsonio.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for block in blocks:
            fh.write(np.ascontiguousarray(block).tobytes())


def read_container(path) -> tuple[dict, bytes]:
    """Returns (header, payload bytes after the header)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a container file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    return header, raw[8 + header_len :]


def take(payload: bytes, offset: int, dtype, shape) -> tuple[np.ndarray, int]:
    """Slice one block out of the payload; returns (array, next offset)."""
    dtype = np.dtype(dtype)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(payload):
        raise ValidationError("container payload truncated")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).copy(), offset + nbytes
