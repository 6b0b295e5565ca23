"""Raw tensor files (.stns).

Layout: b"STNS", version byte, dtype byte, u8 rank, rank x u32 LE extents,
row-major little-endian payload.
"""
import struct
from pathlib import Path

import numpy as np

from errors import TensorFormatError
from tensor_core import Tensor

MAGIC = b"STNS"
VERSION = 0x01
DTYPE_CODES = {np.dtype(np.float32): 0x01, np.dtype(np.float64): 0x02}
CODE_DTYPES = {0x01: np.dtype("<f4"), 0x02: np.dtype("<f8")}


def encode_tensor(value):
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    if array.dtype not in DTYPE_CODES:
        raise TensorFormatError(f"cannot store dtype {array.dtype}")
    if array.ndim > 255:
        raise TensorFormatError(f"rank {array.ndim} exceeds the format limit")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_CODES[array.dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=CODE_DTYPES[DTYPE_CODES[array.dtype]]).tobytes()
    return header + payload


def decode_tensor(blob):
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise TensorFormatError("bad magic, not an STNS tensor")
    version, code, rank = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported STNS version {version}")
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code:#04x}")
    offset = 7 + 4 * rank
    if len(blob) < offset:
        raise TensorFormatError("truncated STNS header")
    shape = struct.unpack_from(f"<{rank}I", blob, 7)
    dtype = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != offset + count * dtype.itemsize:
        raise TensorFormatError(f"payload size does not match shape {shape}")
    array = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
    return Tensor(array.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(value, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(value))
    return path


def load_tensor(path):
    path = Path(path)
    blob = path.read_bytes()
    try:
        return decode_tensor(blob)
    except TensorFormatError as e:
        raise TensorFormatError(f"{path}: {e}") from e
