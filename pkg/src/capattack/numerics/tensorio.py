"""Binary tensor serialization.

Record layout: magic ``CAPT``, u32 rank, u32 per-axis sizes, then the
payload as little-endian float64 in C order.  A file may hold several
records back to back; readers consume until end of file.
"""

import struct
from typing import BinaryIO, List

import numpy as np

from ..errors import InputError

MAGIC = b"CAPT"


def write_tensor(fp: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fp.write(MAGIC)
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
    fp.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(fp: BinaryIO) -> np.ndarray:
    magic = fp.read(4)
    if magic != MAGIC:
        raise InputError("bad tensor record: expected magic %r, got %r" % (MAGIC, magic))
    (rank,) = struct.unpack("<I", _read_exact(fp, 4))
    shape = struct.unpack("<%dI" % rank, _read_exact(fp, 4 * rank)) if rank else ()
    count = 1
    for d in shape:
        count *= d
    payload = _read_exact(fp, 8 * count)
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return arr.reshape(shape)


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise InputError("truncated tensor record: wanted %d bytes, got %d" % (n, len(data)))
    return data


def save_tensors(path, arrays: List[np.ndarray]) -> None:
    with open(path, "wb") as fp:
        for arr in arrays:
            write_tensor(fp, arr)


def load_tensors(path) -> List[np.ndarray]:
    out = []
    with open(path, "rb") as fp:
        while True:
            head = fp.read(1)
            if not head:
                return out
            fp.seek(-1, 1)
            out.append(read_tensor(fp))
