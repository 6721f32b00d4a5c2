"""Run-length bit codecs and little-endian binary helpers shared by the file formats."""
from __future__ import annotations

import base64
import struct

import numpy as np


def rle_encode(bits) -> np.ndarray:
    """Alternating run lengths of a flattened binary array, starting with a (possibly empty) zero run."""
    flat = np.asarray(bits, dtype=bool).reshape(-1)
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def rle_decode(runs, size: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != size:
        raise ValueError(f"run lengths sum to {runs.sum()}, expected {size}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs)


def rle_to_b64(bits) -> str:
    return base64.b64encode(rle_encode(bits).astype("<u4").tobytes()).decode("ascii")


def rle_from_b64(payload: str, shape) -> np.ndarray:
    runs = np.frombuffer(base64.b64decode(payload), dtype="<u4")
    return rle_decode(runs, int(np.prod(shape))).reshape(shape)


class Writer:
    def __init__(self, fh):
        self.fh = fh

    def u32(self, *v):
        self.fh.write(struct.pack(f"<{len(v)}I", *v))

    def u64(self, *v):
        self.fh.write(struct.pack(f"<{len(v)}Q", *v))

    def f64(self, *v):
        self.fh.write(struct.pack(f"<{len(v)}d", *v))

    def array(self, a, dtype: str):
        self.fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def blob(self, b: bytes):
        self.u32(len(b))
        self.fh.write(b)


class Reader:
    def __init__(self, fh):
        self.fh = fh

    def _read(self, n: int) -> bytes:
        b = self.fh.read(n)
        if len(b) != n:
            raise ValueError("truncated file")
        return b

    def magic(self, expected: bytes):
        got = self._read(len(expected))
        if got != expected:
            raise ValueError(f"bad magic {got!r}, expected {expected!r}")

    def u32(self, n: int = 1):
        v = struct.unpack(f"<{n}I", self._read(4 * n))
        return v[0] if n == 1 else v

    def u64(self, n: int = 1):
        v = struct.unpack(f"<{n}Q", self._read(8 * n))
        return v[0] if n == 1 else v

    def f64(self, n: int = 1):
        v = struct.unpack(f"<{n}d", self._read(8 * n))
        return v[0] if n == 1 else v

    def array(self, count: int, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self._read(count * dt.itemsize), dtype=dt).astype(dt.newbyteorder("="))

    def blob(self) -> bytes:
        return self._read(self.u32())

    def at_end(self) -> bool:
        pos = self.fh.tell()
        more = self.fh.read(1)
        self.fh.seek(pos)
        return not more
