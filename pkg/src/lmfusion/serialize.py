"""Versioned binary format for factor sets and trained models.

Byte layout (all integers unsigned little-endian, floats little-endian)::

    offset  size      field
    0       4         magic b"LMFS"
    4       2         format version (currently 1)
    6       1         float code: 0 = float64, 1 = float32
    7       1         reserved, 0
    8       4         M, number of modalities
    12      4         r, rank
    16      4         d_h, output dimension
    20      4*M       d_m + 1 for each modality, in modality order
    ...               factor m for m = 1..M, shape (r, d_m + 1, d_h), row-major
    ...               bias, d_h floats
    ...     4         K, number of extra named blocks (0 for a bare factor set)
    then K times:
            2         name length n
            n         name, UTF-8
            1         ndim k
            4*k       shape
            ...       data, row-major, same float type as the header

Extra blocks carry encoder and head parameters of a trained model.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .lowrank import FactorSet

MAGIC = b"LMFS"
VERSION = 1
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class FormatError(ValueError):
    pass


def _code(dtype) -> int:
    for code, dt in _CODES.items():
        if np.dtype(dtype) == dt.newbyteorder("="):
            return code
    raise FormatError(f"unsupported dtype {dtype}")


def _read(buf: io.BytesIO, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise FormatError("truncated file")
    return b


def dumps(f: FactorSet, blocks: dict[str, np.ndarray] | None = None) -> bytes:
    code = _code(f.dtype)
    dt = _CODES[code]
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HBBIII", VERSION, code, 0, f.n_modalities, f.rank, f.output_dim))
    out.write(struct.pack(f"<{f.n_modalities}I", *(F.shape[1] for F in f.factors)))
    for F in f.factors:
        out.write(np.ascontiguousarray(F, dtype=dt).tobytes())
    out.write(np.ascontiguousarray(f.bias, dtype=dt).tobytes())
    blocks = blocks or {}
    out.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return out.getvalue()


def loads(data: bytes) -> tuple[FactorSet, dict[str, np.ndarray]]:
    buf = io.BytesIO(data)
    if _read(buf, 4) != MAGIC:
        raise FormatError("bad magic; not an lmfusion file")
    version, code, _, M, r, d_h = struct.unpack("<HBBIII", _read(buf, 16))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if code not in _CODES:
        raise FormatError(f"unknown float code {code}")
    dt = _CODES[code]
    sizes = struct.unpack(f"<{M}I", _read(buf, 4 * M))

    def arr(shape):
        n = int(np.prod(shape))
        a = np.frombuffer(_read(buf, n * dt.itemsize), dtype=dt).reshape(shape)
        return a.astype(dt.newbyteorder("="))

    factors = [arr((r, s, d_h)) for s in sizes]
    bias = arr((d_h,))
    (K,) = struct.unpack("<I", _read(buf, 4))
    blocks = {}
    for _ in range(K):
        (n,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, n).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read(buf, 1))
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        blocks[name] = arr(shape)
    if buf.read(1):
        raise FormatError("trailing bytes after last block")
    return FactorSet(factors, bias), blocks


def save(path, f: FactorSet, blocks: dict[str, np.ndarray] | None = None) -> None:
    Path(path).write_bytes(dumps(f, blocks))


def load(path) -> tuple[FactorSet, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
