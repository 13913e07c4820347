"""Text encoders and the binary embedding store.

Store layout (little-endian): ``b"EMB1"``, u32 rows, u32 dim, u8 precision
flag (0 = float32, 1 = float64), then the row-major payload.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import BinaryIO, Protocol, Sequence

import numpy as np

from mllmrec.errors import DimMismatch as _DimMismatch

MAGIC = b"EMB1"
_HEADER = struct.Struct("<IIB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class StoreError(ValueError):
    pass


class BadMagic(StoreError):
    pass


class DimMismatch(StoreError, _DimMismatch):
    pass


class EncoderFailure(RuntimeError):
    def __init__(self, index: int, reason: str = ""):
        self.index = index
        super().__init__(f"encoder failed on text {index}" + (f": {reason}" if reason else ""))


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Encoder(Protocol):
    dim: int

    def encode(self, texts: Sequence[str]) -> np.ndarray: ...


class StubEncoder:
    """Deterministic offline encoder: a seeded hash of each text expanded to
    ``dim`` standard normals, then L2-normalized."""

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _row(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for k, t in enumerate(texts):
            out[k] = self._row(t)
        return out


class FileEncoder:
    """Looks texts up in a precomputed embedding store.

    The store at ``path`` is paired with ``path + ".keys"``: one sha256 hex digest
    per line, naming the text each row was computed from.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.matrix = store_read(self.path)
        keys_path = Path(str(self.path) + ".keys")
        keys = keys_path.read_text(encoding="utf-8").split()
        if len(keys) != self.matrix.shape[0]:
            raise DimMismatch(f"{keys_path}: {len(keys)} keys for {self.matrix.shape[0]} rows")
        self.rows = {k: r for r, k in enumerate(keys)}
        self.dim = int(self.matrix.shape[1])

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for k, t in enumerate(texts):
            row = self.rows.get(text_key(t))
            if row is None:
                raise EncoderFailure(k, "text not present in precomputed store")
            out[k] = self.matrix[row]
        return out


def write_keyed_store(texts: Sequence[str], matrix: np.ndarray, path: str | Path,
                      precision: int = 32) -> None:
    """Write a store plus ``.keys`` sidecar readable by :class:`FileEncoder`."""
    store_write(matrix, path, precision=precision)
    Path(str(path) + ".keys").write_text("".join(text_key(t) + "\n" for t in texts),
                                         encoding="utf-8")


def encode_texts(encoder: Encoder, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
    for k, t in enumerate(texts):
        if not t:
            raise ValueError(f"text {k} is empty")
    out = np.empty((len(texts), encoder.dim))
    for start in range(0, len(texts), batch_size):
        chunk = list(texts[start:start + batch_size])
        try:
            block = np.asarray(encoder.encode(chunk), dtype=np.float64)
        except EncoderFailure as exc:
            raise EncoderFailure(start + exc.index, str(exc)) from exc
        except Exception:
            # locate the offending text
            for k, t in enumerate(chunk):
                try:
                    encoder.encode([t])
                except Exception as exc:
                    raise EncoderFailure(start + k, repr(exc)) from exc
            raise
        if block.shape != (len(chunk), encoder.dim):
            raise EncoderFailure(start, f"encoder returned shape {block.shape}")
        bad = np.flatnonzero(~np.isfinite(block).all(axis=1))
        if bad.size:
            raise EncoderFailure(start + int(bad[0]), "non-finite embedding")
        out[start:start + len(chunk)] = block
    return out


# store ----------------------------------------------------------------------

def write_matrix(fh: BinaryIO, matrix: np.ndarray, precision: int = 64) -> None:
    if precision not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    matrix = np.asarray(matrix)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    flag = 1 if precision == 64 else 0
    fh.write(MAGIC)
    fh.write(_HEADER.pack(matrix.shape[0], matrix.shape[1], flag))
    fh.write(np.ascontiguousarray(matrix, dtype=_DTYPES[flag]).tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
    header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise BadMagic("truncated header")
    rows, dim, flag = _HEADER.unpack(header)
    if flag not in _DTYPES:
        raise BadMagic(f"unknown precision flag {flag}")
    dtype = _DTYPES[flag]
    nbytes = rows * dim * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise DimMismatch(f"header declares {rows}x{dim} but payload holds {len(payload)} bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, dim).astype(dtype.newbyteorder("="))


def store_write(matrix: np.ndarray, path: str | Path, precision: int = 64) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, matrix, precision)


def store_read(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        m = read_matrix(fh)
        if fh.read(1):
            raise DimMismatch(f"{path}: trailing bytes after payload")
    return m
