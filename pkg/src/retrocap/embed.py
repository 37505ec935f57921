"""Unit-norm embedding vectors, the XEMB binary store, and mock embedders.

XEMB format (little-endian, no alignment padding):

    magic   4 bytes  b"XEMB"
    version u32      1
    dim     u32
    count   u64
    count entries of (id u64 | dim * f32)

Vectors are stored already normalized so cosine similarity is a plain dot
product at query time. Reading verifies norms and rejects violations instead
of silently renormalizing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Protocol

import numpy as np

from retrocap import rng
from retrocap.crops import Region
from retrocap.errors import (
    DataError,
    StoreInconsistentError,
    StoreMagicError,
    StoreTruncatedError,
)

MAGIC = b"XEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
NORM_TOL = 1e-5


def normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||_2 as float32. Zero, NaN or Inf input is rejected."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DataError("degenerate embedding: non-finite component")
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DataError("degenerate embedding: zero vector")
    return (v / n).astype(np.float32)


def mock_embed(payload: bytes, dim: int, seed: int) -> np.ndarray:
    """Deterministic stand-in for a pre-trained encoder.

    Hashes (seed, payload) into a counter-based stream (see retrocap.rng),
    draws `dim` Box-Muller normals and normalizes. A pure function of its
    arguments.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    state = rng.hash_stream_state(payload, seed)
    return normalize(rng.normals(state, dim))


@dataclass
class EmbeddingStore:
    """Ordered id-keyed matrix of unit-norm vectors, uniform dimension."""

    dim: int
    ids: np.ndarray      # uint64, shape (n,)
    vectors: np.ndarray  # float32, shape (n, dim)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.shape != (len(self.ids), self.dim):
            raise DataError(
                f"store shape mismatch: {self.vectors.shape} vs "
                f"({len(self.ids)}, {self.dim})"
            )
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("store ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.vectors, other.vectors)
        )


def _check_norms(vectors: np.ndarray) -> None:
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    bad = np.abs(norms - 1.0) > NORM_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise StoreInconsistentError(
            f"vector at row {i} is not unit-norm (|v| = {norms[i]:.6f})"
        )


def write_store(store: EmbeddingStore, sink: BinaryIO) -> None:
    _check_norms(store.vectors)
    sink.write(_HEADER.pack(MAGIC, VERSION, store.dim, len(store)))
    for i in range(len(store)):
        sink.write(struct.pack("<Q", int(store.ids[i])))
        sink.write(store.vectors[i].astype("<f4").tobytes())


def read_store(source: BinaryIO) -> EmbeddingStore:
    header = source.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise StoreTruncatedError("file shorter than the 20-byte header")
    magic, version, dim, count = _HEADER.unpack(header)
    if magic != MAGIC:
        raise StoreMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise StoreInconsistentError(f"unsupported version {version}")
    if dim < 1:
        raise StoreInconsistentError(f"invalid dim {dim}")
    entry_size = 8 + 4 * dim
    payload = source.read(count * entry_size + 1)
    if len(payload) < count * entry_size:
        raise StoreTruncatedError(
            f"expected {count} entries ({count * entry_size} bytes), "
            f"got {len(payload)} bytes"
        )
    if len(payload) > count * entry_size:
        raise StoreInconsistentError("trailing bytes after declared entries")
    ids = np.empty(count, dtype=np.uint64)
    vectors = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        off = i * entry_size
        ids[i] = struct.unpack_from("<Q", payload, off)[0]
        vectors[i] = np.frombuffer(payload, dtype="<f4", count=dim, offset=off + 8)
    _check_norms(vectors)
    return EmbeddingStore(dim=dim, ids=ids, vectors=vectors)


def write_store_file(store: EmbeddingStore, path) -> None:
    with open(path, "wb") as f:
        write_store(store, f)


def read_store_file(path) -> EmbeddingStore:
    with open(path, "rb") as f:
        return read_store(f)


class Embedder(Protocol):
    """Anything that maps image sub-regions and texts into the shared space."""

    dim: int

    def embed_region(self, payload: bytes, region: Region) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class MockEmbedder:
    """Hash-based embedder: no semantics, full determinism.

    Region embeddings hash the payload prefixed with the region geometry;
    text embeddings hash the UTF-8 text with a "txt:" tag so the two input
    kinds never collide.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def embed_region(self, payload: bytes, region: Region) -> np.ndarray:
        tag = f"crop:{region.x},{region.y},{region.w},{region.h}:".encode()
        return mock_embed(tag + payload, self.dim, self.seed)

    def embed_text(self, text: str) -> np.ndarray:
        return mock_embed(b"txt:" + text.encode("utf-8"), self.dim, self.seed)
