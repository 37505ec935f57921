"""Exact top-k cosine retrieval over a description embedding store.

One query per crop region; the result is the indexed family of per-crop hit
lists used downstream as text tokens. Search is exact (no approximate
indexing) and deterministic: ties in score break by ascending description id.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from retrocap import kernels
from retrocap.crops import CropId, Region, generate_all_crops
from retrocap.embed import Embedder, EmbeddingStore
from retrocap.errors import DataError

QUERY_NORM_TOL = 1e-3


@dataclass(frozen=True)
class RetrievalHit:
    description_id: int
    score: float
    rank: int


@dataclass
class RetrievalSet:
    """Per-crop hit lists, keyed by CropId, in canonical crop order."""

    per_crop: dict[CropId, list[RetrievalHit]]

    def total_hits(self) -> int:
        return sum(len(v) for v in self.per_crop.values())

    def to_json_dict(self) -> dict:
        return {
            crop.key(): [
                {"id": h.description_id, "score": h.score, "rank": h.rank}
                for h in hits
            ]
            for crop, hits in self.per_crop.items()
        }


def cosine_topk(query: np.ndarray, store: EmbeddingStore, k: int) -> list[RetrievalHit]:
    """min(k, N) hits sorted by (score desc, id asc); scores are float64 dots."""
    if len(store) == 0:
        raise DataError("cannot search an empty store")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (store.dim,):
        raise DataError(f"query dim {q.shape} does not match store dim {store.dim}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > QUERY_NORM_TOL:
        raise DataError(f"query is not unit-norm (|q| = {norm:.6f})")
    if k > len(store):
        warnings.warn(
            f"k={k} exceeds store size {len(store)}; clamping", stacklevel=2
        )
        k = len(store)
    rows, scores = kernels.topk(store.vectors, store.ids, q, k)
    return [
        RetrievalHit(description_id=int(store.ids[r]), score=float(s), rank=i)
        for i, (r, s) in enumerate(zip(rows, scores))
    ]


def batch_retrieve(
    image_payload: bytes,
    width: int,
    height: int,
    embedder: Embedder,
    store: EmbeddingStore,
    k: int,
    five_ratio: float = 0.6,
    nine_ratio: float = 0.5,
) -> RetrievalSet:
    """Embed all 15 crops of the image and run top-k search for each."""
    per_crop: dict[CropId, list[RetrievalHit]] = {}
    for crop_id, region in generate_all_crops(width, height, five_ratio, nine_ratio):
        q = embedder.embed_region(image_payload, region)
        per_crop[crop_id] = cosine_topk(q, store, k)
    return RetrievalSet(per_crop=per_crop)


def full_image_embedding(
    image_payload: bytes, width: int, height: int, embedder: Embedder
) -> np.ndarray:
    """Global image feature: the embedding of the original (full) region."""
    return embedder.embed_region(image_payload, Region(0, 0, width, height))
