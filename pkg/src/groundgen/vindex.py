"""Exact cosine top-k search over unit-norm entity embeddings."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from groundgen import binfmt
from groundgen.encoders import EncoderInterface
from groundgen.errors import (
    DegenerateEmbeddingError,
    DimensionError,
    DomainError,
    EmptyIndexError,
    GroundGenError,
    IndexBuildError,
)
from groundgen.kb import KnowledgeBase

NORM_TOL = 1e-5
DEFAULT_K = 300


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [eid for eid, _ in self.ranked]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.ranked]

    def __len__(self) -> int:
        return len(self.ranked)


class VectorIndex:
    """Row-aligned (entity_id, unit vector) table stored as float32."""

    def __init__(self, row_ids: Sequence[str], matrix: np.ndarray) -> None:
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(row_ids):
            raise DimensionError("index matrix must be n x d with one row per id")
        if len(set(row_ids)) != len(row_ids):
            raise IndexBuildError("duplicate row ids in index")
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise IndexBuildError(f"row {row_ids[bad[0]]!r} has norm {norms[bad[0]]:.6g}")
        self.row_ids = list(row_ids)
        self.matrix = matrix
        self._matrix64 = matrix.astype(np.float64)
        # tie rule: equal scores order by ascending entity_id
        order = sorted(range(len(row_ids)), key=lambda i: row_ids[i])
        self._id_rank = np.empty(len(row_ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(row_ids))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str | Path) -> None:
        binfmt.write_index(path, self.row_ids, self.matrix)

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        row_ids, matrix = binfmt.read_index(path)
        return cls(row_ids, matrix)


def build_index(kb: KnowledgeBase, entity_encoder: EncoderInterface, *, jobs: int = 1) -> VectorIndex:
    """Encode every entity (in entity_id order) and normalize the rows."""
    entities = list(kb)
    if not entities:
        raise EmptyIndexError("knowledge base is empty")

    def encode_one(entity):
        try:
            vec = np.asarray(entity_encoder.entity_encode(entity), dtype=np.float64)
        except DegenerateEmbeddingError as exc:
            raise DegenerateEmbeddingError(f"entity {entity.entity_id!r}: {exc}") from exc
        except GroundGenError as exc:
            raise IndexBuildError(f"encoder failed on entity {entity.entity_id!r}: {exc}") from exc
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise IndexBuildError(f"encoder returned a malformed vector for {entity.entity_id!r}")
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise DegenerateEmbeddingError(f"entity {entity.entity_id!r} encodes to the zero vector")
        return vec / norm

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(encode_one, entities))
    else:
        rows = [encode_one(e) for e in entities]
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise IndexBuildError(f"encoder produced inconsistent dimensions {sorted(dims)}")
    matrix = np.stack(rows).astype(np.float32)
    # float32 rounding can nudge norms; renormalize in float64 and round once more
    matrix = (matrix / np.linalg.norm(matrix.astype(np.float64), axis=1, keepdims=True)).astype(np.float32)
    return VectorIndex([e.entity_id for e in entities], matrix)


def cosine_sim(q: Sequence[float], e: Sequence[float]) -> float:
    qa = np.asarray(q, dtype=np.float64)
    ea = np.asarray(e, dtype=np.float64)
    if qa.shape != ea.shape or qa.ndim != 1:
        raise DimensionError(f"dimension mismatch: {qa.shape} vs {ea.shape}")
    nq = math.sqrt(float(qa @ qa))
    ne = math.sqrt(float(ea @ ea))
    if nq == 0.0 or ne == 0.0:
        raise DomainError("cosine similarity undefined for a zero vector")
    value = float(qa @ ea) / (nq * ne)
    return max(-1.0, min(1.0, value))


def topk(index: VectorIndex, q: Sequence[float], k: int = DEFAULT_K, *, precise: bool = False) -> RetrievalResult:
    """Exact top-k by cosine similarity.

    ``precise`` scores in float64 against the float32-stored rows; the
    default path scores in float32.
    """
    if index.n == 0:
        raise EmptyIndexError("cannot search an empty index")
    if k < 1:
        raise ValueError("k must be at least 1")
    qa = np.asarray(q, dtype=np.float64)
    if qa.shape != (index.d,):
        raise DimensionError(f"query dim {qa.shape} != index dim {index.d}")
    if abs(np.linalg.norm(qa) - 1.0) > NORM_TOL:
        raise DomainError("query vector must be unit norm")
    # row-wise reduction instead of matmul: BLAS kernels may round identical
    # rows differently depending on their position, which would break ties
    if precise:
        scores = (index._matrix64 * qa).sum(axis=1)
    else:
        scores = (index.matrix * qa.astype(np.float32)).sum(axis=1).astype(np.float64)
    kk = min(k, index.n)
    if kk < index.n:
        # keep everything tied with the k-th score so the id tie rule is exact
        kth = np.partition(scores, index.n - kk)[index.n - kk]
        pool = np.flatnonzero(scores >= kth)
    else:
        pool = np.arange(index.n)
    order = pool[np.lexsort((index._id_rank[pool], -scores[pool]))][:kk]
    return RetrievalResult(tuple((index.row_ids[i], float(scores[i])) for i in order))
