"""Segment-embedding store and cosine kNN search (exact or IVF).

All vectors are unit-norm, so cosine similarity is a plain dot product. The
IVF index partitions rows over k-means centroids and answers queries by
scanning only the n_probe nearest partitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as model_mod
from .corpus import Corpus
from .errors import UsageError


@dataclass
class EmbeddingTable:
    vectors: np.ndarray                 # (n_segments, d_model), unit rows
    refs: list[tuple[int, int]]         # parallel (sample_id, seg_index)
    epoch: int

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def row_of(self) -> dict[tuple[int, int], int]:
        return {ref: i for i, ref in enumerate(self.refs)}


@dataclass
class NeighborSet:
    query_ref: tuple[int, int] | None
    neighbors: list[tuple[tuple[int, int], float]]  # (ref, cosine), descending
    truncated: bool = False  # fewer eligible rows than requested


@dataclass
class Index:
    mode: str                           # "exact" | "ivf"
    table: EmbeddingTable
    centroids: np.ndarray | None = None
    lists: list[np.ndarray] = field(default_factory=list)
    n_probe: int = 8

    @property
    def epoch(self) -> int:
        return self.table.epoch


def refresh_embeddings(params, cfg, corpus: Corpus,
                       table: EmbeddingTable | None = None,
                       batch_size: int = 64) -> EmbeddingTable:
    """Re-embed every segment with the current parameters; bump the epoch."""
    import raglet.autodiff as ad

    segs = corpus.segments
    if not segs:
        raise UsageError("cannot embed an empty corpus")
    chunks = []
    with ad.no_grad():
        for start in range(0, len(segs), batch_size):
            tokens = np.stack([np.asarray(s.tokens) for s in segs[start:start + batch_size]])
            chunks.append(model_mod.embed_segments(params, cfg, tokens).data)
    vectors = np.concatenate(chunks, axis=0)
    return EmbeddingTable(vectors=vectors, refs=corpus.refs(),
                          epoch=(table.epoch if table is not None else 0) + 1)


def kmeans(vectors: np.ndarray, n_c: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    """Lloyd iterations under cosine similarity on unit vectors.

    Centroids are renormalized means; an emptied cluster is re-seeded from the
    point worst served by its current centroid. Deterministic given the seed.
    """
    n = vectors.shape[0]
    if n_c > n:
        raise UsageError(f"n_c ({n_c}) exceeds number of vectors ({n})")
    rng = np.random.Generator(np.random.Philox(seed))
    centroids = vectors[np.sort(rng.choice(n, size=n_c, replace=False))].copy()
    prev_assign = None
    for _ in range(iters):
        sims = vectors @ centroids.T
        assign = sims.argmax(axis=1)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        best = sims[np.arange(n), assign]
        for c in range(n_c):
            members = assign == c
            if not members.any():
                worst = int(np.argmin(best))
                centroids[c] = vectors[worst]
                continue
            s = vectors[members].sum(axis=0)
            norm = np.linalg.norm(s)
            if norm > 0:
                centroids[c] = s / norm
    return centroids


def kmeans_objective(vectors: np.ndarray, centroids: np.ndarray) -> float:
    """Sum of (1 - cosine) to each vector's nearest centroid."""
    sims = vectors @ centroids.T
    return float((1.0 - sims.max(axis=1)).sum())


def build_index(table: EmbeddingTable, mode: str = "exact", n_c: int | None = None,
                n_probe: int = 8, iters: int = 25, seed: int = 0) -> Index:
    if table.n == 0:
        raise UsageError("cannot index an empty embedding table")
    if mode == "exact":
        return Index(mode="exact", table=table)
    if mode != "ivf":
        raise UsageError(f"unknown index mode {mode!r}")
    if n_c is None:
        n_c = int(np.ceil(np.sqrt(table.n)))
    centroids = kmeans(table.vectors, n_c, iters=iters, seed=seed)
    assign = (table.vectors @ centroids.T).argmax(axis=1)
    lists = [np.flatnonzero(assign == c) for c in range(n_c)]
    return Index(mode="ivf", table=table, centroids=centroids, lists=lists, n_probe=n_probe)


def knn(index: Index, query: np.ndarray, k: int,
        exclude: Callable[[tuple[int, int]], bool] | None = None,
        query_ref: tuple[int, int] | None = None) -> NeighborSet:
    """Top-k rows by cosine among those passing the exclusion predicate.

    Exact mode scans everything; IVF scans the n_probe nearest inverted
    lists. The predicate is applied at query time as a post-filter over the
    score-sorted candidates, walking past the top k as far as necessary.
    """
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    table = index.table
    if index.mode == "exact":
        cand = np.arange(table.n)
    else:
        probes = np.argsort(-(index.centroids @ query), kind="stable")[:index.n_probe]
        cand = np.concatenate([index.lists[c] for c in probes]) if len(probes) else np.array([], dtype=int)
        if cand.size == 0:
            return NeighborSet(query_ref, [], truncated=True)
    scores = table.vectors[cand] @ query
    sort = np.argsort(-scores, kind="stable")
    rows, svals = cand[sort], scores[sort]

    chosen: list[tuple[tuple[int, int], float]] = []
    for row, s in zip(rows, svals):
        ref = table.refs[row]
        if exclude is not None and exclude(ref):
            continue
        chosen.append((ref, float(s)))
        if len(chosen) == k:
            break
    return NeighborSet(query_ref, chosen, truncated=len(chosen) < k)
