"""Image semantic balance: chunked top-k neighbors, union-find, representatives.

The pipeline mirrors a single traversal of the data: the embedding matrix is
split into chunks, Euclidean top-k neighbor lists are computed per
(query chunk x reference chunk) pair, merged into a global neighbor table,
items closer than the threshold ``beta`` are unioned into sets, and one
representative per set (the member nearest the set centroid) is kept.

Exactness contract: results are bit-identical for every chunk count, and
``balance`` with k >= N-1 matches ``brute_force_balance`` exactly. BLAS
matrix products are not bit-stable across operand shapes, so they are used
only to preselect candidates with a safety margin; every distance that is
stored, compared against ``beta``, or used to rank candidates is recomputed
with a per-pair formula (elementwise subtract, square, sum over the feature
axis) whose rounding depends only on the two rows involved.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .store import EmbeddingSet
from .unionfind import UnionFind

# Memory budget per temporary block in the distance kernels.
_BLOCK_BUDGET = 128 * 2**20

# Safety margin on squared distances for the float32 preselection pass.
# The GEMM error for d <= a few hundred is ~1e-5 relative to the squared
# norms; the margin must dominate it so no true top-k candidate is missed.
_PRESELECT_MARGIN = 1e-4


def _worker_count() -> int:
    env = os.environ.get("EMBALANCE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ChunkTopK:
    """Per-chunk top-k partial: k nearest reference items per query row.

    Rows are sorted ascending by (distance, global index). Rows with fewer
    than k candidates are padded with +inf distance and index -1. The query
    item itself is never listed.
    """

    query_range: tuple[int, int]
    ref_range: tuple[int, int]
    k: int
    distances: np.ndarray  # (m, k) float64
    indices: np.ndarray  # (m, k) int64


@dataclass(frozen=True)
class NeighborTable:
    """Global top-k table: row i holds the k nearest retained candidates."""

    count: int
    k: int
    distances: np.ndarray
    indices: np.ndarray


@dataclass(frozen=True)
class Partition:
    """Disjoint sets over item indices; ``parent`` is fully compressed."""

    parent: np.ndarray  # (N,) int64, parent[i] is the root of i's set
    set_count: int

    def find(self, i: int) -> int:
        return int(self.parent[i])


@dataclass(frozen=True)
class BalanceResult:
    kept: np.ndarray  # sorted int64 indices, one per set
    removed_fraction: float
    set_sizes: dict[int, int] = field(default_factory=dict)  # size -> count
    beta: float = 0.0
    k: int = 0


def _exact_sqdist_block(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Per-pair deterministic squared distances, (m, n) from (m,d) x (n,d)."""
    return ((q[:, None, :] - r[None, :, :]) ** 2).sum(axis=2)


def _exact_sqdist_gathered(q: np.ndarray, gathered: np.ndarray) -> np.ndarray:
    """Same formula for (m, d) queries against a (m, c, d) candidate gather."""
    return ((q[:, None, :] - gathered) ** 2).sum(axis=2)


def _sorted_topk(d2: np.ndarray, gidx: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Sort candidate rows by (distance, index) and truncate or pad to k."""
    m, c = d2.shape
    order = np.lexsort((gidx, d2), axis=-1)
    if c >= k:
        order = order[:, :k]
        out_d2 = np.take_along_axis(d2, order, axis=1)
        out_ix = np.take_along_axis(gidx, order, axis=1)
    else:
        out_d2 = np.full((m, k), np.inf)
        out_ix = np.full((m, k), -1, dtype=np.int64)
        out_d2[:, :c] = np.take_along_axis(d2, order, axis=1)
        out_ix[:, :c] = np.take_along_axis(gidx, order, axis=1)
    out_ix[~np.isfinite(out_d2)] = -1
    return out_d2, out_ix


def chunk_topk(
    emb: EmbeddingSet,
    query_range: tuple[int, int],
    ref_range: tuple[int, int],
    k: int,
) -> ChunkTopK:
    """k nearest reference items (Euclidean, self excluded) per query row.

    Candidates are preselected blockwise with a float32 Gram product plus a
    margin, then the retained pairs are re-ranked with exact per-pair
    squared distances so the output does not depend on block or chunk
    boundaries. Ties are broken by lower global index.
    """
    n = emb.count
    q0, q1 = query_range
    r0, r1 = ref_range
    if k < 1:
        raise ValueError("k must be >= 1")
    if not (0 <= q0 < q1 <= n):
        raise ValueError(f"empty or out-of-bounds query range {query_range}")
    if not (0 <= r0 <= r1 <= n):
        raise ValueError(f"out-of-bounds ref range {ref_range}")

    x32 = emb.data
    x64 = x32.astype(np.float64)
    sqn32 = (x32.astype(np.float64) ** 2).sum(axis=1).astype(np.float32)
    return _chunk_topk_arrays(x32, x64, sqn32, q0, q1, r0, r1, k)


def _chunk_topk_arrays(
    x32: np.ndarray,
    x64: np.ndarray,
    sqn32: np.ndarray,
    q0: int,
    q1: int,
    r0: int,
    r1: int,
    k: int,
) -> ChunkTopK:
    m = q1 - q0
    nref = r1 - r0
    dim = x32.shape[1]
    out_d = np.full((m, k), np.inf)
    out_i = np.full((m, k), -1, dtype=np.int64)
    if nref == 0:
        return ChunkTopK((q0, q1), (r0, r1), k, out_d, out_i)

    ref32 = x32[r0:r1]
    ref_sqn = sqn32[r0:r1]
    margin = np.float32(_PRESELECT_MARGIN * max(1.0, 2.0 * float(sqn32.max())))
    rows_per_block = max(1, _BLOCK_BUDGET // (max(nref, k) * 8))

    for b0 in range(0, m, rows_per_block):
        b1 = min(b0 + rows_per_block, m)
        g0, g1 = q0 + b0, q0 + b1
        approx = sqn32[g0:g1, None] + ref_sqn[None, :] - 2.0 * (x32[g0:g1] @ ref32.T)
        # self pairs can never be neighbors
        lo, hi = max(g0, r0), min(g1, r1)
        if lo < hi:
            rows = np.arange(lo, hi)
            approx[rows - g0, rows - r0] = np.inf

        if nref <= k:
            cand = np.broadcast_to(np.arange(nref, dtype=np.int64), (b1 - b0, nref))
        else:
            kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
            thresh = kth + margin
            counts = (approx <= thresh[:, None]).sum(axis=1)
            mc = int(min(max(k, counts.max()), nref))
            cand = np.argpartition(approx, mc - 1, axis=1)[:, :mc].astype(np.int64)

        gidx = cand + r0
        # exact per-pair distances for the retained candidates only
        sub = max(1, _BLOCK_BUDGET // (gidx.shape[1] * dim * 8))
        d2 = np.empty(gidx.shape)
        for s0 in range(0, b1 - b0, sub):
            s1 = min(s0 + sub, b1 - b0)
            d2[s0:s1] = _exact_sqdist_gathered(x64[g0 + s0 : g0 + s1], x64[gidx[s0:s1]])
        d2[gidx == np.arange(g0, g1)[:, None]] = np.inf
        out_d[b0:b1], out_i[b0:b1] = _sorted_topk(d2, gidx, k)

    np.sqrt(out_d, out=out_d)
    return ChunkTopK((q0, q1), (r0, r1), k, out_d, out_i)


def _check_tiling(ranges: list[tuple[int, int]], total: int, what: str) -> None:
    ordered = sorted(ranges)
    pos = 0
    for start, stop in ordered:
        if start != pos:
            raise ValueError(f"coverage gap in {what} at index {pos}")
        pos = stop
    if pos != total:
        raise ValueError(f"coverage gap in {what} at index {pos}")


def merge_topk(partials: list[ChunkTopK], k: int) -> NeighborTable:
    """k-way merge of per-chunk partials into the global neighbor table.

    Partials must share k and jointly tile every query index exactly once
    per reference chunk. The merge is a per-row sort by (distance, index),
    so the result does not depend on the order partials arrive in.
    """
    if not partials:
        raise ValueError("no partials to merge")
    for p in partials:
        if p.k != k:
            raise ValueError(f"inconsistent k: partial has {p.k}, expected {k}")

    n = max(p.query_range[1] for p in partials)
    by_query: dict[tuple[int, int], list[ChunkTopK]] = {}
    for p in partials:
        by_query.setdefault(p.query_range, []).append(p)
    _check_tiling(list(by_query), n, "query ranges")
    for qr, group in by_query.items():
        _check_tiling([p.ref_range for p in group], n, f"ref ranges for query {qr}")

    distances = np.empty((n, k))
    indices = np.empty((n, k), dtype=np.int64)
    for (q0, q1), group in by_query.items():
        group = sorted(group, key=lambda p: p.ref_range)
        d2 = np.concatenate([p.distances for p in group], axis=1)
        ix = np.concatenate([p.indices for p in group], axis=1)
        distances[q0:q1], indices[q0:q1] = _sorted_topk(d2, ix, k)
    return NeighborTable(n, k, distances, indices)


def build_sets(table: NeighborTable, beta: float) -> Partition:
    """Union every (i, j) pair closer than ``beta``; strictly less merges."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    uf = UnionFind(table.count)
    mask = (table.indices >= 0) & (table.distances < beta)
    rows, cols = np.nonzero(mask)
    neighbors = table.indices[rows, cols]
    for i, j in zip(rows.tolist(), neighbors.tolist()):
        uf.union(i, j)
    return Partition(uf.roots(), uf.set_count)


def select_representatives(
    partition: Partition,
    emb: EmbeddingSet,
    beta: float = 0.0,
    k: int = 0,
) -> BalanceResult:
    """Keep, per set, the member nearest the set's mean embedding.

    Ties are broken by lowest index. ``beta`` and ``k`` are carried into the
    result as provenance metadata only.
    """
    n = emb.count
    if partition.parent.shape != (n,):
        raise ValueError("partition does not cover the embedding set")
    if n == 0:
        return BalanceResult(np.empty(0, dtype=np.int64), 0.0, {}, beta, k)

    x64 = emb.data.astype(np.float64)
    _, inv = np.unique(partition.parent, return_inverse=True)
    nsets = inv.max() + 1
    sums = np.zeros((nsets, x64.shape[1]))
    np.add.at(sums, inv, x64)
    counts = np.bincount(inv, minlength=nsets)
    centroids = sums / counts[:, None]
    d2 = ((x64 - centroids[inv]) ** 2).sum(axis=1)

    order = np.lexsort((np.arange(n), d2, inv))
    _, first = np.unique(inv[order], return_index=True)
    kept = np.sort(order[first])

    sizes, freq = np.unique(counts, return_counts=True)
    hist = {int(s): int(c) for s, c in zip(sizes, freq)}
    removed = 1.0 - len(kept) / n
    return BalanceResult(kept.astype(np.int64), removed, hist, beta, k)


def balance(emb: EmbeddingSet, beta: float, k: int, chunks: int) -> BalanceResult:
    """Full semantic-balance pass: chunked top-k, merge, union-find, keep.

    Deterministic for fixed inputs; the kept list is identical for every
    chunk count. Chunk pairs run on a thread pool sized by the
    ``EMBALANCE_THREADS`` environment variable (default: all cores).
    """
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be > 0")
    n = emb.count
    if n == 0:
        raise ValueError("empty embedding set")

    chunks = min(chunks, n)
    bounds = [i * n // chunks for i in range(chunks + 1)]
    ranges = [(bounds[i], bounds[i + 1]) for i in range(chunks)]

    x32 = emb.data
    x64 = x32.astype(np.float64)
    sqn32 = (x64**2).sum(axis=1).astype(np.float32)

    tasks = [(qr, rr) for qr in ranges for rr in ranges]
    workers = min(_worker_count(), len(tasks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(
                pool.map(
                    lambda t: _chunk_topk_arrays(x32, x64, sqn32, *t[0], *t[1], k),
                    tasks,
                )
            )
    else:
        partials = [_chunk_topk_arrays(x32, x64, sqn32, *qr, *rr, k) for qr, rr in tasks]

    table = merge_topk(partials, k)
    partition = build_sets(table, beta)
    return select_representatives(partition, emb, beta=beta, k=k)


def brute_force_balance(emb: EmbeddingSet, beta: float) -> BalanceResult:
    """Reference answer: full O(N^2) threshold graph, connected components,
    same representative rule. Uses the same per-pair distance formula as
    the chunked pipeline, so agreement is exact."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    n = emb.count
    if n == 0:
        raise ValueError("empty embedding set")

    x64 = emb.data.astype(np.float64)
    uf = UnionFind(n)
    rows_per_block = max(1, _BLOCK_BUDGET // (n * x64.shape[1] * 8))
    for b0 in range(0, n, rows_per_block):
        b1 = min(b0 + rows_per_block, n)
        dist = np.sqrt(_exact_sqdist_block(x64[b0:b1], x64))
        ii, jj = np.nonzero(dist < beta)
        for i, j in zip((ii + b0).tolist(), jj.tolist()):
            if i != j:
                uf.union(i, j)
    partition = Partition(uf.roots(), uf.set_count)
    return select_representatives(partition, emb, beta=beta, k=max(n - 1, 0))
