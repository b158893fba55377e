"""Spherical k-means over unit-norm embeddings.

Minimizes the mean squared residual (1/N) * sum_i ||e_i - W z_i||^2 over a
d x k centroid matrix W and one-hot assignments z_i. Centroids are
re-normalized to unit length after every mean update, which for unit-norm
data is the constrained minimizer, so the objective still descends except
at documented empty-cluster re-seeding steps.

Model file format (KMC1), all little-endian:

    magic     4 bytes  b"KMC1"
    version   u32      currently 1
    k         u32
    d         u32
    centroids k*d f32  the d x k matrix in row-major order
    count     u64      number of labeled items N
    labels    N u32
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .store import EmbeddingSet

MODEL_MAGIC = b"KMC1"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIII")

_ASSIGN_BLOCK = 8192


@dataclass(frozen=True)
class ClusterModel:
    """Fitted k-means model: unit-norm prototypes, labels, and objective."""

    centroids: np.ndarray  # (d, k) float64, unit-norm columns
    labels: np.ndarray  # (N,) int64
    objective: float
    iterations_run: int
    converged: bool
    objective_history: list[float] = field(default_factory=list)
    reseed_iterations: list[int] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[0]


def kmeans_init(emb: EmbeddingSet, k: int, seed: int) -> np.ndarray:
    """k-means++ seeding: first centroid uniform, the rest D^2-weighted.

    Deterministic for a fixed seed. Returns a (d, k) matrix whose columns
    are data rows. When every remaining point duplicates a chosen centroid
    (all weights zero), the lowest-index unchosen point is taken.
    """
    n = emb.count
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    rng = np.random.default_rng(seed)
    x = emb.data.astype(np.float64)
    sqn = (x**2).sum(axis=1)

    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    taken = {int(chosen[0])}
    mind2 = np.maximum(sqn + sqn[chosen[0]] - 2.0 * (x @ x[chosen[0]]), 0.0)
    for t in range(1, k):
        total = mind2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=mind2 / total))
        else:
            idx = min(i for i in range(n) if i not in taken)
        chosen[t] = idx
        taken.add(idx)
        d2 = np.maximum(sqn + sqn[idx] - 2.0 * (x @ x[idx]), 0.0)
        np.minimum(mind2, d2, out=mind2)
    return x[chosen].T.copy()


def assign(emb: EmbeddingSet, centroids: np.ndarray) -> tuple[np.ndarray, float]:
    """Nearest-centroid labels (ties to the lowest index) and the objective.

    The argmin runs blockwise on a Gram product; the reported objective is
    recomputed per pair so exact matches contribute exactly zero residual.
    """
    w = np.asarray(centroids, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != emb.dim:
        raise ValueError(
            f"centroid matrix is {w.shape}, expected ({emb.dim}, k)"
        )
    x = emb.data.astype(np.float64)
    n = emb.count
    sqn_w = (w**2).sum(axis=0)
    labels = np.empty(n, dtype=np.int64)
    for b0 in range(0, n, _ASSIGN_BLOCK):
        b1 = min(b0 + _ASSIGN_BLOCK, n)
        d2 = sqn_w[None, :] - 2.0 * (x[b0:b1] @ w)
        labels[b0:b1] = d2.argmin(axis=1)
    resid = ((x - w.T[labels]) ** 2).sum(axis=1)
    objective = float(resid.mean()) if n else 0.0
    return labels, objective


def update_centroids(emb: EmbeddingSet, labels: np.ndarray, k: int) -> np.ndarray:
    """Mean of each cluster's rows, re-normalized to unit length.

    Empty clusters (and clusters whose mean is exactly zero) are re-seeded
    to the not-yet-used point with the largest residual under the fresh
    centroids.
    """
    cents, _ = _update_impl(emb, labels, k)
    return cents


def _update_impl(emb: EmbeddingSet, labels: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= k:
        raise ValueError("labels out of range [0, k)")
    x = emb.data.astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)

    w = np.zeros((k, x.shape[1]))
    nonempty = counts > 0
    w[nonempty] = sums[nonempty] / counts[nonempty, None]
    norms = np.linalg.norm(w, axis=1)
    degenerate = nonempty & (norms == 0.0)
    ok = nonempty & (norms > 0.0)
    w[ok] /= norms[ok, None]

    reseed = np.flatnonzero(~nonempty | degenerate)
    if reseed.size:
        resid = ((x - w[labels]) ** 2).sum(axis=1)
        order = np.argsort(-resid, kind="stable")
        for col, point in zip(reseed, order[: reseed.size]):
            row = x[point]
            nrm = np.linalg.norm(row)
            w[col] = row / nrm if nrm > 0 else row
    return w.T.copy(), bool(reseed.size)


def kmeans(
    emb: EmbeddingSet,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
) -> ClusterModel:
    """Alternate assignment and centroid updates until the objective change
    drops below ``tol`` or ``max_iters`` is hit."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    centroids = kmeans_init(emb, k, seed)
    labels, objective = assign(emb, centroids)
    history = [objective]
    reseeds: list[int] = []
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        centroids, reseeded = _update_impl(emb, labels, k)
        labels, new_objective = assign(emb, centroids)
        iterations = it
        history.append(new_objective)
        if reseeded:
            reseeds.append(it)
        if objective - new_objective < tol:
            objective = new_objective
            converged = True
            break
        objective = new_objective
    return ClusterModel(
        centroids, labels, objective, iterations, converged, history, reseeds
    )


def write_cluster_model(model: ClusterModel, path: str | Path) -> None:
    """Serialize centroids and labels to a KMC1 file."""
    path = Path(path)
    k, d = model.k, model.dim
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, k, d))
        fh.write(model.centroids.astype("<f4").tobytes())
        fh.write(struct.pack("<Q", len(model.labels)))
        fh.write(model.labels.astype("<u4").tobytes())


def read_cluster_model(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a KMC1 file; returns (centroids (d, k) float64, labels int64)."""
    from .store import BadMagicError, TruncatedPayloadError, VersionMismatchError

    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _MODEL_HEADER.size or raw[:4] != MODEL_MAGIC:
        raise BadMagicError(f"{path}: not a KMC1 file")
    _, version, k, d = _MODEL_HEADER.unpack_from(raw)
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {MODEL_VERSION}")
    off = _MODEL_HEADER.size
    cent_bytes = k * d * 4
    if len(raw) < off + cent_bytes + 8:
        raise TruncatedPayloadError(f"{path}: truncated centroid block")
    centroids = (
        np.frombuffer(raw, dtype="<f4", count=k * d, offset=off)
        .reshape(d, k)
        .astype(np.float64)
    )
    off += cent_bytes
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) != off + count * 4:
        raise TruncatedPayloadError(f"{path}: truncated label block")
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=off).astype(np.int64)
    return centroids, labels
