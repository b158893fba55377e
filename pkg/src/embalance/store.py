"""Binary embedding storage (EMB1), validation, and L2 normalization.

File layout, all little-endian:

    magic    4 bytes   b"EMB1"
    version  u32       currently 1
    count    u64       number of rows N
    dim      u32       row width d
    payload  N*d f32   embedding data, row-major

An optional JSON sidecar ``<path>.meta.json`` carries
``{"ids": [...], "source": "..."}``. When absent, ids default to the row
position 0..N-1. Payload precision is fixed at 32-bit float; that is enough
resolution for distance thresholding at the 1e-2 granularity the duplicate
threshold operates at.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class EmbeddingFormatError(Exception):
    """Base class for problems with the EMB1 on-disk format."""


class BadMagicError(EmbeddingFormatError):
    """File does not start with the EMB1 magic bytes."""


class VersionMismatchError(EmbeddingFormatError):
    """File declares a format version this reader does not understand."""


class TruncatedPayloadError(EmbeddingFormatError):
    """Payload length does not match count * dim * 4 bytes."""


class ZeroRowError(ValueError):
    """An all-zero row was found where a nonzero vector is required."""

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"row {row} has zero L2 norm")


class DataValidationError(ValueError):
    """Embedding data failed validation (NaN/Inf entries or zero rows)."""


@dataclass(frozen=True)
class EmbeddingSet:
    """Immutable N x d matrix of 32-bit float embeddings with row ids.

    ``data`` is row-major float32; ``ids`` are opaque 64-bit identifiers,
    unique within a set, defaulting to the row index. Instances are safe to
    share across threads for reading.
    """

    data: np.ndarray
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"data must be 2-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        if self.ids is None:
            ids = np.arange(data.shape[0], dtype=np.int64)
        else:
            ids = np.ascontiguousarray(self.ids, dtype=np.int64)
            if ids.shape != (data.shape[0],):
                raise ValueError(
                    f"ids shape {ids.shape} does not match {data.shape[0]} rows"
                )
            if len(np.unique(ids)) != len(ids):
                raise ValueError("ids must be unique within a set")
        object.__setattr__(self, "ids", ids)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def take(self, indices: np.ndarray) -> "EmbeddingSet":
        """Subset by row index, keeping the original ids."""
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingSet(self.data[idx], ids=self.ids[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass(frozen=True)
class ValidationReport:
    nan_count: int
    inf_count: int
    zero_rows: list[int]
    norm_deviation_max: float

    @property
    def ok(self) -> bool:
        return self.nan_count == 0 and self.inf_count == 0 and not self.zero_rows


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def write_embeddings(emb: EmbeddingSet, path: str | Path) -> None:
    """Write ``emb`` to ``path`` in EMB1 format.

    Round-trips bit-exactly through :func:`read_embeddings`. A JSON sidecar
    with the ids is written only when they differ from the 0..N-1 default.
    """
    path = Path(path)
    header = _HEADER.pack(MAGIC, VERSION, emb.count, emb.dim)
    payload = emb.data.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    default_ids = np.arange(emb.count, dtype=np.int64)
    sidecar = _sidecar_path(path)
    if not np.array_equal(emb.ids, default_ids):
        meta = {"ids": [int(i) for i in emb.ids], "source": "embalance"}
        sidecar.write_text(json.dumps(meta, sort_keys=True))
    elif sidecar.exists():
        sidecar.unlink()


def read_embeddings(path: str | Path) -> EmbeddingSet:
    """Read an EMB1 file written by :func:`write_embeddings`.

    Raises :class:`BadMagicError`, :class:`VersionMismatchError`, or
    :class:`TruncatedPayloadError` for the corresponding format defects.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an EMB1 file")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    expected = count * dim * 4
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    ids = None
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if "ids" in meta:
            ids = np.asarray(meta["ids"], dtype=np.int64)
    return EmbeddingSet(data.copy(), ids=ids)


def normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """Divide each row by its L2 norm.

    Raises :class:`ZeroRowError` with the first offending row index if any
    row is all zeros; downstream distance identities assume unit norm.
    """
    data = emb.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroRowError(int(zero[0]))
    out = (data / norms[:, None]).astype(np.float32)
    return EmbeddingSet(out, ids=emb.ids)


def validate(emb: EmbeddingSet) -> ValidationReport:
    """Count NaN/Inf entries, list all-zero rows, and report max norm deviation."""
    data = emb.data
    nan_count = int(np.isnan(data).sum())
    inf_count = int(np.isinf(data).sum())
    zero_rows = [int(i) for i in np.flatnonzero(~data.any(axis=1))]
    norms = np.linalg.norm(data.astype(np.float64), axis=1)
    finite = norms[np.isfinite(norms)]
    deviation = float(np.abs(finite - 1.0).max()) if finite.size else 0.0
    return ValidationReport(nan_count, inf_count, zero_rows, deviation)


def require_clean(emb: EmbeddingSet, what: str = "input") -> None:
    """Raise :class:`DataValidationError` if the set has NaN/Inf or zero rows."""
    report = validate(emb)
    if not report.ok:
        raise DataValidationError(
            f"{what}: nan={report.nan_count} inf={report.inf_count} "
            f"zero_rows={report.zero_rows[:8]}"
        )
