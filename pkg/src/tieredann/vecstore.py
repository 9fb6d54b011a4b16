"""Vector dataset handling: benchmark file containers, synthetic data, exact search.

File containers follow the layout used by the common ANN benchmark suites:
each record is a little-endian int32 dimension header followed by the payload
(float32 for fvecs, int32 for ivecs, uint8 for bvecs). Ground truth is
persisted as an ivecs/fvecs pair (neighbor ids, squared L2 distances).

All randomness is drawn from numpy's PCG64 generator so that synthetic
datasets are reproducible bit for bit for a given seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

__all__ = [
    "Dataset",
    "GroundTruth",
    "FileFormatError",
    "TruncatedFileError",
    "read_fvecs",
    "write_fvecs",
    "read_ivecs",
    "write_ivecs",
    "read_bvecs",
    "write_bvecs",
    "synth_gaussian",
    "brute_force_knn",
    "save_ground_truth",
    "load_ground_truth",
]


class FileFormatError(ValueError):
    """Malformed vector container (empty input, bad header, mixed dimensions)."""


class TruncatedFileError(OSError):
    """Vector container ends mid-record."""


@dataclass(frozen=True)
class Dataset:
    """Row-major float32 vector collection with a fixed dimension.

    Immutable after construction; safe to share across threads. Empty
    collections are rejected up front because nothing downstream can
    consume them.
    """

    vectors: np.ndarray

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2:
            raise ValueError(f"expected a 2-D array, got {v.ndim}-D")
        if v.dtype != np.float32:
            raise ValueError(f"expected float32 storage, got {v.dtype}")
        if v.shape[0] == 0 or v.shape[1] == 0:
            raise ValueError("empty dataset (zero rows or zero dimension)")
        if not np.isfinite(v).all():
            raise ValueError("dataset contains non-finite values")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.vectors[i]


@dataclass(frozen=True)
class GroundTruth:
    """Exact top-k neighbors per query: ids and squared L2 distances.

    Rows are sorted by ascending distance with ties broken by lower record
    index, so ground truth is reproducible across runs.
    """

    ids: np.ndarray    # (n_queries, k) int32
    dists: np.ndarray  # (n_queries, k) float32, non-decreasing per row

    def __post_init__(self):
        if self.ids.shape != self.dists.shape:
            raise ValueError("ids and dists shapes differ")
        if self.ids.ndim != 2 or self.ids.shape[1] < 1:
            raise ValueError("expected (n_queries, k) matrices with k >= 1")
        if np.any(np.diff(self.dists.astype(np.float64), axis=1) < 0):
            raise ValueError("distances must be non-decreasing per row")
        if self.k > 1:
            srt = np.sort(self.ids, axis=1)
            if np.any(np.diff(srt, axis=1) == 0):
                raise ValueError("duplicate neighbor ids within a row")

    @property
    def k(self) -> int:
        return self.ids.shape[1]


def _read_records(path: PathLike, elem_size: int, what: str) -> tuple[np.ndarray, int]:
    """Read a dim-prefixed record file; returns (payload bytes as (n, d*elem_size), d)."""
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise FileFormatError(f"{path}: empty {what} file")
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than a record header")
    d = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    if d <= 0:
        raise FileFormatError(f"{path}: invalid dimension {d} in first header")
    rec = 4 + d * elem_size
    if len(raw) % rec != 0:
        raise TruncatedFileError(
            f"{path}: size {len(raw)} is not a multiple of the {rec}-byte record"
        )
    n = len(raw) // rec
    mat = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)
    dims = mat[:, :4].copy().view("<i4").ravel()
    bad = np.flatnonzero(dims != d)
    if bad.size:
        i = int(bad[0])
        raise FileFormatError(
            f"{path}: record {i} has dimension {int(dims[i])}, expected {d}"
        )
    return mat[:, 4:].copy(), d


def read_fvecs(path: PathLike) -> Dataset:
    """Load an .fvecs file; float32 values are preserved bit-exactly."""
    payload, d = _read_records(path, 4, "fvecs")
    vectors = np.ascontiguousarray(payload.view("<f4"))
    try:
        return Dataset(vectors)
    except ValueError as e:
        raise FileFormatError(f"{path}: {e}") from e


def write_fvecs(path: PathLike, data: Union[Dataset, np.ndarray]) -> None:
    """Write float32 rows as .fvecs (per-record int32 dim header)."""
    vectors = data.vectors if isinstance(data, Dataset) else np.asarray(data, np.float32)
    n, d = vectors.shape
    out = np.empty((n, 4 + 4 * d), dtype=np.uint8)
    out[:, :4] = np.frombuffer(np.int32(d).tobytes(), dtype=np.uint8)
    out[:, 4:] = np.ascontiguousarray(vectors, dtype="<f4").view(np.uint8)
    Path(path).write_bytes(out.tobytes())


def read_ivecs(path: PathLike) -> np.ndarray:
    """Load an .ivecs file into an (n, d) int32 matrix."""
    payload, d = _read_records(path, 4, "ivecs")
    return np.ascontiguousarray(payload.view("<i4"))


def write_ivecs(path: PathLike, mat: np.ndarray) -> None:
    """Write int32 rows as .ivecs."""
    mat = np.asarray(mat, dtype="<i4")
    n, d = mat.shape
    out = np.empty((n, 4 + 4 * d), dtype=np.uint8)
    out[:, :4] = np.frombuffer(np.int32(d).tobytes(), dtype=np.uint8)
    out[:, 4:] = np.ascontiguousarray(mat).view(np.uint8)
    Path(path).write_bytes(out.tobytes())


def read_bvecs(path: PathLike) -> Dataset:
    """Load a .bvecs file; uint8 elements are widened to float32 exactly."""
    payload, d = _read_records(path, 1, "bvecs")
    try:
        return Dataset(payload.astype(np.float32))
    except ValueError as e:
        raise FileFormatError(f"{path}: {e}") from e


def write_bvecs(path: PathLike, mat: np.ndarray) -> None:
    """Write uint8 rows as .bvecs; values must be integers in [0, 255]."""
    arr = np.asarray(mat)
    if not np.all((arr >= 0) & (arr <= 255) & (arr == np.floor(arr))):
        raise ValueError("bvecs payload must hold integers in [0, 255]")
    arr = arr.astype(np.uint8)
    n, d = arr.shape
    out = np.empty((n, 4 + d), dtype=np.uint8)
    out[:, :4] = np.frombuffer(np.int32(d).tobytes(), dtype=np.uint8)
    out[:, 4:] = arr
    Path(path).write_bytes(out.tobytes())


def synth_gaussian(n: int, d: int, seed: int, clusters: int = 1) -> Dataset:
    """Deterministic Gaussian-mixture dataset for desk-scale benchmarks.

    Draw order (PCG64 seeded with `seed`, all draws in float64, cast to
    float32 at the end):

      1. `clusters` centers from N(0, 4 I)
      2. one cluster label per point, uniform over the centers
      3. unit-variance offsets around the chosen center

    The same seed reproduces the same bytes on any platform where numpy's
    PCG64 stream is stable (it is within a numpy major series).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if d < 1:
        raise ValueError("d must be >= 1")
    if clusters < 1:
        raise ValueError("clusters must be >= 1")
    if n < clusters:
        raise ValueError(f"n={n} smaller than clusters={clusters}")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.normal(0.0, 2.0, size=(clusters, d))
    labels = rng.integers(0, clusters, size=n)
    points = centers[labels] + rng.normal(0.0, 1.0, size=(n, d))
    return Dataset(points.astype(np.float32))


def brute_force_knn(base: Dataset, queries: Dataset, k: int) -> GroundTruth:
    """Exact top-k by squared L2 distance, ties broken by lower record index.

    Distances are accumulated in float64 (blocked over queries) and stored
    as float32. Results are independent of any internal blocking.
    """
    if base.dim != queries.dim:
        raise ValueError(f"dimension mismatch: base {base.dim} vs queries {queries.dim}")
    if not 1 <= k <= base.count:
        raise ValueError(f"k={k} out of range [1, {base.count}]")

    X = base.vectors.astype(np.float64)
    x_sq = np.einsum("ij,ij->i", X, X)
    n_q = queries.count
    ids = np.empty((n_q, k), dtype=np.int32)
    dists = np.empty((n_q, k), dtype=np.float32)

    block = max(1, int(2**25 // max(base.count, 1)))
    for start in range(0, n_q, block):
        Q = queries.vectors[start:start + block].astype(np.float64)
        q_sq = np.einsum("ij,ij->i", Q, Q)
        d2 = q_sq[:, None] + x_sq[None, :] - 2.0 * (Q @ X.T)
        np.maximum(d2, 0.0, out=d2)
        for r in range(d2.shape[0]):
            row = d2[r]
            if k < base.count:
                part = np.argpartition(row, k - 1)
                kth = row[part[k - 1]]
                cand = np.flatnonzero(row <= kth)  # keep every tie at the boundary
            else:
                cand = np.arange(base.count)
            order = np.lexsort((cand, row[cand]))[:k]
            ids[start + r] = cand[order]
            dists[start + r] = row[cand[order]]
    return GroundTruth(ids=ids, dists=dists)


def save_ground_truth(gt: GroundTruth, ids_path: PathLike, dists_path: PathLike) -> None:
    """Persist ground truth as an ivecs (ids) + fvecs (distances) pair."""
    write_ivecs(ids_path, gt.ids)
    write_fvecs(dists_path, gt.dists)


def load_ground_truth(ids_path: PathLike, dists_path: PathLike) -> GroundTruth:
    ids = read_ivecs(ids_path)
    dists = read_fvecs(dists_path).vectors
    return GroundTruth(ids=ids.astype(np.int32), dists=dists)
