"""Inverted-file candidate generation over coarse PQ scores.

Records are clustered into `nlist` cells; a query probes the `nprobe`
nearest cells (exact linear scan over the centroids, which stays cheap at
desk scale) and scores every member through the ADC table, returning the
best `limit` (id, d0) pairs for the refinement stage. The refinement layer
is index-agnostic: anything able to produce such pairs can replace this
module.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import pq
from .kmeans import assign_nearest, kmeans_fit
from .vecstore import Dataset, PathLike

if TYPE_CHECKING:  # pragma: no cover
    from .estimator import QueryContext

__all__ = [
    "IvfIndex",
    "CandidateList",
    "build_ivf",
    "search_coarse",
    "save_index",
    "load_index",
]

_MAGIC = b"TQIV"
_VERSION = 1


@dataclass(frozen=True)
class CandidateList:
    """Refinement input: distinct record ids with their coarse distances."""

    ids: np.ndarray        # (n,) int64, distinct
    d0: np.ndarray         # (n,) float64, >= 0
    nprobe_used: int


class IvfIndex:
    """Immutable inverted file: centroids, member lists, per-record PQ codes."""

    def __init__(self, centroids: np.ndarray, assignment: np.ndarray, codes: np.ndarray):
        if centroids.ndim != 2 or centroids.dtype != np.float32:
            raise ValueError("centroids must be (nlist, D) float32")
        if assignment.shape[0] != codes.shape[0]:
            raise ValueError("assignment and codes row counts differ")
        if assignment.size and (assignment.min() < 0 or assignment.max() >= centroids.shape[0]):
            raise ValueError("assignment references a missing cluster")
        self.centroids = centroids
        self.assignment = assignment.astype(np.int64)
        self.codes = codes.astype(np.uint8)
        self.lists = [
            np.flatnonzero(self.assignment == c).astype(np.int64)
            for c in range(centroids.shape[0])
        ]

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    @property
    def count(self) -> int:
        return self.assignment.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def build_ivf(base: Dataset, nlist: int, cb: pq.PQCodebook, seed: int, iters: int = 20) -> IvfIndex:
    """Cluster the base set and encode every record once.

    Uses the same k-means engine as the codebook trainer, seeded with
    PCG64(SeedSequence([seed])). Every record lands in exactly one list.
    """
    if not 1 <= nlist <= base.count:
        raise ValueError(f"nlist={nlist} out of range [1, {base.count}]")
    if cb.dim != base.dim:
        raise ValueError(f"dimension mismatch: base {base.dim} vs codebook {cb.dim}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    centroids = kmeans_fit(base.vectors, nlist, iters, rng)
    assignment = assign_nearest(base.vectors, centroids)
    codes = pq.encode_batch(cb, base.vectors)
    return IvfIndex(centroids, assignment, codes)


def search_coarse(index: IvfIndex, ctx: "QueryContext", nprobe: int, limit: int) -> CandidateList:
    """Score members of the `nprobe` nearest lists, keep the `limit` best d0.

    Cell and candidate ordering both break ties toward the lower id, so a
    given (index, query, nprobe, limit) always returns the same list.
    """
    if not 1 <= nprobe <= index.nlist:
        raise ValueError(f"nprobe={nprobe} out of range [1, {index.nlist}]")
    if limit < 1:
        raise ValueError("limit must be >= 1")

    q = np.asarray(ctx.q, dtype=np.float64)
    diff = index.centroids.astype(np.float64) - q[None, :]
    cell_d2 = np.einsum("ij,ij->i", diff, diff)
    probed = np.lexsort((np.arange(index.nlist), cell_d2))[:nprobe]

    members = np.concatenate([index.lists[c] for c in probed]) if nprobe else np.empty(0, np.int64)
    if members.size == 0:
        return CandidateList(ids=np.empty(0, np.int64), d0=np.empty(0, np.float64),
                             nprobe_used=nprobe)
    d0 = pq.adc_distance_batch(ctx.adc, index.codes[members])
    order = np.lexsort((members, d0))[:limit]
    return CandidateList(ids=members[order], d0=d0[order], nprobe_used=nprobe)


def save_index(path: PathLike, index: IvfIndex) -> None:
    """Versioned binary: centroids, 64-bit LE list offsets, ids and codes in list order."""
    m = index.codes.shape[1]
    concat = np.concatenate(index.lists) if index.nlist else np.empty(0, np.int64)
    lengths = np.array([lst.size for lst in index.lists], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype("<u8")
    header = _MAGIC + struct.pack("<IIIIQ", _VERSION, index.dim, index.nlist, m, index.count)
    parts = [
        header,
        index.centroids.astype("<f4").tobytes(),
        offsets.tobytes(),
        concat.astype("<u8").tobytes(),
        index.codes[concat].tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_index(path: PathLike) -> IvfIndex:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an index file")
    version, dim, nlist, m, count = struct.unpack_from("<IIIIQ", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported index version {version}")
    off = 28
    centroids = np.frombuffer(raw, "<f4", nlist * dim, off).reshape(nlist, dim).copy()
    off += nlist * dim * 4
    offsets = np.frombuffer(raw, "<u8", nlist + 1, off).astype(np.int64)
    off += (nlist + 1) * 8
    concat = np.frombuffer(raw, "<u8", count, off).astype(np.int64)
    off += count * 8
    codes_list_order = np.frombuffer(raw, np.uint8, count * m, off).reshape(count, m)

    assignment = np.empty(count, dtype=np.int64)
    codes = np.empty((count, m), dtype=np.uint8)
    for c in range(nlist):
        ids = concat[offsets[c]:offsets[c + 1]]
        assignment[ids] = c
        codes[ids] = codes_list_order[offsets[c]:offsets[c + 1]]
    return IvfIndex(centroids.astype(np.float32), assignment, codes)
