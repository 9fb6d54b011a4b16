"""Coarse quantization layer: product quantization with ADC lookup tables.

A vector of dimension D is split into `m` contiguous sub-vectors of
dimension D/m, each quantized against its own codebook of 2**nbits
centroids. Distances from a full-precision query to coded records are
evaluated asymmetrically: per-sub-space squared distances to every
centroid are tabulated once per query, after which each record costs m
table lookups and adds.

The reconstruction of a record from its code is the coarse approximation
that the residual layer refines against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kmeans import kmeans_fit, pairwise_sq_dists
from .vecstore import Dataset, PathLike

__all__ = [
    "PQConfig",
    "PQCodebook",
    "AdcTable",
    "InvalidCodeError",
    "train",
    "encode",
    "encode_batch",
    "reconstruct",
    "reconstruct_batch",
    "adc_table",
    "adc_distance",
    "adc_distance_batch",
    "save_codebook",
    "load_codebook",
]

_MAGIC = b"TACB"
_VERSION = 1


class InvalidCodeError(ValueError):
    """A code references a centroid index outside the codebook."""


@dataclass(frozen=True)
class PQConfig:
    """Training parameters for the coarse quantizer.

    `m` sub-spaces, 2**nbits centroids each. The record dimension must be
    divisible by `m`; padding schemes are intentionally unsupported.
    """

    m: int
    nbits: int
    iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 1 <= self.nbits <= 8:
            raise ValueError(f"nbits must be in [1, 8], got {self.nbits}")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    @property
    def ksub(self) -> int:
        return 1 << self.nbits


@dataclass(frozen=True)
class PQCodebook:
    """Per-sub-space centroids, shape (m, 2**nbits, D/m) float32."""

    centroids: np.ndarray

    def __post_init__(self):
        c = self.centroids
        if c.ndim != 3:
            raise ValueError("centroids must be (m, ksub, dsub)")
        if c.dtype != np.float32:
            raise ValueError("centroids must be float32")
        if not np.isfinite(c).all():
            raise ValueError("centroids contain non-finite values")
        if c.shape[1] & (c.shape[1] - 1) or c.shape[1] < 2:
            raise ValueError("centroid count per sub-space must be a power of two >= 2")

    @property
    def m(self) -> int:
        return self.centroids.shape[0]

    @property
    def ksub(self) -> int:
        return self.centroids.shape[1]

    @property
    def dsub(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.dsub

    @property
    def nbits(self) -> int:
        return int(self.ksub).bit_length() - 1


@dataclass(frozen=True)
class AdcTable:
    """Per-query lookup table: (m, ksub) squared sub-distances, all >= 0."""

    table: np.ndarray


def train(config: PQConfig, sample: Dataset) -> PQCodebook:
    """Train one k-means codebook per sub-space on the sample.

    Sub-space j draws its randomness from PCG64 seeded with
    SeedSequence([config.seed, j]), so training is reproducible and
    independent of the order sub-spaces are processed in.
    """
    if sample.dim % config.m != 0:
        raise ValueError(f"dim {sample.dim} not divisible by m={config.m}")
    if sample.count < config.ksub:
        raise ValueError(
            f"need at least {config.ksub} sample vectors, got {sample.count}"
        )
    dsub = sample.dim // config.m
    centroids = np.empty((config.m, config.ksub, dsub), dtype=np.float32)
    for j in range(config.m):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, j])))
        sub = sample.vectors[:, j * dsub:(j + 1) * dsub]
        centroids[j] = kmeans_fit(sub, config.ksub, config.iters, rng)
    return PQCodebook(centroids)


def encode_batch(cb: PQCodebook, vectors: np.ndarray) -> np.ndarray:
    """Codes for (n, D) rows: nearest centroid per sub-space, ties to lower index."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[1] != cb.dim:
        raise ValueError(f"expected (n, {cb.dim}) input, got {vectors.shape}")
    n = vectors.shape[0]
    codes = np.empty((n, cb.m), dtype=np.uint8)
    for j in range(cb.m):
        sub = vectors[:, j * cb.dsub:(j + 1) * cb.dsub]
        codes[:, j] = pairwise_sq_dists(sub, cb.centroids[j]).argmin(axis=1)
    return codes


def encode(cb: PQCodebook, x: np.ndarray) -> np.ndarray:
    """Code for a single vector, shape (m,) uint8."""
    return encode_batch(cb, np.asarray(x, dtype=np.float32)[None, :])[0]


def _check_codes(cb: PQCodebook, codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.shape[-1] != cb.m:
        raise ValueError(f"expected {cb.m} sub-codes, got {codes.shape[-1]}")
    if codes.min(initial=0) < 0 or codes.max(initial=0) >= cb.ksub:
        raise InvalidCodeError(f"code index outside [0, {cb.ksub})")
    return codes


def reconstruct_batch(cb: PQCodebook, codes: np.ndarray) -> np.ndarray:
    """Decode (n, m) codes into (n, D) float32 coarse reconstructions."""
    codes = _check_codes(cb, codes)
    n = codes.shape[0]
    out = np.empty((n, cb.dim), dtype=np.float32)
    for j in range(cb.m):
        out[:, j * cb.dsub:(j + 1) * cb.dsub] = cb.centroids[j][codes[:, j]]
    return out


def reconstruct(cb: PQCodebook, code: np.ndarray) -> np.ndarray:
    """Concatenation of the selected centroids; the coarse vector x_c."""
    return reconstruct_batch(cb, np.asarray(code)[None, :])[0]


def adc_table(cb: PQCodebook, q: np.ndarray) -> AdcTable:
    """Squared distances from each query sub-vector to every centroid."""
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (cb.dim,):
        raise ValueError(f"expected query of dimension {cb.dim}, got {q.shape}")
    sub = q.reshape(cb.m, 1, cb.dsub).astype(np.float64)
    diff = cb.centroids.astype(np.float64) - sub
    table = np.einsum("mkd,mkd->mk", diff, diff)
    return AdcTable(table.astype(np.float32))


def adc_distance_batch(table: AdcTable, codes: np.ndarray) -> np.ndarray:
    """Coarse distances d0 for (n, m) codes, accumulated in float64."""
    t = table.table
    codes = np.asarray(codes)
    return t[np.arange(t.shape[0])[None, :], codes].sum(axis=1, dtype=np.float64)


def adc_distance(table: AdcTable, code: np.ndarray) -> float:
    """Coarse distance d0 for one code: the sum of m table entries."""
    return float(adc_distance_batch(table, np.asarray(code)[None, :])[0])


def save_codebook(path: PathLike, cb: PQCodebook) -> None:
    """Versioned binary container: magic, version, D, m, nbits, centroids (f32 LE)."""
    header = _MAGIC + struct.pack("<IIII", _VERSION, cb.dim, cb.m, cb.nbits)
    Path(path).write_bytes(header + cb.centroids.astype("<f4").tobytes())


def load_codebook(path: PathLike) -> PQCodebook:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a codebook file")
    version, dim, m, nbits = struct.unpack_from("<IIII", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported codebook version {version}")
    ksub, dsub = 1 << nbits, dim // m
    body = np.frombuffer(raw, dtype="<f4", offset=20)
    if body.size != m * ksub * dsub:
        raise ValueError(f"{path}: centroid payload size mismatch")
    return PQCodebook(np.ascontiguousarray(body).reshape(m, ksub, dsub))
