"""Ternary residual codes: optimal sign encoding and base-3 byte packing.

The residual delta = x - x_c of a record against its coarse reconstruction
is encoded as a vector over {-1, 0, +1} chosen to maximize the cosine with
delta. Among all such codes, the best one with exactly k nonzero entries
places signs on the k largest-magnitude coordinates, so the search
collapses to a single scan over k: sort |delta| descending, form prefix
sums S_k, and pick k* = argmax S_k / sqrt(k). This yields the exact
optimum over all 3**D - 1 nonzero codes in one sort plus two linear
passes, never enumerating the codebook.

Packing stores five ternary digits per byte via y = sum_i 3**i (x_i + 1),
i = 0..4, i.e. 1.6 bits per dimension when 5 divides D. A record also
carries two float32 scalars, <x_c, delta> and ||delta||, giving a fixed
stride of ceil(D/5) + 8 bytes.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import pq
from .vecstore import Dataset, PathLike

__all__ = [
    "TernaryCode",
    "TrqRecord",
    "TrqStore",
    "CorruptedCodeError",
    "encode_ternary",
    "encode_ternary_batch",
    "pack",
    "unpack",
    "unpack_batch",
    "ternary_inner_product",
    "build_store",
    "save_store",
    "load_store",
    "code_bytes",
    "record_stride",
    "code_bits_per_dim",
    "count_operations",
]

_MAGIC = b"TQRS"
_VERSION = 1

_POWERS = np.array([1, 3, 9, 27, 81], dtype=np.int64)

# byte value -> its five ternary digits in {-1, 0, +1}
_UNPACK_TABLE = (
    (np.arange(243, dtype=np.int64)[:, None] // _POWERS[None, :]) % 3 - 1
).astype(np.int8)


class CorruptedCodeError(ValueError):
    """A packed byte falls outside the valid base-3 range [0, 243)."""


# Optional operation counter for the complexity contract of encode_ternary
# (one sort, two linear passes per call). Enabled only inside the context
# manager; the default path pays nothing.
_op_counts: Optional[dict] = None


@contextmanager
def count_operations():
    """Count sorts and linear passes performed by encode_ternary calls."""
    global _op_counts
    _op_counts = {"sorts": 0, "passes": 0}
    try:
        yield _op_counts
    finally:
        _op_counts = None


def _count(sorts: int = 0, passes: int = 0) -> None:
    if _op_counts is not None:
        _op_counts["sorts"] += sorts
        _op_counts["passes"] += passes


@dataclass(frozen=True)
class TernaryCode:
    """Sign pattern over {-1, 0, +1} plus its support size k*.

    The normalized direction entries / sqrt(k_star) is derived on demand
    and never stored. k_star == 0 only for the zero-residual case.
    """

    entries: np.ndarray  # (D,) int8 over {-1, 0, 1}
    k_star: int

    def __post_init__(self):
        e = self.entries
        if e.dtype != np.int8 or e.ndim != 1:
            raise ValueError("entries must be a 1-D int8 array")
        if e.size and (e.min() < -1 or e.max() > 1):
            raise ValueError("entries must lie in {-1, 0, 1}")
        nnz = int(np.count_nonzero(e))
        if nnz != self.k_star:
            raise ValueError(f"k_star={self.k_star} but {nnz} nonzero entries")


def encode_ternary_batch(deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal ternary codes for (n, D) residual rows.

    Returns (entries (n, D) int8, k_star (n,) int64). Rows with zero norm
    get the all-zero code with k_star 0. Magnitude ties are resolved by a
    stable sort, so equal magnitudes enter the support in ascending
    original-index order; k* ties resolve to the smallest k. Both choices
    keep the output deterministic across platforms.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 2:
        raise ValueError("expected a 2-D array of residuals")
    if not np.isfinite(deltas).all():
        raise ValueError("residuals contain non-finite values")
    n, d = deltas.shape

    mags = np.abs(deltas)
    order = np.argsort(-mags, axis=1, kind="stable")
    _count(sorts=1)

    sorted_mags = np.take_along_axis(mags, order, axis=1)
    prefix = np.cumsum(sorted_mags, axis=1)
    ratios = prefix / np.sqrt(np.arange(1, d + 1, dtype=np.float64))[None, :]
    k_star = ratios.argmax(axis=1) + 1  # argmax takes the first max: smallest k
    _count(passes=1)

    nonzero = prefix[:, -1] > 0.0
    k_star = np.where(nonzero, k_star, 0)

    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(d)[None, :].repeat(n, axis=0), axis=1)
    in_support = rank < k_star[:, None]
    entries = np.where(in_support, np.sign(deltas), 0.0).astype(np.int8)
    _count(passes=1)
    return entries, k_star.astype(np.int64)


def encode_ternary(delta: np.ndarray) -> TernaryCode:
    """Optimal ternary code for one residual vector."""
    entries, k_star = encode_ternary_batch(np.asarray(delta, dtype=np.float64)[None, :])
    return TernaryCode(entries=entries[0], k_star=int(k_star[0]))


def code_bytes(dim: int) -> int:
    """Packed code length: ceil(D / 5) bytes."""
    return -(-dim // 5)


def record_stride(dim: int) -> int:
    """Bytes per stored record: packed code plus two float32 scalars."""
    return code_bytes(dim) + 8


def code_bits_per_dim(dim: int) -> float:
    """Storage cost of the packed code alone; exactly 1.6 when 5 | D."""
    return 8.0 * code_bytes(dim) / dim


def pack(entries: np.ndarray) -> np.ndarray:
    """Pack ternary entries five-per-byte; a partial final group pads with 0."""
    return pack_batch(np.asarray(entries, dtype=np.int8)[None, :])[0]


def pack_batch(entries: np.ndarray) -> np.ndarray:
    """Pack (n, D) ternary entries into (n, ceil(D/5)) bytes."""
    entries = np.asarray(entries, dtype=np.int8)
    n, d = entries.shape
    nb = code_bytes(d)
    padded = np.zeros((n, nb * 5), dtype=np.int64)
    padded[:, :d] = entries
    digits = padded.reshape(n, nb, 5) + 1
    return (digits * _POWERS[None, None, :]).sum(axis=2).astype(np.uint8)


def unpack_batch(packed: np.ndarray, dim: int) -> np.ndarray:
    """Decode (n, ceil(D/5)) bytes back to (n, D) ternary entries."""
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim != 2 or packed.shape[1] != code_bytes(dim):
        raise ValueError(f"expected (n, {code_bytes(dim)}) bytes for dim {dim}")
    if packed.size and packed.max() >= 243:
        bad = np.argwhere(packed >= 243)[0]
        raise CorruptedCodeError(
            f"byte value {int(packed[tuple(bad)])} at {tuple(int(v) for v in bad)} "
            "outside base-3 range [0, 243)"
        )
    return _UNPACK_TABLE[packed].reshape(packed.shape[0], -1)[:, :dim]


def unpack(packed: np.ndarray, dim: int) -> TernaryCode:
    """Decode one packed code; padding digits beyond `dim` are dropped."""
    entries = unpack_batch(np.asarray(packed, dtype=np.uint8)[None, :], dim)[0]
    return TernaryCode(entries=entries.copy(), k_star=int(np.count_nonzero(entries)))


def ternary_inner_product(q: np.ndarray, code: TernaryCode) -> float:
    """<q, entries> using only additions and subtractions.

    Positive entries add the matching query coordinate, negative entries
    subtract it; sums accumulate in float64.
    """
    q = np.asarray(q)
    if q.shape != code.entries.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {code.entries.shape}")
    pos = q[code.entries == 1].sum(dtype=np.float64)
    neg = q[code.entries == -1].sum(dtype=np.float64)
    return float(pos - neg)


def ternary_inner_product_batch(q: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """<q, entries_i> for (n, D) entry rows; select-and-add, no multiplies."""
    q = np.asarray(q, dtype=np.float64)
    pos = np.where(entries == 1, q[None, :], 0.0).sum(axis=1)
    neg = np.where(entries == -1, q[None, :], 0.0).sum(axis=1)
    return pos - neg


@dataclass(frozen=True)
class TrqRecord:
    """One stored residual record: packed code plus two metadata scalars."""

    packed: np.ndarray      # (ceil(D/5),) uint8
    ip_xc_delta: float      # <x_c, delta>, float32 precision
    delta_norm: float       # ||delta||, float32 precision, >= 0


class TrqStore:
    """Fixed-stride residual records for N vectors of dimension `dim`.

    Layout per record (matching the on-disk bytes exactly): packed code
    bytes first, then ip_xc_delta (f32 LE), then delta_norm (f32 LE).
    Immutable after construction; readers are fully concurrent.
    """

    def __init__(self, dim: int, raw: np.ndarray):
        stride = record_stride(dim)
        if raw.ndim != 2 or raw.shape[1] != stride or raw.dtype != np.uint8:
            raise ValueError(f"raw records must be (n, {stride}) uint8")
        self.dim = int(dim)
        self.stride = stride
        self._raw = raw
        cb = code_bytes(dim)
        self._packed = raw[:, :cb]
        scalars = np.ascontiguousarray(raw[:, cb:]).view("<f4")
        self._ip_xc_delta = scalars[:, 0]
        self._delta_norm = scalars[:, 1]
        if np.any(self._delta_norm < 0):
            raise ValueError("negative delta_norm in store")

    @property
    def count(self) -> int:
        return self._raw.shape[0]

    @property
    def raw(self) -> np.ndarray:
        return self._raw

    def record(self, i: int) -> TrqRecord:
        return TrqRecord(
            packed=self._packed[i].copy(),
            ip_xc_delta=float(self._ip_xc_delta[i]),
            delta_norm=float(self._delta_norm[i]),
        )

    def records(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Batch fetch: (entries (n, D) int8, k_star (n,), ip_xc_delta, delta_norm)."""
        ids = np.asarray(ids)
        entries = unpack_batch(self._packed[ids], self.dim)
        k_star = np.count_nonzero(entries, axis=1).astype(np.int64)
        return entries, k_star, self._ip_xc_delta[ids].copy(), self._delta_norm[ids].copy()


def build_store(
    base: Dataset,
    cb: pq.PQCodebook,
    codes: np.ndarray,
    block: int = 16384,
) -> TrqStore:
    """Encode every record's residual in a single pass over the dataset.

    Per record: delta = x - reconstruct(code), then the packed optimal
    ternary code plus <x_c, delta> and ||delta|| as float32 scalars.
    Records are independent, so blocks may be processed in any order.
    """
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.shape != (base.count, cb.m):
        raise ValueError(
            f"codes shape {codes.shape} does not match ({base.count}, {cb.m})"
        )
    if base.dim != cb.dim:
        raise ValueError(f"dimension mismatch: base {base.dim} vs codebook {cb.dim}")

    d = base.dim
    stride = record_stride(d)
    raw = np.empty((base.count, stride), dtype=np.uint8)
    nb = code_bytes(d)
    for start in range(0, base.count, block):
        stop = min(start + block, base.count)
        x = base.vectors[start:stop].astype(np.float64)
        x_c = pq.reconstruct_batch(cb, codes[start:stop]).astype(np.float64)
        delta = x - x_c
        entries, _ = encode_ternary_batch(delta)
        raw[start:stop, :nb] = pack_batch(entries)
        ip = np.einsum("ij,ij->i", x_c, delta).astype("<f4")
        dn = np.sqrt(np.einsum("ij,ij->i", delta, delta)).astype("<f4")
        raw[start:stop, nb:nb + 4] = ip.view(np.uint8).reshape(-1, 4)
        raw[start:stop, nb + 4:] = dn.view(np.uint8).reshape(-1, 4)
    return TrqStore(d, raw)


def save_store(path: PathLike, store: TrqStore) -> None:
    """Write header (magic, version, N, D, stride) plus contiguous records."""
    header = _MAGIC + struct.pack("<IQII", _VERSION, store.count, store.dim, store.stride)
    Path(path).write_bytes(header + store.raw.tobytes())


def load_store(path: PathLike) -> TrqStore:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a residual store file")
    version, count, dim, stride = struct.unpack_from("<IQII", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported store version {version}")
    if stride != record_stride(dim):
        raise ValueError(f"{path}: stride {stride} inconsistent with dim {dim}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=24)
    if body.size != count * stride:
        raise ValueError(f"{path}: record payload size mismatch")
    return TrqStore(dim, np.ascontiguousarray(body).reshape(count, stride))
