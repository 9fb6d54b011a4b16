"""Progressive distance estimation and its linear calibration.

The squared L2 distance between a query q and a record x decomposes
around the coarse reconstruction x_c as

    ||x - q||^2 = ||x_c - q||^2 + ||delta||^2 + 2 <x_c, delta> - 2 <q, delta>

with delta = x - x_c. The first three terms come from fast-memory data
(ADC lookup plus two stored scalars); only <q, delta> needs the residual
direction, which the ternary code approximates. Dropping the orthogonal
error term leaves

    <q, delta> ~ ||delta|| * <q, entries> / sqrt(k*)

whose systematic shrinkage (the alignment between the residual and its
ternary code) is soaked up by a learned linear model over the feature
vector [d0, d_ip, ||delta||^2, <x_c, delta>] fitted by least squares on a
small sample of record/co-list-member pairs.

Feature arithmetic accumulates in float64 and stores float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import pq, ternary
from .vecstore import Dataset, PathLike

if TYPE_CHECKING:  # pragma: no cover
    from .ivf import IvfIndex

__all__ = [
    "QueryContext",
    "FeatureVector",
    "CalibrationModel",
    "FitError",
    "make_query_context",
    "first_order",
    "estimate_ip",
    "estimate_ip_batch",
    "second_order_raw",
    "feature_matrix",
    "compute_features",
    "sample_calibration_pairs",
    "fit",
    "calibrated_distance",
    "save_model",
    "load_model",
    "dump_model_text",
]

_MAGIC = b"TQCM"
_VERSION = 1

_FEATURE_NAMES = ("d0", "d_ip", "delta_sq", "xc_delta")

#: Weights under which the calibrated estimate reproduces the raw
#: second-order formula exactly (d_ip already carries the -2 factor).
RAW_EQUIVALENT_WEIGHTS = (1.0, 1.0, 1.0, 2.0)


class FitError(ValueError):
    """Calibration could not be fitted (degenerate feature matrix)."""


@dataclass(frozen=True)
class QueryContext:
    """Per-query precomputed state: the query, its norm, and the ADC table."""

    q: np.ndarray        # (D,) float32
    q_norm: float        # ||q||, float32 precision
    adc: pq.AdcTable


def make_query_context(cb: pq.PQCodebook, q: np.ndarray) -> QueryContext:
    q = np.asarray(q, dtype=np.float32)
    norm = np.float32(np.sqrt(np.dot(q.astype(np.float64), q.astype(np.float64))))
    return QueryContext(q=q, q_norm=float(norm), adc=pq.adc_table(cb, q))


@dataclass(frozen=True)
class FeatureVector:
    """Calibration features for one (query, record) pair.

    d_ip is defined as -2 * estimate_ip so that the identity weights
    (1, 1, 1, 2) recover the raw second-order estimate.
    """

    d0: float        # coarse distance ||q - x_c||^2
    d_ip: float      # refined estimate of -2 <q, delta>
    delta_sq: float  # ||delta||^2
    xc_delta: float  # <x_c, delta>

    def as_array(self) -> np.ndarray:
        return np.array([self.d0, self.d_ip, self.delta_sq, self.xc_delta], dtype=np.float64)


def first_order(d0: float, distortion: float) -> float:
    """Coarse distance plus the stored compression distortion ||delta||^2."""
    if d0 < 0 or distortion < 0:
        raise ValueError("d0 and distortion must be non-negative")
    return d0 + distortion


def estimate_ip(ctx: QueryContext, rec: ternary.TrqRecord) -> float:
    """Estimated <q, delta> from the ternary direction and stored norm.

    Equals delta_norm * <q, entries> / sqrt(k*); the query norm cancels
    between the normalization of q and the rescaling by ||q||. Returns 0
    for a zero residual. The dropped alignment factor between the residual
    and its code is compensated by calibration.
    """
    code = ternary.unpack(rec.packed, ctx.q.shape[0])
    if code.k_star == 0:
        return 0.0
    tip = ternary.ternary_inner_product(ctx.q, code)
    return rec.delta_norm * tip / float(np.sqrt(code.k_star))


def estimate_ip_batch(
    q: np.ndarray,
    entries: np.ndarray,
    k_star: np.ndarray,
    delta_norm: np.ndarray,
) -> np.ndarray:
    """Vectorized estimate_ip over pre-unpacked records."""
    tips = ternary.ternary_inner_product_batch(q, entries)
    k = np.asarray(k_star, dtype=np.float64)
    scale = np.divide(delta_norm, np.sqrt(np.maximum(k, 1.0)))
    return np.where(k > 0, scale * tips, 0.0)


def second_order_raw(d0: float, rec: ternary.TrqRecord, ip_est: float) -> float:
    """Full decomposition with the estimated inner product plugged in."""
    return d0 + rec.delta_norm * rec.delta_norm + 2.0 * rec.ip_xc_delta - 2.0 * ip_est


def feature_matrix(
    d0: np.ndarray,
    entries: np.ndarray,
    k_star: np.ndarray,
    ip_xc_delta: np.ndarray,
    delta_norm: np.ndarray,
    q: np.ndarray,
) -> np.ndarray:
    """(n, 4) float64 feature rows [d0, -2*ip_est, ||delta||^2, <x_c, delta>]."""
    ip_est = estimate_ip_batch(q, entries, k_star, delta_norm)
    dn = np.asarray(delta_norm, dtype=np.float64)
    return np.stack(
        [np.asarray(d0, dtype=np.float64), -2.0 * ip_est, dn * dn,
         np.asarray(ip_xc_delta, dtype=np.float64)],
        axis=1,
    )


def compute_features(ctx: QueryContext, store: ternary.TrqStore, record_id: int, d0: float) -> FeatureVector:
    """Features for a single (query, record) pair, as used at query time."""
    entries, k_star, ip_xc, dnorm = store.records(np.array([record_id]))
    row = feature_matrix(np.array([d0]), entries, k_star, ip_xc, dnorm, ctx.q)[0]
    return FeatureVector(*map(float, row))


@dataclass(frozen=True)
class CalibrationModel:
    """Learned affine map from features to a calibrated distance."""

    weights: np.ndarray          # (4,) float64
    intercept: float
    sample_fraction: float = 0.003

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (4,) or not np.isfinite(w).all() or not np.isfinite(self.intercept):
            raise ValueError("model requires 4 finite weights and a finite intercept")

    def apply_batch(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.intercept


def calibrated_distance(model: CalibrationModel, fv: FeatureVector) -> float:
    """dot(weights, features) + intercept."""
    return float(fv.as_array() @ model.weights + model.intercept)


def sample_calibration_pairs(
    base: Dataset,
    cb: pq.PQCodebook,
    index: "IvfIndex",
    store: ternary.TrqStore,
    fraction: float,
    seed: int,
    neighbor_cap: int = 64,
) -> list[tuple[FeatureVector, float]]:
    """Draw boundary-biased training pairs from inverted-list co-members.

    A `fraction` of database vectors is sampled (PCG64, without
    replacement). Each sampled vector plays the query role against members
    of its own inverted list, which cluster near it and cover its local
    ranking boundary. Co-members are capped at `neighbor_cap`, nearest by
    coarse distance first. Features are computed exactly as at query time;
    the target is the exact squared distance.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if neighbor_cap < 1:
        raise ValueError("neighbor_cap must be >= 1")
    n_samples = int(fraction * base.count)
    if n_samples == 0:
        raise ValueError(
            f"fraction {fraction} yields zero samples on {base.count} vectors"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    sample_ids = np.sort(rng.choice(base.count, size=n_samples, replace=False))

    pairs: list[tuple[FeatureVector, float]] = []
    for s in sample_ids:
        members = index.lists[int(index.assignment[s])]
        members = members[members != s]
        if members.size == 0:
            continue
        x = base.vectors[s]
        ctx = make_query_context(cb, x)
        d0 = pq.adc_distance_batch(ctx.adc, index.codes[members])
        order = np.lexsort((members, d0))[:neighbor_cap]
        members, d0 = members[order], d0[order]

        entries, k_star, ip_xc, dnorm = store.records(members)
        feats = feature_matrix(d0, entries, k_star, ip_xc, dnorm, x)
        diffs = base.vectors[members].astype(np.float64) - x.astype(np.float64)
        truth = np.einsum("ij,ij->i", diffs, diffs)
        for row, t in zip(feats, truth):
            pairs.append((FeatureVector(*map(float, row)), float(t)))
    return pairs


def fit(
    pairs: Sequence[tuple[FeatureVector, float]],
    intercept: bool = True,
    sample_fraction: float = 0.003,
) -> CalibrationModel:
    """Least-squares calibration over sampled pairs.

    Solves the normal equations (A^T A + lambda I) W = A^T D with a ridge
    damping lambda = 1e-6 * trace(A^T A) / 4: the features are strongly
    correlated (d0 dominates), and damping this small leaves
    well-conditioned solutions untouched beyond 1e-6.
    """
    if len(pairs) < 64:
        raise ValueError(f"need at least 64 pairs to calibrate, got {len(pairs)}")
    A = np.array([fv.as_array() for fv, _ in pairs], dtype=np.float64)
    y = np.array([t for _, t in pairs], dtype=np.float64)

    for col, name in enumerate(_FEATURE_NAMES):
        if np.ptp(A[:, col]) == 0.0:
            raise FitError(f"feature column '{name}' is constant; cannot fit")

    if intercept:
        A = np.hstack([A, np.ones((A.shape[0], 1))])
    gram = A.T @ A
    lam = 1e-6 * np.trace(gram) / 4.0
    w = np.linalg.solve(gram + lam * np.eye(A.shape[1]), A.T @ y)
    if intercept:
        return CalibrationModel(weights=w[:4], intercept=float(w[4]),
                                sample_fraction=sample_fraction)
    return CalibrationModel(weights=w, intercept=0.0, sample_fraction=sample_fraction)


def save_model(path: PathLike, model: CalibrationModel) -> None:
    payload = _MAGIC + struct.pack(
        "<IIddddddd",
        _VERSION,
        4,
        *model.weights.tolist(),
        model.intercept,
        model.sample_fraction,
        0.0,  # reserved
    )
    Path(path).write_bytes(payload)


def load_model(path: PathLike) -> CalibrationModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a calibration model file")
    version, nw = struct.unpack_from("<II", raw, 4)
    if version != _VERSION or nw != 4:
        raise ValueError(f"{path}: unsupported model layout (v{version}, {nw} weights)")
    values = struct.unpack_from("<ddddddd", raw, 12)
    return CalibrationModel(
        weights=np.array(values[:4]), intercept=values[4], sample_fraction=values[5]
    )


def dump_model_text(model: CalibrationModel) -> str:
    """Human-readable weight dump for inspection."""
    lines = [f"{name:>9s}  {w:+.9g}" for name, w in zip(_FEATURE_NAMES, model.weights)]
    lines.append(f"intercept  {model.intercept:+.9g}")
    lines.append(f"sample_fraction  {model.sample_fraction:.6g}")
    return "\n".join(lines) + "\n"
