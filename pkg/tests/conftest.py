"""Shared fixtures: a small in-memory world and the full desk-preset run.

The desk run is the default benchmark configuration (synthetic 100k x
128-d, 1k queries) built once per session through the CLI entry points;
several acceptance criteria and index-level empirical bounds are measured
against it.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest

from tieredann import cli, estimator, ivf, pq, ternary, vecstore


@pytest.fixture(scope="session")
def small_world():
    """2000 x 32 clustered vectors with trained artifacts, ~2s to build."""
    both = vecstore.synth_gaussian(2100, 32, seed=7, clusters=32)
    base = vecstore.Dataset(both.vectors[:2000].copy())
    queries = vecstore.Dataset(both.vectors[2000:].copy())
    cfg = pq.PQConfig(m=8, nbits=6, iters=15, seed=1)
    cb = pq.train(cfg, base)
    index = ivf.build_ivf(base, 16, cb, seed=2)
    store = ternary.build_store(base, cb, index.codes)
    gt = vecstore.brute_force_knn(base, queries, 50)
    pairs = estimator.sample_calibration_pairs(base, cb, index, store, 0.05, seed=3)
    model = estimator.fit(pairs)
    return SimpleNamespace(base=base, queries=queries, cb=cb, index=index,
                           store=store, gt=gt, model=model, pairs=pairs)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full desk-preset build + gt + calibrate + bench via the CLI."""
    out = tmp_path_factory.mktemp("desk")
    cfg = cli.load_config(None, [])
    cfg["out"] = str(out)
    manifest = cli.cmd_build(cfg)
    cli.cmd_gt(cfg)
    cli.cmd_calibrate(cfg)
    report = cli.cmd_bench(cfg)
    paths = {k: str(v) for k, v in cli._paths(cfg).items()}
    return SimpleNamespace(
        cfg=cfg,
        out=out,
        paths=paths,
        manifest=manifest,
        report=report,
        base=vecstore.read_fvecs(paths["base"]),
        queries=vecstore.read_fvecs(paths["queries"]),
        cb=pq.load_codebook(paths["codebook"]),
        index=ivf.load_index(paths["ivf"]),
        store=ternary.load_store(paths["trq"]),
        model=estimator.load_model(paths["model"]),
        gt=vecstore.load_ground_truth(paths["gt_ids"], paths["gt_dists"]),
    )


def exact_rerank_ids(base_vectors: np.ndarray, q: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Independent oracle: exact top-k of a candidate set by (distance, id)."""
    diffs = base_vectors[ids].astype(np.float64) - np.asarray(q, dtype=np.float64)
    d = np.einsum("ij,ij->i", diffs, diffs)
    order = np.lexsort((ids, d))[:k]
    return ids[order]
