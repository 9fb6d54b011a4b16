"""Operator CLI: build artifacts, ground truth, calibration, benchmark sweeps.

Subcommands
    build      train the coarse codebook, cluster the IVF, encode residuals
    gt         exhaustive-search ground truth for the query set
    calibrate  fit the linear distance calibration and report holdout MSE
    bench      distortion + refinement-sweep + cost tables (JSON and CSV)
    report     pretty-print the tables of an existing report.json

Configuration lives in one JSON file merged over the built-in "desk"
preset (synthetic 100k x 128-d, 1k queries, k=10, fractions
0.1/0.25/0.5/1.0); any field can be overridden with --set dotted.path=value.
Every command is deterministic for a fixed config and seed; timings and
timestamps live only in metadata, never in metric tables.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import estimator, ivf, pipeline, pq, ternary, vecstore

__all__ = ["main", "DEFAULT_CONFIG", "REPORT_SCHEMA_VERSION", "validate_report"]

REPORT_SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "data": {
        "base": None,      # fvecs path; null synthesizes into the output dir
        "queries": None,
        "synth": {"n": 100_000, "queries": 1000, "dim": 128, "clusters": 1024, "seed": 42},
    },
    "pq": {"m": None, "nbits": 8, "iters": 25, "seed": 1, "train_sample": 20_000},
    "ivf": {"nlist": 128, "nprobe": 16, "candidates": 100, "iters": 20, "seed": 2},
    "calibration": {
        "fraction": 0.003,
        "seed": 3,
        "neighbor_cap": 64,
        "intercept": True,
        "holdout_fraction": 0.2,
    },
    "refine": {"k": 10, "fractions": [0.1, 0.25, 0.5, 1.0], "use_calibration": True,
               "queue_capacity": 1024},
    "gt": {"k": 100},
    "tiers": {"ssd_latency_s": 45e-6, "ssd_iops": 1.2e6, "far_latency_s": 271e-9,
              "far_bandwidth_bps": 22e9},
    "out": "runs/desk",
    "threads": 1,
}


class CliError(RuntimeError):
    """Command failure carrying the stage name for the exit message."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration plumbing


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_set(cfg: dict, expr: str) -> None:
    if "=" not in expr:
        raise CliError("config", f"--set needs dotted.path=value, got {expr!r}")
    path, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = path.split(".")
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


def load_config(path: str | None, sets: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CliError("config", f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise CliError("config", f"invalid JSON in {path}: {e}")
        cfg = _deep_merge(cfg, user)
    for expr in sets:
        _apply_set(cfg, expr)
    return cfg


def _data_dim(cfg: dict) -> int:
    base = cfg["data"]["base"]
    if base is None:
        return int(cfg["data"]["synth"]["dim"])
    with Path(base).open("rb") as f:
        raw = f.read(4)
    if len(raw) < 4:
        raise CliError("config", f"cannot read dimension header from {base}")
    return int(np.frombuffer(raw, "<i4", 1)[0])


def resolve_config(cfg: dict) -> dict:
    """Fill derived defaults (m = D/4) so the hashed config is complete."""
    cfg = copy.deepcopy(cfg)
    if (cfg["data"]["base"] is None) != (cfg["data"]["queries"] is None):
        raise CliError("config", "data.base and data.queries must be set together")
    if cfg["pq"]["m"] is None:
        dim = _data_dim(cfg)
        if dim % 4 != 0:
            raise CliError("config", f"dim {dim} not divisible by 4; set pq.m explicitly")
        cfg["pq"]["m"] = dim // 4
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# shared artifact helpers


def _paths(cfg: dict) -> dict:
    out = Path(cfg["out"])
    return {
        "out": out,
        "base": out / "base.fvecs",
        "queries": out / "queries.fvecs",
        "codebook": out / "codebook.bin",
        "ivf": out / "ivf.bin",
        "trq": out / "trq.bin",
        "manifest": out / "manifest.json",
        "gt_ids": out / "gt_ids.ivecs",
        "gt_dists": out / "gt_dists.fvecs",
        "model": out / "model.bin",
        "calibration_txt": out / "calibration.txt",
        "report": out / "report.json",
    }


def _load_datasets(cfg: dict, stage: str) -> tuple[vecstore.Dataset, vecstore.Dataset]:
    p = _paths(cfg)
    base_path = cfg["data"]["base"] or p["base"]
    query_path = cfg["data"]["queries"] or p["queries"]
    for path, role in ((base_path, "base"), (query_path, "queries")):
        if not Path(path).exists():
            raise CliError(stage, f"missing {role} dataset {path}; run `build` first")
    return vecstore.read_fvecs(base_path), vecstore.read_fvecs(query_path)


def _require(stage: str, path: Path, producer: str):
    if not path.exists():
        raise CliError(stage, f"missing artifact {path}; run `{producer}` first")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tiers(cfg: dict) -> pipeline.TierParams:
    t = cfg["tiers"]
    return pipeline.TierParams(
        ssd_latency=float(t["ssd_latency_s"]),
        ssd_iops=float(t["ssd_iops"]),
        far_latency=float(t["far_latency_s"]),
        far_bandwidth=float(t["far_bandwidth_bps"]),
    )


def _query_contexts(cb: pq.PQCodebook, queries: vecstore.Dataset, threads: int):
    rows = list(queries.vectors)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda q: estimator.make_query_context(cb, q), rows))
    return [estimator.make_query_context(cb, q) for q in rows]


# ---------------------------------------------------------------------------
# commands


def cmd_build(cfg: dict) -> dict:
    cfg = resolve_config(cfg)
    p = _paths(cfg)
    p["out"].mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    if cfg["data"]["base"] is None:
        s = cfg["data"]["synth"]
        both = vecstore.synth_gaussian(
            int(s["n"]) + int(s["queries"]), int(s["dim"]), int(s["seed"]), int(s["clusters"])
        )
        base = vecstore.Dataset(both.vectors[: int(s["n"])].copy())
        queries = vecstore.Dataset(both.vectors[int(s["n"]):].copy())
        vecstore.write_fvecs(p["base"], base)
        vecstore.write_fvecs(p["queries"], queries)
    else:
        base = vecstore.read_fvecs(cfg["data"]["base"])
        queries = vecstore.read_fvecs(cfg["data"]["queries"])
    timings["data_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pq_cfg = pq.PQConfig(m=int(cfg["pq"]["m"]), nbits=int(cfg["pq"]["nbits"]),
                         iters=int(cfg["pq"]["iters"]), seed=int(cfg["pq"]["seed"]))
    sample = base
    train_sample = cfg["pq"]["train_sample"]
    if train_sample is not None and int(train_sample) < base.count:
        rng = np.random.Generator(np.random.PCG64(pq_cfg.seed))
        pick = np.sort(rng.choice(base.count, size=int(train_sample), replace=False))
        sample = vecstore.Dataset(base.vectors[pick].copy())
    cb = pq.train(pq_cfg, sample)
    pq.save_codebook(p["codebook"], cb)
    timings["pq_train_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    index = ivf.build_ivf(base, int(cfg["ivf"]["nlist"]), cb, int(cfg["ivf"]["seed"]),
                          iters=int(cfg["ivf"]["iters"]))
    ivf.save_index(p["ivf"], index)
    timings["ivf_build_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    store = ternary.build_store(base, cb, index.codes)
    ternary.save_store(p["trq"], store)
    timings["trq_build_s"] = time.perf_counter() - t0

    expected = ternary.record_stride(base.dim)
    if store.stride != expected:
        raise CliError("build", f"stride {store.stride} != ceil(D/5)+8 = {expected}")

    artifacts = {}
    names = ["codebook", "ivf", "trq"] + ([] if cfg["data"]["base"] else ["base", "queries"])
    for name in names:
        artifacts[name] = {
            "path": str(p[name]),
            "bytes": p[name].stat().st_size,
            "sha256": _sha256(p[name]),
        }
    manifest = {
        "config_hash": config_hash(cfg),
        "config": cfg,
        "dim": base.dim,
        "count": base.count,
        "record_stride_bytes": store.stride,
        "code_bits_per_dim": ternary.code_bits_per_dim(base.dim),
        "artifacts": artifacts,
        "timings_s": timings,
    }
    p["manifest"].write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"build: {base.count} x {base.dim}, stride {store.stride} B/record "
          f"({manifest['code_bits_per_dim']:.3g} code bits/dim), out {p['out']}")
    return manifest


def cmd_gt(cfg: dict) -> None:
    cfg = resolve_config(cfg)
    p = _paths(cfg)
    base, queries = _load_datasets(cfg, "gt")
    k = int(cfg["gt"]["k"])
    if k > base.count:
        raise CliError("gt", f"gt.k={k} exceeds base count {base.count}")
    gt = vecstore.brute_force_knn(base, queries, k)
    vecstore.save_ground_truth(gt, p["gt_ids"], p["gt_dists"])
    print(f"gt: wrote top-{k} for {queries.count} queries")


def cmd_calibrate(cfg: dict) -> None:
    cfg = resolve_config(cfg)
    p = _paths(cfg)
    for name, producer in (("codebook", "build"), ("ivf", "build"), ("trq", "build")):
        _require("calibrate", p[name], producer)
    base, _ = _load_datasets(cfg, "calibrate")
    cb = pq.load_codebook(p["codebook"])
    index = ivf.load_index(p["ivf"])
    store = ternary.load_store(p["trq"])

    cal = cfg["calibration"]
    fraction = float(cal["fraction"])
    if fraction <= 0:
        raise CliError("calibrate", f"calibration.fraction must be > 0, got {fraction}")
    pairs = estimator.sample_calibration_pairs(
        base, cb, index, store, fraction, int(cal["seed"]),
        neighbor_cap=int(cal["neighbor_cap"]),
    )
    rng = np.random.Generator(np.random.PCG64(int(cal["seed"]) + 1))
    perm = rng.permutation(len(pairs))
    n_hold = max(1, int(float(cal["holdout_fraction"]) * len(pairs)))
    hold_idx = set(perm[:n_hold].tolist())
    train = [pairs[i] for i in range(len(pairs)) if i not in hold_idx]
    hold = [pairs[i] for i in range(len(pairs)) if i in hold_idx]

    model = estimator.fit(train, intercept=bool(cal["intercept"]), sample_fraction=fraction)
    estimator.save_model(p["model"], model)

    feats = np.array([fv.as_array() for fv, _ in hold])
    truth = np.array([t for _, t in hold])
    raw = feats @ np.array(estimator.RAW_EQUIVALENT_WEIGHTS)
    mse_raw = float(np.mean((raw - truth) ** 2))
    mse_cal = float(np.mean((model.apply_batch(feats) - truth) ** 2))
    summary = (
        estimator.dump_model_text(model)
        + f"pairs  {len(pairs)} (train {len(train)}, holdout {len(hold)})\n"
        + f"holdout_mse_raw  {mse_raw!r}\n"
        + f"holdout_mse_calibrated  {mse_cal!r}\n"
    )
    p["calibration_txt"].write_text(summary)
    print(f"calibrate: {len(pairs)} pairs, holdout MSE {mse_raw:.6g} -> {mse_cal:.6g}")


def _distortion_table(gt, ctxs, index, store, model) -> list[list]:
    sq_err = np.zeros(4, dtype=np.float64)
    n_pairs = 0
    raw_w = np.array(estimator.RAW_EQUIVALENT_WEIGHTS)
    for i, ctx in enumerate(ctxs):
        nb = gt.ids[i].astype(np.int64)
        d0 = pq.adc_distance_batch(ctx.adc, index.codes[nb])
        entries, ks, ip_xc, dn = store.records(nb)
        feats = estimator.feature_matrix(d0, entries, ks, ip_xc, dn, ctx.q)
        truth = gt.dists[i].astype(np.float64)
        ests = (feats[:, 0], feats[:, 0] + feats[:, 2], feats @ raw_w, model.apply_batch(feats))
        for j, est in enumerate(ests):
            sq_err[j] += float(np.sum((est - truth) ** 2))
        n_pairs += nb.size
    mse = sq_err / n_pairs
    names = ["coarse_only", "first_order", "second_order_raw", "calibrated"]
    return [[name, float(v)] for name, v in zip(names, mse)]


def cmd_bench(cfg: dict) -> dict:
    cfg = resolve_config(cfg)
    p = _paths(cfg)
    for name, producer in (("codebook", "build"), ("ivf", "build"), ("trq", "build"),
                           ("gt_ids", "gt"), ("gt_dists", "gt"), ("model", "calibrate")):
        _require("bench", p[name], producer)
    base, queries = _load_datasets(cfg, "bench")
    cb = pq.load_codebook(p["codebook"])
    index = ivf.load_index(p["ivf"])
    store = ternary.load_store(p["trq"])
    model = estimator.load_model(p["model"])
    gt = vecstore.load_ground_truth(p["gt_ids"], p["gt_dists"])
    tiers = _tiers(cfg)
    threads = int(cfg["threads"])
    k = int(cfg["refine"]["k"])
    if k > gt.k:
        raise CliError("bench", f"refine.k={k} exceeds ground-truth depth {gt.k}")

    t0 = time.perf_counter()
    ctxs = _query_contexts(cb, queries, threads)
    nprobe, limit = int(cfg["ivf"]["nprobe"]), int(cfg["ivf"]["candidates"])

    def search(ctx):
        return ivf.search_coarse(index, ctx, nprobe, limit)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            candidates = list(pool.map(search, ctxs))
    else:
        candidates = [search(ctx) for ctx in ctxs]
    candidate_recall = pipeline.recall_at_k([c.ids for c in candidates], gt, k)
    search_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    distortion = _distortion_table(gt, ctxs, index, store, model)
    distortion_s = time.perf_counter() - t0

    fractions = [float(f) for f in cfg["refine"]["fractions"]]
    if not fractions:
        raise CliError("bench", "refine.fractions must list at least one fraction")

    t0 = time.perf_counter()
    rows = pipeline.sweep_refinement(
        candidates, ctxs, store, model, base.vectors, k, fractions, tiers, gt,
        use_calibration=bool(cfg["refine"]["use_calibration"]),
        queue_capacity=int(cfg["refine"]["queue_capacity"]),
        threads=threads,
    )
    sweep_s = time.perf_counter() - t0

    sweep_cols = ["fraction", "recall", "mean_ssd_fetches", "refinement_ratio",
                  "modeled_latency_us"]
    cost_cols = ["fraction", "mean_far_accesses", "mean_far_bytes", "mean_ssd_fetches",
                 "mean_ssd_bytes", "modeled_latency_us"]
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "metadata": {
            "created_unix": time.time(),
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "timings_s": {"search": search_s, "distortion": distortion_s, "sweep": sweep_s},
        },
        "metrics": {"candidate_recall": candidate_recall},
        "tables": {
            "distortion": {"columns": ["estimator", "mse"], "rows": distortion},
            "sweep": {"columns": sweep_cols,
                      "rows": [[r[c] for c in sweep_cols] for r in rows]},
            "cost": {"columns": cost_cols,
                     "rows": [[r[c] for c in cost_cols] for r in rows]},
        },
    }
    validate_report(report)
    p["report"].write_text(json.dumps(report, indent=2) + "\n")
    _write_csv(p["out"] / "distortion.csv", ["estimator", "mse"], distortion)
    _write_csv(p["out"] / "sweep.csv", sweep_cols,
               [[r[c] for c in sweep_cols] for r in rows])
    _write_csv(p["out"] / "cost.csv", cost_cols,
               [[r[c] for c in cost_cols] for r in rows])
    last = rows[-1]
    print(f"bench: candidate recall@{k} {candidate_recall:.4f}; "
          f"fraction={last['fraction']:g} recall {last['recall']:.4f}; report {p['report']}")
    return report


def _write_csv(path: Path, columns: list[str], rows: list[list]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def validate_report(report: dict) -> None:
    """Check the report against the documented schema; raise ValueError if off."""
    if report.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError("bad or missing schema_version")
    for key in ("config_hash", "config", "metadata", "metrics", "tables"):
        if key not in report:
            raise ValueError(f"missing report key {key!r}")
    for name in ("distortion", "sweep", "cost"):
        table = report["tables"].get(name)
        if not isinstance(table, dict) or "columns" not in table or "rows" not in table:
            raise ValueError(f"table {name!r} missing columns/rows")
        width = len(table["columns"])
        if any(len(row) != width for row in table["rows"]):
            raise ValueError(f"table {name!r} has ragged rows")


def cmd_report(report_path: str) -> None:
    path = Path(report_path)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise CliError("report", f"no report at {path}; run `bench` first")
    report = json.loads(path.read_text())
    validate_report(report)
    print(f"config {report['config_hash'][:12]}  "
          f"candidate_recall {report['metrics']['candidate_recall']:.4f}")
    for name, table in report["tables"].items():
        print(f"\n[{name}]")
        print("  " + "  ".join(f"{c:>18s}" for c in table["columns"]))
        for row in table["rows"]:
            cells = [f"{v:>18.6g}" if isinstance(v, float) else f"{str(v):>18s}" for v in row]
            print("  " + "  ".join(cells))


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tieredann",
                                 description="progressive ANN refinement benchmark tool")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("build", "gt", "calibrate", "bench"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="JSON config (desk preset if omitted)")
        cmd.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                         help="override a config field, e.g. --set refine.k=20")
        cmd.add_argument("--out", default=None, help="override the output directory")
        cmd.add_argument("--threads", type=int, default=None, help="worker thread cap")
    rep = sub.add_parser("report")
    rep.add_argument("run", help="report.json or the run directory containing it")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.run)
            return 0
        cfg = load_config(args.config, args.set)
        if args.out is not None:
            cfg["out"] = args.out
        if args.threads is not None:
            cfg["threads"] = args.threads
        {"build": cmd_build, "gt": cmd_gt, "calibrate": cmd_calibrate,
         "bench": cmd_bench}[args.command](cfg)
        return 0
    except CliError as e:
        print(f"error [{e.stage}]: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error [{args.command}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
