"""CLI command behavior on a reduced configuration."""

import json

import numpy as np
import pytest

from tieredann import cli
from tieredann.cli import main


def small_args(out, **extra):
    sets = {
        "data.synth.n": 800,
        "data.synth.queries": 60,
        "data.synth.dim": 40,
        "data.synth.clusters": 8,
        "pq.m": 10,
        "pq.nbits": 5,
        "pq.iters": 10,
        "pq.train_sample": 800,
        "ivf.nlist": 8,
        "ivf.nprobe": 4,
        "ivf.candidates": 60,
        "calibration.fraction": 0.02,
        "gt.k": 20,
        "refine.fractions": [0.25, 1.0],
    }
    sets.update(extra)
    args = ["--out", str(out)]
    for key, value in sets.items():
        args += ["--set", f"{key}={json.dumps(value)}"]
    return args


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("clirun")
    assert main(["build"] + small_args(out)) == 0
    assert main(["gt"] + small_args(out)) == 0
    assert main(["calibrate"] + small_args(out)) == 0
    assert main(["bench"] + small_args(out)) == 0
    return out


class TestBuild:
    def test_artifacts_and_manifest(self, run_dir):
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["record_stride_bytes"] == 8 + 8  # ceil(40/5) + 8
        assert manifest["code_bits_per_dim"] == 1.6
        for name in ("codebook", "ivf", "trq", "base", "queries"):
            assert (run_dir / manifest["artifacts"][name]["path"].split("/")[-1]).exists()

    def test_rebuild_same_seed_identical_hashes(self, run_dir, tmp_path):
        manifest_a = json.loads((run_dir / "manifest.json").read_text())
        assert main(["build"] + small_args(tmp_path)) == 0
        manifest_b = json.loads((tmp_path / "manifest.json").read_text())
        hashes_a = {k: v["sha256"] for k, v in manifest_a["artifacts"].items()}
        hashes_b = {k: v["sha256"] for k, v in manifest_b["artifacts"].items()}
        assert hashes_a == hashes_b

    def test_config_hash_stable(self, run_dir):
        manifest = json.loads((run_dir / "manifest.json").read_text())
        report = json.loads((run_dir / "report.json").read_text())
        assert manifest["config_hash"] == report["config_hash"]

    def test_external_dataset_paths(self, tmp_path):
        from tieredann import vecstore
        both = vecstore.synth_gaussian(460, 20, seed=2, clusters=4)
        vecstore.write_fvecs(tmp_path / "b.fvecs", both.vectors[:400])
        vecstore.write_fvecs(tmp_path / "q.fvecs", both.vectors[400:])
        out = tmp_path / "run"
        args = small_args(
            out,
            **{"data.base": str(tmp_path / "b.fvecs"),
               "data.queries": str(tmp_path / "q.fvecs"),
               "data.synth.dim": 20, "pq.m": 4, "pq.nbits": 4,
               "pq.train_sample": 400, "ivf.nlist": 4, "ivf.candidates": 40},
        )
        for command in ("build", "gt", "calibrate", "bench"):
            assert main([command] + args) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["count"] == 400 and manifest["dim"] == 20
        assert "base" not in manifest["artifacts"]  # external data is not copied


class TestGt:
    def test_k_too_large(self, tmp_path):
        assert main(["build"] + small_args(tmp_path)) == 0
        code = main(["gt"] + small_args(tmp_path, **{"gt.k": 5000}))
        assert code == 1

    def test_files_written(self, run_dir):
        assert (run_dir / "gt_ids.ivecs").exists()
        assert (run_dir / "gt_dists.fvecs").exists()


class TestCalibrate:
    def test_summary_reports_improvement(self, run_dir):
        text = (run_dir / "calibration.txt").read_text()
        values = {}
        for line in text.splitlines():
            parts = line.split()
            if len(parts) == 2:
                values[parts[0]] = parts[1]
        assert float(values["holdout_mse_calibrated"]) <= float(values["holdout_mse_raw"])

    def test_zero_fraction_rejected(self, run_dir):
        code = main(["calibrate"] + small_args(run_dir, **{"calibration.fraction": 0}))
        assert code == 1

    def test_deterministic_model(self, run_dir, tmp_path):
        model_a = (run_dir / "model.bin").read_bytes()
        assert main(["build"] + small_args(tmp_path)) == 0
        assert main(["calibrate"] + small_args(tmp_path)) == 0
        assert (tmp_path / "model.bin").read_bytes() == model_a


class TestBench:
    def test_report_schema(self, run_dir):
        report = json.loads((run_dir / "report.json").read_text())
        cli.validate_report(report)
        assert report["schema_version"] == cli.REPORT_SCHEMA_VERSION

    def test_sweep_csv_header(self, run_dir):
        header = (run_dir / "sweep.csv").read_text().splitlines()[0]
        assert header == "fraction,recall,mean_ssd_fetches,refinement_ratio,modeled_latency_us"

    def test_distortion_ordering(self, run_dir):
        report = json.loads((run_dir / "report.json").read_text())
        mse = dict(report["tables"]["distortion"]["rows"])
        assert mse["calibrated"] <= mse["second_order_raw"] < mse["first_order"]

    def test_fraction_one_recall_equals_candidate_baseline(self, run_dir):
        report = json.loads((run_dir / "report.json").read_text())
        sweep = report["tables"]["sweep"]
        rows = {row[0]: row for row in sweep["rows"]}
        assert rows[1.0][1] == report["metrics"]["candidate_recall"]

    def test_rerun_reproduces_tables(self, run_dir):
        report_a = json.loads((run_dir / "report.json").read_text())
        assert main(["bench"] + small_args(run_dir)) == 0
        report_b = json.loads((run_dir / "report.json").read_text())
        assert json.dumps(report_a["tables"]) == json.dumps(report_b["tables"])
        assert report_a["config_hash"] == report_b["config_hash"]

    def test_embedded_config_reproduces_tables(self, run_dir):
        # reports are self-describing: benching from the embedded config
        # regenerates the same metric tables
        report_a = json.loads((run_dir / "report.json").read_text())
        report_b = cli.cmd_bench(json.loads(json.dumps(report_a["config"])))
        assert json.dumps(report_a["tables"]) == json.dumps(report_b["tables"])

    def test_raw_estimator_sweep(self, run_dir):
        assert main(["bench"] + small_args(run_dir, **{"refine.use_calibration": False})) == 0
        report = json.loads((run_dir / "report.json").read_text())
        rows = {row[0]: row for row in report["tables"]["sweep"]["rows"]}
        # at fraction 1.0 every candidate is re-ranked exactly, so the raw
        # estimator reaches the same baseline recall
        assert rows[1.0][1] == report["metrics"]["candidate_recall"]
        # restore the calibrated report for the other tests in this module
        assert main(["bench"] + small_args(run_dir)) == 0

    def test_missing_artifacts_name_stage(self, tmp_path, capsys):
        code = main(["bench"] + small_args(tmp_path / "nothing"))
        assert code == 1
        err = capsys.readouterr().err
        assert "error [bench]" in err and "build" in err


class TestReport:
    def test_prints_tables(self, run_dir, capsys):
        assert main(["report", str(run_dir)]) == 0
        out = capsys.readouterr().out
        for name in ("distortion", "sweep", "cost"):
            assert f"[{name}]" in out

    def test_missing_report(self, tmp_path, capsys):
        assert main(["report", str(tmp_path)]) == 1
        assert "error [report]" in capsys.readouterr().err


class TestConfigHandling:
    def test_set_overrides_nested_values(self):
        cfg = cli.load_config(None, ["refine.k=25", "data.synth.dim=64", "out=x"])
        assert cfg["refine"]["k"] == 25
        assert cfg["data"]["synth"]["dim"] == 64
        assert cfg["out"] == "x"

    def test_config_file_merges(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"refine": {"k": 7}, "threads": 3}))
        cfg = cli.load_config(str(p), [])
        assert cfg["refine"]["k"] == 7
        assert cfg["threads"] == 3
        assert cfg["ivf"]["nlist"] == cli.DEFAULT_CONFIG["ivf"]["nlist"]

    def test_resolve_fills_m(self):
        cfg = cli.load_config(None, ["data.synth.dim=64", "pq.m=null"])
        resolved = cli.resolve_config(cfg)
        assert resolved["pq"]["m"] == 16

    def test_hash_changes_with_config(self):
        a = cli.resolve_config(cli.load_config(None, []))
        b = cli.resolve_config(cli.load_config(None, ["refine.k=11"]))
        assert cli.config_hash(a) != cli.config_hash(b)

    def test_validate_report_rejects_bad_schema(self):
        with pytest.raises(ValueError):
            cli.validate_report({"schema_version": 99})
