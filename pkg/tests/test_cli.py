import csv
import json

import numpy as np
import pytest

from tokenrnr.cli import main
from tokenrnr.schedule import SimilarityProfile


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "grid_shape": [2, 4, 4], "feature_dim": 8, "num_blocks": 2,
        "num_heads": 2, "num_timesteps": 4, "seed": 7}))
    return str(path)


@pytest.fixture
def schedule_path(tmp_path):
    path = tmp_path / "sched.json"
    path.write_text(json.dumps({
        "Q": {"0.0": 0.8}, "V": {"0.0": 0.5},
        "cache_step": 2, "stride": [2, 2, 2], "metric": "neg_euclidean"}))
    return str(path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestProfileCommand:
    def test_record_count_and_rerun_identity(self, cfg_path, tmp_path):
        out1 = tmp_path / "p1.json"
        out2 = tmp_path / "p2.json"
        assert main(["profile", "--config", cfg_path, "--out", str(out1)]) == 0
        assert main(["profile", "--config", cfg_path, "--out", str(out2)]) == 0
        profile = SimilarityProfile.from_file(out1)
        assert len(profile.records) == 4 * 2 * 4
        assert out1.read_bytes() == out2.read_bytes()

    def test_duplicates_raise_raw_similarity(self, tmp_path):
        means = {}
        for frac in (0.0, 0.6):
            cfg = tmp_path / f"c{frac}.json"
            cfg.write_text(json.dumps({
                "grid_shape": [2, 4, 4], "feature_dim": 8, "num_blocks": 1,
                "num_heads": 1, "num_timesteps": 2, "seed": 3,
                "duplicate_fraction": frac}))
            out = tmp_path / f"p{frac}.json"
            main(["profile", "--config", str(cfg), "--out", str(out)])
            prof = SimilarityProfile.from_file(out)
            means[frac] = np.mean([r.sim_raw for r in prof.records
                                   if r.feature == "H"])
        assert means[0.6] > means[0.0]

    def test_bad_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["profile", "--config", str(bad),
                     "--out", str(tmp_path / "x.json")]) == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["profile", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "x.json")]) == 2

    def test_invariant_violation_exits_3(self, cfg_path, tmp_path, monkeypatch):
        from tokenrnr.errors import InvariantError
        import tokenrnr.cli as cli_mod

        def boom(cfg, profile=None):
            raise InvariantError("synthetic violation")

        monkeypatch.setattr(cli_mod, "run_pipeline", boom)
        assert main(["profile", "--config", cfg_path,
                     "--out", str(tmp_path / "x.json")]) == 3


class TestBenchCommand:
    def test_empty_schedule_is_exact_noop(self, cfg_path, tmp_path):
        out = tmp_path / "bench.csv"
        rc = main(["bench", "--config", cfg_path, "--out", str(out),
                   "--repeat", "2", "--warmup", "0"])
        assert rc == 0
        rows = read_csv(out)
        assert len(rows) == 2
        base, sched = rows
        assert base["rnr_mode"] == "none"
        assert sched["max_row_deviation"] == "0.000000e+00"
        assert base["checksum"] == sched["checksum"]
        assert float(sched["speedup"]) > 0

    def test_scheduled_bench_reduces_macs(self, cfg_path, schedule_path, tmp_path):
        out = tmp_path / "bench.csv"
        rc = main(["bench", "--config", cfg_path, "--schedule", schedule_path,
                   "--out", str(out), "--repeat", "1", "--warmup", "0"])
        assert rc == 0
        base, sched = read_csv(out)
        assert int(sched["total_macs"]) < int(base["total_macs"])
        assert sched["schedule_hash"] != "-"
        assert float(sched["max_row_deviation"]) > 0

    def test_supplied_profile_is_used(self, cfg_path, schedule_path, tmp_path):
        prof_path = tmp_path / "prof.json"
        main(["profile", "--config", cfg_path, "--out", str(prof_path)])
        out = tmp_path / "bench.csv"
        report_path = tmp_path / "report.json"
        rc = main(["bench", "--config", cfg_path, "--schedule", schedule_path,
                   "--profile", str(prof_path), "--out", str(out),
                   "--report", str(report_path),
                   "--repeat", "1", "--warmup", "0"])
        assert rc == 0
        report = json.loads(report_path.read_text())
        assert report["schema_version"] == 1
        assert report["measured"] == report["predicted"]
        assert len(report["records"]) == 4 * 2

    def test_lattice_mismatch_exits_2(self, cfg_path, schedule_path, tmp_path):
        other_cfg = tmp_path / "other.json"
        other_cfg.write_text(json.dumps({
            "grid_shape": [2, 4, 4], "feature_dim": 8, "num_blocks": 2,
            "num_heads": 2, "num_timesteps": 3, "seed": 7}))
        prof_path = tmp_path / "prof.json"
        main(["profile", "--config", str(other_cfg), "--out", str(prof_path)])
        rc = main(["bench", "--config", cfg_path, "--schedule", schedule_path,
                   "--profile", str(prof_path),
                   "--out", str(tmp_path / "b.csv"),
                   "--repeat", "1", "--warmup", "0"])
        assert rc == 2


class TestAblateCommand:
    def test_metric_sweep_mechanics(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "grid_shape": [4, 8, 8], "feature_dim": 8, "num_blocks": 1,
            "num_heads": 1, "num_timesteps": 2, "seed": 5,
            "duplicate_fraction": 0.5}))
        out = tmp_path / "metric.csv"
        assert main(["ablate", "--dimension", "metric", "--config", str(cfg),
                     "--out", str(out)]) == 0
        rows = read_csv(out)
        assert [r["value"] for r in rows] == ["neg_euclidean", "cosine", "dot",
                                              "random"]
        macs = {r["value"]: int(r["total_macs"]) for r in rows}
        # the random baseline does no arithmetic during matching
        assert macs["random"] < macs["neg_euclidean"]
        assert all(np.isfinite(float(r["kl_score"])) for r in rows)

    def test_cache_step_sweep_invocation_counts(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "grid_shape": [2, 4, 4], "feature_dim": 8, "num_blocks": 2,
            "num_heads": 1, "num_timesteps": 6, "seed": 2}))
        out = tmp_path / "cache.csv"
        assert main(["ablate", "--dimension", "cache_step", "--config", str(cfg),
                     "--out", str(out)]) == 0
        rows = read_csv(out)
        got = {int(r["value"]): int(r["bsm_per_feature_block"]) for r in rows}
        assert got == {1: 6, 2: 3, 3: 2, 4: 2, 5: 2, 6: 1}

    def test_stride_sweep_reproduces_destination_ratios(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "grid_shape": [13, 30, 45], "feature_dim": 6, "num_blocks": 1,
            "num_heads": 1, "num_timesteps": 1, "seed": 3}))
        out = tmp_path / "stride.csv"
        assert main(["ablate", "--dimension", "stride", "--config", str(cfg),
                     "--out", str(out)]) == 0
        rows = read_csv(out)
        expected = {"1x2x2": 24.44, "2x2x2": 11.28, "3x2x2": 7.52,
                    "4x2x2": 5.64, "2x3x3": 5.13, "2x4x4": 2.63}
        for row in rows:
            assert abs(float(row["dst_ratio_pct"]) - expected[row["value"]]) <= 0.005

    def test_feature_and_reduce_op_sweeps(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "grid_shape": [2, 4, 4], "feature_dim": 8, "num_blocks": 1,
            "num_heads": 1, "num_timesteps": 2, "seed": 2}))
        out = tmp_path / "feat.csv"
        assert main(["ablate", "--dimension", "feature", "--config", str(cfg),
                     "--out", str(out)]) == 0
        rows = {r["value"]: int(r["total_macs"]) for r in read_csv(out)}
        assert rows["Q+V"] < rows["Q"]
        out2 = tmp_path / "op.csv"
        assert main(["ablate", "--dimension", "reduce_op", "--config", str(cfg),
                     "--out", str(out2)]) == 0
        assert [r["value"] for r in read_csv(out2)] == ["discard", "mean"]

    def test_unknown_dimension_exits_2(self, cfg_path, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["ablate", "--dimension", "learning_rate", "--config", cfg_path,
                  "--out", str(tmp_path / "x.csv")])
        assert err.value.code == 2

    def test_threaded_sweep_matches_sequential(self, tmp_path, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "grid_shape": [2, 4, 4], "feature_dim": 8, "num_blocks": 1,
            "num_heads": 1, "num_timesteps": 2, "seed": 2}))
        monkeypatch.setenv("RNR_THREADS", "1")
        seq = tmp_path / "seq.csv"
        main(["ablate", "--dimension", "cache_step", "--config", str(cfg),
              "--out", str(seq)])
        monkeypatch.setenv("RNR_THREADS", "3")
        par = tmp_path / "par.csv"
        main(["ablate", "--dimension", "cache_step", "--config", str(cfg),
              "--out", str(par)])
        strip_wall = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"}
                                   for r in rows]
        assert strip_wall(read_csv(seq)) == strip_wall(read_csv(par))


class TestKlcheckCommand:
    def test_small_scale_report(self, tmp_path):
        out = tmp_path / "kl.json"
        rc = main(["klcheck", "--dim", "3", "--samples", "400", "--seeds", "3",
                   "--sweep-seeds", "2", "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["mean_shift"]["closed_form"] == 0.5
        assert np.isfinite(report["mean_shift"]["estimate_mean"])
        assert set(report["bias_sweep_mean_abs_error"]) == {"500", "1000",
                                                            "2000", "4000"}


class TestNormstatsCommand:
    def test_schema_one_row_per_lattice_point(self, cfg_path, tmp_path):
        out = tmp_path / "norms.csv"
        assert main(["normstats", "--config", cfg_path, "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 4 * 2 * 2  # steps x blocks x {H, V}
        keys = {(r["feature"], r["t"], r["b"]) for r in rows}
        assert len(keys) == len(rows)
        assert all(float(r["p5"]) <= float(r["p50"]) <= float(r["p95"])
                   <= float(r["p99"]) for r in rows)

    def test_step_filter(self, cfg_path, tmp_path):
        out = tmp_path / "norms.csv"
        assert main(["normstats", "--config", cfg_path, "--steps", "0,2",
                     "--out", str(out)]) == 0
        rows = read_csv(out)
        assert {r["t"] for r in rows} == {"0", "2"}
