"""Command line harness: profiling, benchmarking, ablations, divergence
checks, and norm statistics. Everything emits CSV or JSON for external
plotting; nothing is rendered in-process.

Exit codes: 0 success, 2 configuration error, 3 runtime invariant violation.
Worker parallelism for ablation sweeps is capped by the RNR_THREADS
environment variable (0 or unset = auto).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .core import make_rng
from .errors import ConfigError, InvariantError
from .klnn import kl_estimate
from .matching import METRICS, partition_3d, pairwise_best_match
from .pipeline import PipelineConfig, RunReport, run_pipeline
from .rnr import build_plan
from .schedule import ScheduleConfig, SimilarityProfile

SCHEMA_VERSION = 1

#: stride grid swept by the partition ablation
STRIDE_GRID = [(1, 2, 2), (2, 2, 2), (3, 2, 2), (4, 2, 2), (2, 3, 3), (2, 4, 4)]
CACHE_STEP_GRID = [1, 2, 3, 4, 5, 6]
ABLATE_DIMENSIONS = ("metric", "reduce_op", "cache_step", "stride", "feature")


def _worker_count() -> int:
    raw = os.environ.get("RNR_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"RNR_THREADS must be an integer, got {raw!r}")
    if value < 0:
        raise ConfigError("RNR_THREADS must be >= 0")
    return value if value > 0 else (os.cpu_count() or 1)


def _load_config(args) -> PipelineConfig:
    if args.config:
        try:
            cfg = PipelineConfig.from_file(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    else:
        cfg = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "mode", None) is not None:
        cfg = replace(cfg, rnr_mode=args.mode)
    return cfg


def _load_schedule(path) -> ScheduleConfig:
    try:
        return ScheduleConfig.from_file(path)
    except OSError as exc:
        raise ConfigError(f"cannot read schedule {path}: {exc}") from exc


def _config_id(cfg: PipelineConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:12]


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _timed_runs(cfg: PipelineConfig, profile, repeat: int, warmup: int
                ) -> tuple[RunReport, list[float]]:
    """Run `warmup` unrecorded passes, then `repeat` timed ones.

    All passes must agree on the output checksum; wall times are the only
    nondeterministic quantity.
    """
    if repeat < 1:
        raise ConfigError("--repeat must be >= 1")
    for _ in range(warmup):
        run_pipeline(cfg, profile)
    walls = []
    checksums = set()
    report = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        report = run_pipeline(cfg, profile)
        walls.append(time.perf_counter() - t0)
        checksums.add(report.checksum)
    if len(checksums) != 1:
        raise InvariantError("checksum drifted between repeated runs")
    return report, walls


def cmd_profile(args) -> int:
    cfg = _load_config(args)
    cfg = replace(cfg, profiling=True)
    if cfg.schedule is None and args.schedule:
        cfg = replace(cfg, schedule=_load_schedule(args.schedule))
    report = run_pipeline(cfg)
    report.profile.to_file(args.out)
    print(f"wrote {len(report.profile.records)} profile records to {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    schedule = _load_schedule(args.schedule) if args.schedule else ScheduleConfig.identity()
    mode = args.mode or "asym"
    if args.profile:
        profile = SimilarityProfile.from_file(args.profile)
    elif schedule.is_identity:
        profile = None
    else:
        print("no profile supplied; recording one with a profiling pre-run")
        pre = replace(cfg, profiling=True, rnr_mode="none",
                      schedule=schedule, collect_norms=False)
        profile = run_pipeline(pre).profile

    base_cfg = replace(cfg, rnr_mode="none", schedule=None)
    base_report, base_walls = _timed_runs(base_cfg, None, args.repeat, args.warmup)
    sched_cfg = replace(cfg, rnr_mode=mode, schedule=schedule)
    sched_report, sched_walls = _timed_runs(sched_cfg, profile, args.repeat, args.warmup)

    base_ms = statistics.median(base_walls) * 1e3
    sched_ms = statistics.median(sched_walls) * 1e3
    deviation = float(np.abs(sched_report.final_tokens - base_report.final_tokens).max())

    header = ["schema_version", "config_id", "rnr_mode", "schedule_hash",
              "total_macs", "total_flops", "wall_ms", "wall_ms_min",
              "wall_ms_max", "speedup", "checksum", "max_row_deviation"]
    rows = [
        [SCHEMA_VERSION, _config_id(base_cfg), "none", "-",
         base_report.total_macs, base_report.total_flops,
         f"{base_ms:.3f}", f"{min(base_walls)*1e3:.3f}", f"{max(base_walls)*1e3:.3f}",
         "1.000", base_report.checksum[:16], "0"],
        [SCHEMA_VERSION, _config_id(sched_cfg), mode, schedule.digest(),
         sched_report.total_macs, sched_report.total_flops,
         f"{sched_ms:.3f}", f"{min(sched_walls)*1e3:.3f}", f"{max(sched_walls)*1e3:.3f}",
         f"{base_ms / sched_ms:.3f}", sched_report.checksum[:16],
         f"{deviation:.6e}"],
    ]
    _write_csv(args.out, header, rows)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(sched_report.to_json() + "\n")
    print(f"baseline {base_ms:.1f} ms, scheduled {sched_ms:.1f} ms, "
          f"speedup {base_ms / sched_ms:.2f}x -> {args.out}")
    return 0


def _ablation_schedule(features: tuple[str, ...], rate: float, cache_step: int,
                       stride, metric: str) -> ScheduleConfig:
    rules = {f: [(0.0, rate)] for f in features}
    return ScheduleConfig(rules=rules, cache_step=cache_step, stride=stride,
                          metric=metric)


_KL_SCORE_CAP = 2048


def _kl_score_for(cfg: PipelineConfig, stride, metric: str, rate: float) -> float:
    """Diagnostic divergence of a one-shot reduction of the initial tokens.

    On large grids both sample sets are thinned by a deterministic stride to
    keep the brute-force neighbor search bounded; the score is comparative
    across sweep points, not a calibrated divergence.
    """
    from .core import TokenGrid
    from .pipeline import inject_duplicates, _streams

    rng_init, _, rng_parts, rng_dup, rng_match = _streams(cfg.seed)
    grid = TokenGrid.random(cfg.grid_shape, cfg.feature_dim, rng_init)
    if cfg.duplicate_fraction > 0.0:
        grid = inject_duplicates(grid, cfg.duplicate_fraction, rng_dup)
    part = partition_3d(cfg.grid_shape, stride, rng_parts)
    match = pairwise_best_match(grid.tokens, part, metric, rng_match)
    plan = build_plan(match, part, rate)
    kept = grid.tokens[plan.kept]
    original = grid.tokens
    if len(kept) > _KL_SCORE_CAP:
        kept = kept[::math.ceil(len(kept) / _KL_SCORE_CAP)]
    if len(original) > 2 * _KL_SCORE_CAP:
        original = original[::math.ceil(len(original) / (2 * _KL_SCORE_CAP))]
    return kl_estimate(kept, original, k=1).value


def cmd_ablate(args) -> int:
    if args.dimension not in ABLATE_DIMENSIONS:
        raise ConfigError(f"unknown ablation dimension {args.dimension!r}; "
                          f"expected one of {ABLATE_DIMENSIONS}")
    cfg = _load_config(args)
    rate = args.rate
    base_report = run_pipeline(replace(cfg, rnr_mode="none", schedule=None))

    points: list[tuple[str, ScheduleConfig, PipelineConfig]] = []
    if args.dimension == "metric":
        for metric in METRICS:
            sched = _ablation_schedule(("V",), rate, 5, (2, 2, 2), metric)
            points.append((metric, sched, replace(cfg, rnr_mode="asym", schedule=sched)))
    elif args.dimension == "reduce_op":
        for op in ("discard", "mean"):
            sched = _ablation_schedule(("V",), rate, 5, (2, 2, 2), "neg_euclidean")
            points.append((op, sched, replace(cfg, rnr_mode="asym", schedule=sched,
                                              reduce_op=op)))
    elif args.dimension == "cache_step":
        for s in CACHE_STEP_GRID:
            sched = _ablation_schedule(("V",), rate, s, (2, 2, 2), "neg_euclidean")
            points.append((str(s), sched, replace(cfg, rnr_mode="asym", schedule=sched)))
    elif args.dimension == "stride":
        for stride in STRIDE_GRID:
            sched = _ablation_schedule(("V",), rate, 5, stride, "neg_euclidean")
            points.append(("x".join(map(str, stride)), sched,
                           replace(cfg, rnr_mode="asym", schedule=sched)))
    else:  # feature
        for label, feats in (("Q", ("Q",)), ("V", ("V",)), ("Q+V", ("Q", "V"))):
            sched = _ablation_schedule(feats, rate, 5, (2, 2, 2), "neg_euclidean")
            points.append((label, sched, replace(cfg, rnr_mode="asym", schedule=sched)))

    def run_point(item):
        label, sched, point_cfg = item
        t0 = time.perf_counter()
        report = run_pipeline(point_cfg)
        wall_ms = (time.perf_counter() - t0) * 1e3
        kl = _kl_score_for(point_cfg, sched.stride, sched.metric, rate)
        deviation = float(np.abs(report.final_tokens - base_report.final_tokens).max())
        bsm_counts = {}
        for rec in report.records:
            for feature in rec.recomputed:
                key = (feature, rec.b)
                bsm_counts[key] = bsm_counts.get(key, 0) + 1
        bsm_per_fb = max(bsm_counts.values()) if bsm_counts else 0
        ratio = 100.0 * _dst_ratio(point_cfg.grid_shape, sched.stride)
        return [SCHEMA_VERSION, args.dimension, label, report.total_macs,
                f"{wall_ms:.3f}", f"{kl:.6f}", f"{deviation:.6e}",
                bsm_per_fb, f"{ratio:.2f}"]

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_point, points))
    else:
        rows = [run_point(p) for p in points]

    header = ["schema_version", "dimension", "value", "total_macs", "wall_ms",
              "kl_score", "max_row_deviation", "bsm_per_feature_block",
              "dst_ratio_pct"]
    _write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


def _dst_ratio(grid_shape, stride) -> float:
    t, h, w = grid_shape
    s_t, s_h, s_w = stride
    n_dst = (t // s_t) * (h // s_h) * (w // s_w)
    return n_dst / (t * h * w)


def cmd_klcheck(args) -> int:
    d = args.dim
    mu = np.zeros(d)
    mu[0] = 1.0
    closed_shift = 0.5

    ests = []
    for seed in range(args.seeds):
        rng = make_rng(args.seed_base + seed)
        original = rng.standard_normal((args.samples, d))
        reduced = rng.standard_normal((args.samples, d)) + mu
        ests.append(kl_estimate(reduced, original, k=1).value)
    shift_mean = float(np.mean(ests))

    sigma2 = np.linspace(0.5, 1.5, d)
    closed_diag = 0.5 * float(sigma2.sum() - d - np.log(sigma2).sum())
    diag_ests = []
    for seed in range(args.seeds):
        rng = make_rng(args.seed_base + 1000 + seed)
        original = rng.standard_normal((args.samples, d))
        reduced = rng.standard_normal((args.samples, d)) * np.sqrt(sigma2)
        diag_ests.append(kl_estimate(reduced, original, k=1).value)
    diag_mean = float(np.mean(diag_ests))

    sweep_sizes = [500, 1000, 2000, 4000]
    sweep_errs = {l: [] for l in sweep_sizes}
    for seed in range(args.sweep_seeds):
        rng = make_rng(args.seed_base + 2000 + seed)
        orig_full = rng.standard_normal((max(sweep_sizes), d))
        red_full = rng.standard_normal((max(sweep_sizes), d)) + mu
        for l in sweep_sizes:
            est = kl_estimate(red_full[:l], orig_full[:l], k=1).value
            sweep_errs[l].append(abs(est - closed_shift))
    sweep = {str(l): float(np.mean(v)) for l, v in sweep_errs.items()}

    report = {
        "schema_version": SCHEMA_VERSION,
        "dim": d, "samples": args.samples, "seeds": args.seeds,
        "mean_shift": {"closed_form": closed_shift, "estimate_mean": shift_mean,
                       "abs_error": abs(shift_mean - closed_shift)},
        "diagonal": {"closed_form": closed_diag, "estimate_mean": diag_mean,
                     "abs_error": abs(diag_mean - closed_diag)},
        "bias_sweep_mean_abs_error": sweep,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(f"mean-shift: estimate {shift_mean:.4f} vs closed form {closed_shift}")
    print(f"diagonal:   estimate {diag_mean:.4f} vs closed form {closed_diag:.4f}")
    print("bias sweep (mean |error|):")
    for l in sweep_sizes:
        print(f"  l={l:>5}: {sweep[str(l)]:.4f}")
    return 0


def cmd_normstats(args) -> int:
    cfg = _load_config(args)
    cfg = replace(cfg, collect_norms=True, rnr_mode="none", schedule=None)
    report = run_pipeline(cfg)
    steps = None
    if args.steps:
        try:
            steps = {int(s) for s in args.steps.split(",")}
        except ValueError as exc:
            raise ConfigError(f"--steps must be comma-separated ints: {exc}") from exc
    rows = []
    for rec in report.norm_records:
        if steps is not None and rec["t"] not in steps:
            continue
        rows.append([SCHEMA_VERSION, rec["feature"], rec["t"], rec["b"],
                     f"{rec['p5']:.6f}", f"{rec['p50']:.6f}",
                     f"{rec['p95']:.6f}", f"{rec['p99']:.6f}"])
    header = ["schema_version", "feature", "t", "b", "p5", "p50", "p95", "p99"]
    _write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} norm rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenrnr",
        description="Benchmark harness for token reduction-and-restoration attention")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, schedule=False):
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if schedule:
            p.add_argument("--schedule", help="schedule JSON")
            p.add_argument("--mode", choices=("none", "sym", "asym"), default=None)

    p = sub.add_parser("profile", help="record a similarity profile")
    common(p, schedule=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="baseline vs scheduled wall-clock comparison")
    common(p, schedule=True)
    p.add_argument("--profile", help="similarity profile JSON (else pre-run records one)")
    p.add_argument("--repeat", type=int, default=5, help="timed runs per variant")
    p.add_argument("--warmup", type=int, default=1, help="untimed warmup runs")
    p.add_argument("--report", help="also write the scheduled run's report JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="sweep one design dimension")
    common(p)
    p.add_argument("--dimension", required=True, choices=ABLATE_DIMENSIONS)
    p.add_argument("--rate", type=float, default=0.3, help="reduction rate for sweeps")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("klcheck", help="divergence estimator vs Gaussian closed forms")
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--sweep-seeds", type=int, default=20, dest="sweep_seeds")
    p.add_argument("--seed-base", type=int, default=1000, dest="seed_base")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_klcheck)

    p = sub.add_parser("normstats", help="row-norm percentiles per feature/step/block")
    common(p)
    p.add_argument("--steps", help="comma-separated timestep filter")
    p.set_defaults(func=cmd_normstats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
