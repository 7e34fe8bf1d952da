"""Synthetic multi-block transformer denoising pipeline over 3D token grids.

The model is deliberately untrained: projection weights are drawn once from
the seed, each block adds its attention output to a residual stream, and each
denoising step applies the contraction x <- x - 0.1 * block_stack(x). That is
enough structure to exercise scheduling, caching, and reduction across blocks
and timesteps with fully deterministic, checksummable outputs.

Multiply-adds are instrumented where the work happens (projection, attention,
matching call sites) and independently predicted from the cost model over the
recorded rates; the two totals must agree exactly and a run fails its report
invariant otherwise.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import flops
from .core import (Matrix, TokenGrid, checksum_matrix, rope3d_tables,
                   apply_rope_tables)
from .errors import ConfigError, InvariantError
from .matching import DEFAULT_METRIC, partition_3d, pairwise_best_match
from .rnr import REDUCE_OPS, attn_plain, build_plan, reduce_tokens, restore_tokens
from .schedule import (MatchingCache, PROFILE_FEATURES, ScheduleConfig,
                       SimilarityProfile, cached_match, lookup_rate,
                       record_profile)

RNR_MODES = ("none", "sym", "asym")

#: residual blend factor of the denoising recurrence; any contraction works,
#: 0.1 keeps the state bounded so similarity statistics settle
BLEND = 0.1


@dataclass
class PipelineConfig:
    grid_shape: tuple[int, int, int] = (8, 16, 16)
    feature_dim: int = 64
    num_blocks: int = 8
    num_heads: int = 4
    num_timesteps: int = 30
    seed: int = 0
    rnr_mode: str = "none"
    schedule: ScheduleConfig | None = None
    profiling: bool = False
    rope: bool = True
    reduce_op: str = "discard"
    attn_scale: bool = True
    duplicate_fraction: float = 0.0
    redraw_partition_each_step: bool = False
    match_pre_rope: bool = False
    collect_norms: bool = False

    def __post_init__(self):
        self.grid_shape = tuple(int(x) for x in self.grid_shape)
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 1:
            raise ConfigError(f"grid_shape must be three positive ints, got {self.grid_shape}")
        if min(self.feature_dim, self.num_blocks, self.num_heads, self.num_timesteps) < 1:
            raise ConfigError("all size fields must be >= 1")
        if self.feature_dim % self.num_heads != 0:
            raise ConfigError(
                f"feature_dim {self.feature_dim} not divisible by num_heads {self.num_heads}")
        if self.rnr_mode not in RNR_MODES:
            raise ConfigError(f"rnr_mode must be one of {RNR_MODES}, got {self.rnr_mode!r}")
        if self.reduce_op not in REDUCE_OPS:
            raise ConfigError(f"reduce_op must be one of {REDUCE_OPS}")
        if not (0.0 <= self.duplicate_fraction < 1.0):
            raise ConfigError("duplicate_fraction must lie in [0, 1)")

    @property
    def n_tokens(self) -> int:
        t, h, w = self.grid_shape
        return t * h * w

    def to_json(self) -> str:
        payload = {
            "schema_version": 1,
            "grid_shape": list(self.grid_shape),
            "feature_dim": self.feature_dim,
            "num_blocks": self.num_blocks,
            "num_heads": self.num_heads,
            "num_timesteps": self.num_timesteps,
            "seed": self.seed,
            "rnr_mode": self.rnr_mode,
            "profiling": self.profiling,
            "rope": self.rope,
            "reduce_op": self.reduce_op,
            "attn_scale": self.attn_scale,
            "duplicate_fraction": self.duplicate_fraction,
            "redraw_partition_each_step": self.redraw_partition_each_step,
            "match_pre_rope": self.match_pre_rope,
            "collect_norms": self.collect_norms,
        }
        if self.schedule is not None:
            payload["schedule"] = json.loads(self.schedule.to_json())
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "PipelineConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config JSON must be an object")
        payload.pop("schema_version", None)
        schedule = payload.pop("schedule", None)
        known = {f.name for f in PipelineConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = PipelineConfig(**payload)
        if schedule is not None:
            cfg.schedule = ScheduleConfig.from_json(json.dumps(schedule))
        return cfg

    @staticmethod
    def from_file(path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return PipelineConfig.from_json(fh.read())


@dataclass(frozen=True)
class BlockRecord:
    """Per (timestep, block) accounting."""

    t: int
    b: int
    wall_s: float
    rates: dict
    m_q: int
    m_kv: int
    recomputed: tuple[str, ...]
    macs: int


@dataclass
class RunReport:
    checksum: str
    records: list[BlockRecord]
    measured: flops.CostBreakdown
    predicted: flops.CostBreakdown
    total_wall_s: float
    profile: SimilarityProfile | None = None
    norm_records: list[dict] = field(default_factory=list)
    final_tokens: Matrix | None = None  # kept in memory only, never serialized

    @property
    def total_macs(self) -> int:
        return self.measured.total

    @property
    def total_flops(self) -> int:
        return flops.macs_to_flops(self.measured.total)

    def to_json(self) -> str:
        payload = {
            "schema_version": 1,
            "checksum": self.checksum,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "total_wall_s": self.total_wall_s,
            "measured": self.measured.as_dict(),
            "predicted": self.predicted.as_dict(),
            "records": [
                {"t": r.t, "b": r.b, "wall_s": r.wall_s, "rates": r.rates,
                 "m_q": r.m_q, "m_kv": r.m_kv,
                 "recomputed": list(r.recomputed), "macs": r.macs}
                for r in self.records
            ],
        }
        if self.norm_records:
            payload["norm_records"] = self.norm_records
        return json.dumps(payload, indent=2)


def inject_duplicates(grid: TokenGrid, fraction: float,
                      rng: np.random.Generator) -> TokenGrid:
    """Overwrite a fraction of tokens with copies of surviving other tokens.

    Copy sources are drawn from the non-overwritten tokens only, so each
    overwritten token is guaranteed an exact duplicate in the result.
    """
    if not (0.0 <= fraction < 1.0):
        raise ConfigError(f"fraction must lie in [0, 1), got {fraction}")
    n = grid.n_tokens
    k = int(fraction * n)
    if k == 0:
        return grid
    targets = rng.choice(n, size=k, replace=False)
    mask = np.ones(n, dtype=bool)
    mask[targets] = False
    survivors = np.nonzero(mask)[0]
    sources = survivors[rng.integers(0, len(survivors), size=k)]
    tokens = grid.tokens.copy()
    tokens[targets] = tokens[sources]
    return TokenGrid(grid.t_dim, grid.h_dim, grid.w_dim, tokens)


def row_norm_percentiles(mat: Matrix) -> dict:
    norms = np.linalg.norm(mat, axis=1)
    p5, p50, p95, p99 = np.percentile(norms, [5, 50, 95, 99])
    return {"p5": float(p5), "p50": float(p50), "p95": float(p95), "p99": float(p99)}


def _head_attention(q, k, v, num_heads, scale, counter):
    if num_heads == 1:
        return attn_plain(q, k, v, scale=scale, counter=counter)
    d_h = q.shape[1] // num_heads
    outs = [attn_plain(q[:, i * d_h:(i + 1) * d_h],
                       k[:, i * d_h:(i + 1) * d_h],
                       v[:, i * d_h:(i + 1) * d_h],
                       scale=scale, counter=counter)
            for i in range(num_heads)]
    return np.concatenate(outs, axis=1)


def _matching_macs_for(part, d, metric) -> int:
    # the random baseline does no arithmetic on the tokens
    if metric == "random":
        return 0
    return flops.matching_macs(part.n_src, part.n_dst, d)


def _profile_stats(match) -> tuple[float, float, float]:
    sims = match.best_sim
    return (float(sims.mean()),
            float(np.percentile(sims, 10)),
            float(np.percentile(sims, 90)))


def run_pipeline(cfg: PipelineConfig,
                 profile: SimilarityProfile | None = None) -> RunReport:
    """Run the denoising loop and return deterministic accounting.

    A scheduled run needs a similarity profile to threshold against. If none
    is supplied, a profiling pre-pass with the same configuration (reduction
    off) records one first; its cost is not part of the reported wall time.
    """
    schedule = cfg.schedule
    stride = schedule.stride if schedule else (2, 2, 2)
    metric = schedule.metric if schedule else DEFAULT_METRIC
    scheduled = (cfg.rnr_mode != "none" and schedule is not None
                 and not schedule.is_identity)
    if cfg.rope:
        if cfg.feature_dim % 2 != 0 or cfg.feature_dim < 6:
            raise ConfigError("rotary embedding needs an even feature_dim >= 6")
    if scheduled and cfg.rnr_mode == "sym" and "V" in schedule.rules:
        warnings.warn("symmetric mode reduces the shared input; the V entry "
                      "is ignored (the Q entry drives the reduction)")
    if cfg.profiling and scheduled and cfg.rnr_mode == "sym":
        raise ConfigError("profiling needs the full feature set; run it with "
                          "reduction off or in asymmetric mode")
    if (scheduled and cfg.redraw_partition_each_step
            and schedule.cache_step > 1):
        raise ConfigError("cached match results index a fixed partition; "
                          "per-step partition redraws need cache_step=1")

    if scheduled and profile is None:
        pre = replace(cfg, profiling=True, rnr_mode="none", collect_norms=False)
        profile = run_pipeline(pre).profile
    if scheduled:
        assert profile is not None
        if (profile.num_timesteps != cfg.num_timesteps
                or profile.num_blocks != cfg.num_blocks):
            raise ConfigError(
                f"profile lattice ({profile.num_timesteps} steps x "
                f"{profile.num_blocks} blocks) does not match the run "
                f"({cfg.num_timesteps} x {cfg.num_blocks})")
        needed = {"H"} if cfg.rnr_mode == "sym" else set(schedule.rules)
        missing = needed - set(profile.features)
        if missing:
            raise ConfigError(f"profile lacks features {sorted(missing)}")

    n = cfg.n_tokens
    d = cfg.feature_dim
    rng_init, rng_weights, rng_parts, rng_dup, rng_match = _streams(cfg.seed)

    grid = TokenGrid.random(cfg.grid_shape, d, rng_init)
    if cfg.duplicate_fraction > 0.0:
        grid = inject_duplicates(grid, cfg.duplicate_fraction, rng_dup)
    x = grid.tokens.copy()

    weights = [(rng_weights.standard_normal((d, d)) / np.sqrt(d),
                rng_weights.standard_normal((d, d)) / np.sqrt(d),
                rng_weights.standard_normal((d, d)) / np.sqrt(d))
               for _ in range(cfg.num_blocks)]
    rope_tabs = rope3d_tables(cfg.grid_shape, d) if cfg.rope else None

    need_parts = scheduled or cfg.profiling
    parts = None
    if need_parts and not cfg.redraw_partition_each_step:
        parts = [partition_3d(cfg.grid_shape, stride, rng_parts)
                 for _ in range(cfg.num_blocks)]

    cache = MatchingCache(cache_step=schedule.cache_step if schedule else 1)
    measured = flops.CostBreakdown()
    predicted = flops.CostBreakdown()
    records: list[BlockRecord] = []
    norm_records: list[dict] = []
    profile_entries: list[tuple] = []

    loop_start = time.perf_counter()
    for t in range(cfg.num_timesteps):
        y = x
        for b in range(cfg.num_blocks):
            t0 = time.perf_counter()
            macs_before = measured.total
            part = None
            if need_parts:
                part = (partition_3d(cfg.grid_shape, stride, rng_parts)
                        if cfg.redraw_partition_each_step else parts[b])

            w_q, w_k, w_v = weights[b]
            rates: dict = {}
            recomputed: list[str] = []
            m_q = m_kv = n

            if cfg.rnr_mode == "sym" and scheduled:
                rate = lookup_rate(schedule, profile, "Q", t, b) \
                    if "Q" in schedule.rules else 0.0
                rates["H"] = rate
                match, fresh = cached_match(cache, "H", b, t, y, part, metric, rng_match)
                if fresh:
                    recomputed.append("H")
                    cost = _matching_macs_for(part, d, metric)
                    measured.add(flops.CostBreakdown(matching=cost))
                    predicted.add(flops.CostBreakdown(matching=cost))
                plan = build_plan(match, part, rate) if rate > 0.0 else None
                m_q = m_kv = plan.m if plan else n
                if plan is not None:
                    h_red = reduce_tokens(y, plan, cfg.reduce_op)
                else:
                    h_red = y
                measured.add(flops.CostBreakdown(projections=3 * m_q * d * d))
                q = h_red @ w_q
                k = h_red @ w_k
                v = h_red @ w_v
                if rope_tabs is not None:
                    cos, sin = rope_tabs
                    sel = plan.kept if plan is not None else slice(None)
                    q = apply_rope_tables(q, cos[sel], sin[sel])
                    k = apply_rope_tables(k, cos[sel], sin[sel])
                out = _head_attention(q, k, v, cfg.num_heads, cfg.attn_scale, measured)
                if plan is not None:
                    out = restore_tokens(out, plan)
                predicted.add(flops.cost_sym(n, d, m_q, cfg.num_heads))
            else:
                measured.add(flops.CostBreakdown(projections=3 * n * d * d))
                q = y @ w_q
                k = y @ w_k
                v = y @ w_v
                q_pre, k_pre = q, k
                if rope_tabs is not None:
                    cos, sin = rope_tabs
                    q = apply_rope_tables(q, cos, sin)
                    k = apply_rope_tables(k, cos, sin)

                if cfg.profiling:
                    for feature, toks in (("H", y),
                                          ("Q", q_pre if cfg.match_pre_rope else q),
                                          ("K", k_pre if cfg.match_pre_rope else k),
                                          ("V", v)):
                        match = pairwise_best_match(toks, part, metric, rng_match)
                        cost = _matching_macs_for(part, d, metric)
                        measured.add(flops.CostBreakdown(matching=cost))
                        predicted.add(flops.CostBreakdown(matching=cost))
                        mean, p10, p90 = _profile_stats(match)
                        profile_entries.append((feature, t, b, mean, p10, p90))

                if cfg.collect_norms:
                    for feature, mat in (("H", y), ("V", v)):
                        norm_records.append({"feature": feature, "t": t, "b": b,
                                             **row_norm_percentiles(mat)})

                plan_q = plan_kv = None
                if cfg.rnr_mode == "asym" and scheduled:
                    for feature in ("Q", "V"):
                        if feature not in schedule.rules:
                            continue
                        rate = lookup_rate(schedule, profile, feature, t, b)
                        rates[feature] = rate
                        toks = v if feature == "V" else \
                            (q_pre if cfg.match_pre_rope else q)
                        match, fresh = cached_match(cache, feature, b, t, toks,
                                                    part, metric, rng_match)
                        if fresh:
                            recomputed.append(feature)
                            cost = _matching_macs_for(part, d, metric)
                            measured.add(flops.CostBreakdown(matching=cost))
                            predicted.add(flops.CostBreakdown(matching=cost))
                        if rate > 0.0:
                            plan = build_plan(match, part, rate)
                            if feature == "Q":
                                plan_q = plan
                            else:
                                plan_kv = plan
                m_q = plan_q.m if plan_q else n
                m_kv = plan_kv.m if plan_kv else n
                if plan_q is not None:
                    q = reduce_tokens(q, plan_q, cfg.reduce_op)
                if plan_kv is not None:
                    k = reduce_tokens(k, plan_kv, cfg.reduce_op)
                    v = reduce_tokens(v, plan_kv, cfg.reduce_op)
                out = _head_attention(q, k, v, cfg.num_heads, cfg.attn_scale, measured)
                if plan_q is not None:
                    out = restore_tokens(out, plan_q)
                predicted.add(flops.cost_asym(n, d, m_q, m_kv, False,
                                              0.0, cfg.num_heads))

            if out.shape[0] != n:
                raise InvariantError(
                    f"block output has {out.shape[0]} rows, expected {n}")
            y = y + out
            records.append(BlockRecord(
                t=t, b=b, wall_s=time.perf_counter() - t0, rates=rates,
                m_q=m_q, m_kv=m_kv, recomputed=tuple(recomputed),
                macs=measured.total - macs_before))
        x = x - BLEND * y
        if not np.isfinite(x).all():
            raise InvariantError(f"non-finite state after step {t}")
    total_wall = time.perf_counter() - loop_start

    if measured.total != predicted.total or measured.as_dict() != predicted.as_dict():
        raise InvariantError(
            f"instrumented MACs {measured.as_dict()} diverge from the cost-model "
            f"prediction {predicted.as_dict()}")

    run_profile = None
    if cfg.profiling:
        run_profile = record_profile(
            profile_entries, num_timesteps=cfg.num_timesteps,
            num_blocks=cfg.num_blocks, grid_shape=cfg.grid_shape,
            stride=stride, metric=metric, features=PROFILE_FEATURES)

    return RunReport(checksum=checksum_matrix(x), records=records,
                     measured=measured, predicted=predicted,
                     total_wall_s=total_wall, profile=run_profile,
                     norm_records=norm_records, final_tokens=x)


def _streams(seed: int):
    root = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(child)) for child in root.spawn(5)]
