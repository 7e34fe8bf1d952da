"""Reduction scheduling: similarity profiles, threshold maps, matching cache,
and the iterative threshold/rate tuning heuristic.

A similarity profile records, for every (feature, timestep, block) lattice
point, the mean best-match similarity seen during a profiling run, then
standardizes per feature onto [0, 1]. A schedule maps each feature to an
ordered threshold -> rate table; at run time the rate of the largest
threshold <= the profiled similarity applies (0, i.e. identity, below all
thresholds). K always follows V's entry, so schedules only ever carry Q and V.

The matching cache reuses a block's match result across denoising steps,
recomputing when the step index hits a multiple of the cache step.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .matching import DEFAULT_METRIC, METRICS, MatchResult, Partition, \
    pairwise_best_match, standardize_profile

SCHEMA_VERSION = 1

PROFILE_FEATURES = ("H", "Q", "K", "V")
SCHEDULABLE_FEATURES = ("Q", "V")


def _as_rule_list(mapping) -> list[tuple[float, float]]:
    pairs = mapping.items() if isinstance(mapping, dict) else mapping
    rules = sorted((float(t), float(r)) for t, r in pairs)
    thresholds = [t for t, _ in rules]
    if len(set(thresholds)) != len(thresholds):
        raise ConfigError(f"duplicate thresholds in schedule entry: {thresholds}")
    for _, rate in rules:
        if not (0.0 <= rate < 1.0):
            raise ConfigError(f"rates must lie in [0, 1), got {rate}")
    rates = [r for _, r in rules]
    if any(b < a for a, b in zip(rates, rates[1:])):
        warnings.warn("schedule rates decrease with rising thresholds; "
                      "higher similarity normally permits more reduction",
                      stacklevel=3)
    return rules


@dataclass
class ScheduleConfig:
    """Per-feature ordered (threshold -> rate) tables plus matching settings."""

    rules: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    cache_step: int = 5
    stride: tuple[int, int, int] = (2, 2, 2)
    metric: str = DEFAULT_METRIC

    def __post_init__(self):
        for feature in self.rules:
            if feature not in SCHEDULABLE_FEATURES:
                raise ConfigError(
                    f"schedules may only reference features {SCHEDULABLE_FEATURES}, "
                    f"got {feature!r} (K always follows V)")
        self.rules = {f: _as_rule_list(r) for f, r in self.rules.items()}
        if self.cache_step < 1:
            raise ConfigError(f"cache_step must be >= 1, got {self.cache_step}")
        self.stride = tuple(int(s) for s in self.stride)
        if len(self.stride) != 3 or min(self.stride) < 1:
            raise ConfigError(f"stride must be three positive ints, got {self.stride}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")

    @property
    def is_identity(self) -> bool:
        return not any(self.rules.values())

    @staticmethod
    def identity(cache_step: int = 5, stride=(2, 2, 2),
                 metric: str = DEFAULT_METRIC) -> "ScheduleConfig":
        return ScheduleConfig(rules={}, cache_step=cache_step, stride=stride,
                              metric=metric)

    def to_json(self) -> str:
        payload: dict = {feature: {repr(t): r for t, r in rules}
                         for feature, rules in sorted(self.rules.items())}
        payload["cache_step"] = self.cache_step
        payload["stride"] = list(self.stride)
        payload["metric"] = self.metric
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "ScheduleConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"schedule is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("schedule JSON must be an object")
        rules = {}
        for key, value in payload.items():
            if key in ("cache_step", "stride", "metric", "schema_version"):
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"schedule entry {key!r} must map thresholds to rates")
            try:
                rules[key] = [(float(t), float(r)) for t, r in value.items()]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad threshold/rate in entry {key!r}: {exc}") from exc
        return ScheduleConfig(
            rules=rules,
            cache_step=int(payload.get("cache_step", 5)),
            stride=tuple(payload.get("stride", (2, 2, 2))),
            metric=payload.get("metric", DEFAULT_METRIC),
        )

    @staticmethod
    def from_file(path) -> "ScheduleConfig":
        with open(path, encoding="utf-8") as fh:
            return ScheduleConfig.from_json(fh.read())

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


@dataclass(frozen=True)
class ProfileRecord:
    feature: str
    t: int
    b: int
    sim_raw: float
    sim_std: float
    sim_p10: float
    sim_p90: float


@dataclass
class SimilarityProfile:
    """Standardized similarity over the (feature, timestep, block) lattice."""

    num_timesteps: int
    num_blocks: int
    features: tuple[str, ...]
    grid_shape: tuple[int, int, int]
    stride: tuple[int, int, int]
    metric: str
    records: list[ProfileRecord]

    def __post_init__(self):
        self._std = {(r.feature, r.t, r.b): r.sim_std for r in self.records}
        expected = {(f, t, b) for f in self.features
                    for t in range(self.num_timesteps)
                    for b in range(self.num_blocks)}
        if set(self._std) != expected:
            raise ConfigError("profile records do not cover the declared "
                              "(feature, timestep, block) lattice exactly")

    def get(self, feature: str, t: int, b: int) -> float:
        try:
            return self._std[(feature, t, b)]
        except KeyError:
            raise KeyError(f"profile has no entry for ({feature!r}, t={t}, b={b})") from None

    def to_json(self) -> str:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "metadata": {
                "num_timesteps": self.num_timesteps,
                "num_blocks": self.num_blocks,
                "features": list(self.features),
                "grid_shape": list(self.grid_shape),
                "stride": list(self.stride),
                "metric": self.metric,
            },
            "records": [
                {"feature": r.feature, "t": r.t, "b": r.b,
                 "sim_raw": r.sim_raw, "sim_std": r.sim_std,
                 "sim_p10": r.sim_p10, "sim_p90": r.sim_p90}
                for r in self.records
            ],
        }
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "SimilarityProfile":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"profile is not valid JSON: {exc}") from exc
        try:
            meta = payload["metadata"]
            records = [ProfileRecord(feature=r["feature"], t=int(r["t"]), b=int(r["b"]),
                                     sim_raw=float(r["sim_raw"]), sim_std=float(r["sim_std"]),
                                     sim_p10=float(r["sim_p10"]), sim_p90=float(r["sim_p90"]))
                       for r in payload["records"]]
            return SimilarityProfile(
                num_timesteps=int(meta["num_timesteps"]),
                num_blocks=int(meta["num_blocks"]),
                features=tuple(meta["features"]),
                grid_shape=tuple(meta["grid_shape"]),
                stride=tuple(meta["stride"]),
                metric=meta["metric"],
                records=records,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed profile JSON: {exc}") from exc

    @staticmethod
    def from_file(path) -> "SimilarityProfile":
        with open(path, encoding="utf-8") as fh:
            return SimilarityProfile.from_json(fh.read())

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


def record_profile(raw_entries, *, num_timesteps: int, num_blocks: int,
                   grid_shape, stride, metric: str,
                   features=PROFILE_FEATURES) -> SimilarityProfile:
    """Assemble a profile from raw (feature, t, b, mean, p10, p90) entries.

    Standardization runs per feature across all (t, b) points. A feature with
    a single lattice point, like a degenerate one-step one-block run, carries
    no contrast and maps to 0.5, matching the constant-profile rule.
    """
    entries = list(raw_entries)
    if not entries:
        raise ConfigError("cannot build a profile from an empty run")
    by_feature: dict[str, list] = {f: [] for f in features}
    for feature, t, b, raw, p10, p90 in entries:
        if feature not in by_feature:
            raise ConfigError(f"unexpected feature {feature!r} in profile entries")
        by_feature[feature].append((t, b, float(raw), float(p10), float(p90)))
    records = []
    for feature, rows in by_feature.items():
        if not rows:
            raise ConfigError(f"no entries recorded for feature {feature!r}")
        raws = np.array([r[2] for r in rows])
        if len(raws) == 1 or np.all(raws == raws[0]):
            stds = np.full(len(raws), 0.5)
        else:
            stds = standardize_profile(raws)
        for (t, b, raw, p10, p90), std in zip(rows, stds):
            records.append(ProfileRecord(feature=feature, t=t, b=b, sim_raw=raw,
                                         sim_std=float(std), sim_p10=p10, sim_p90=p90))
    return SimilarityProfile(num_timesteps=num_timesteps, num_blocks=num_blocks,
                             features=tuple(features), grid_shape=tuple(grid_shape),
                             stride=tuple(stride), metric=metric, records=records)


def lookup_rate(cfg: ScheduleConfig, profile: SimilarityProfile,
                feature: str, t: int, b: int) -> float:
    """Rate of the largest threshold <= the profiled similarity, else 0."""
    sim = profile.get(feature, t, b)
    rules = cfg.rules.get(feature, [])
    if not rules:
        return 0.0
    thresholds = [thr for thr, _ in rules]
    pos = bisect_right(thresholds, sim)
    if pos == 0:
        return 0.0
    return rules[pos - 1][1]


@dataclass
class MatchingCache:
    """Reuses match results across steps; recomputes every cache_step steps.

    An entry computed at step t0 serves any later step t with
    cache_step * floor(t / cache_step) == t0, mirroring the cadence of the
    sampling loop. Recompute counts are tracked per (feature, block).
    """

    cache_step: int
    _store: dict = field(default_factory=dict)
    recompute_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cache_step < 1:
            raise ConfigError(f"cache_step must be >= 1, got {self.cache_step}")


def cached_match(cache: MatchingCache, feature: str, block: int, t: int,
                 tokens, part: Partition, metric: str,
                 rng: np.random.Generator | None = None) -> tuple[MatchResult, bool]:
    """Match through the cache; returns (result, recomputed).

    Recomputes when t is a multiple of the cache step, when no entry exists,
    or when the stored entry does not belong to the current cache window.
    """
    s = cache.cache_step
    key = (feature, block)
    entry = cache._store.get(key)
    window = s * (t // s)
    if t % s == 0 or entry is None or entry[1] != window:
        result = pairwise_best_match(tokens, part, metric, rng)
        cache._store[key] = (result, t)
        cache.recompute_counts[key] = cache.recompute_counts.get(key, 0) + 1
        return result, True
    return entry[0], False


@dataclass(frozen=True)
class TuneStep:
    threshold: float
    rate: float
    good: bool


@dataclass(frozen=True)
class TuneResult:
    config: ScheduleConfig
    accepted: bool
    trace: tuple[TuneStep, ...]


#: oracle-call budget for the tuning walk; the procedure is designed to land
#: well within it on realistic quality responses
TUNE_MAX_CALLS = 10


def tune_schedule(quality_oracle, feature: str = "Q",
                  cache_step: int = 5, stride=(2, 2, 2),
                  metric: str = DEFAULT_METRIC) -> TuneResult:
    """Walk threshold/rate space with a good/bad quality callback.

    Starting at threshold 0.5 and rate 0.3: while the oracle approves, raise
    the rate by 0.2 (stopping below 1.0); on a rejection, revert to the last
    approved rate, lift the threshold by 0.1, and try again. The walk ends
    when a rate fails a second time (lifting the threshold did not unlock it),
    when the threshold would exceed 0.9, or at the call budget; the last
    approved (threshold, rate) pair becomes the schedule. If the very first
    configuration is rejected, an identity schedule is returned, flagged.

    The oracle must be deterministic per configuration.
    """

    def make_config(thr_tenths: int, rate_tenths: int) -> ScheduleConfig:
        return ScheduleConfig(rules={feature: [(thr_tenths / 10, rate_tenths / 10)]},
                              cache_step=cache_step, stride=stride, metric=metric)

    thr, rate = 5, 3
    last_good: tuple[int, int] | None = None
    failed_rates: set[int] = set()
    trace: list[TuneStep] = []

    for _ in range(TUNE_MAX_CALLS):
        good = bool(quality_oracle(make_config(thr, rate)))
        trace.append(TuneStep(threshold=thr / 10, rate=rate / 10, good=good))
        if good:
            last_good = (thr, rate)
            if rate + 2 >= 10:
                break
            rate += 2
        else:
            if last_good is None:
                return TuneResult(
                    config=ScheduleConfig.identity(cache_step, stride, metric),
                    accepted=False, trace=tuple(trace))
            if rate in failed_rates:
                break
            failed_rates.add(rate)
            rate = last_good[1]
            thr += 1
            if thr > 9:
                break

    assert last_good is not None
    return TuneResult(config=make_config(*last_good), accepted=True,
                      trace=tuple(trace))
