"""k-nearest-neighbor Kullback-Leibler divergence estimation.

Given samples X' ~ P' (l' rows) and X ~ P (l rows), the estimate is

    D(P'||P) ~= (d / l') * sum_i log(nu_k(i) / rho_k(i)) + log(l / (l' - 1))

where rho_k(i) is the distance from X'_i to its k-th nearest neighbor within
X' (excluding itself) and nu_k(i) the distance to its k-th nearest neighbor
in X. Neighbor search is exact brute force: desk-scale sample counts make
index structures unnecessary.

Exact zero distances (coincident points) are floored at DISTANCE_FLOOR; the
underlying theory assumes continuous densities where that event has measure
zero. Scoring a reduction plan compares kept rows against the full token set,
which always trips the floor on nu (every kept row coincides with itself in
the original set), so those scores are comparative diagnostics, not
calibrated divergences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Matrix, pairwise_sq_dists
from .rnr import ReductionPlan

DISTANCE_FLOOR = 1e-12

_QUERY_CHUNK = 1024


@dataclass(frozen=True)
class KlEstimate:
    """Estimated divergence in nats plus the sample geometry it came from."""

    value: float
    k: int
    reduced_count: int
    original_count: int
    dim: int


def _validate_samples(points: Matrix, min_rows: int = 2) -> None:
    if points.ndim != 2 or points.shape[0] < min_rows:
        raise ValueError(f"need a 2-D sample set with at least {min_rows} rows")
    if not np.isfinite(points).all():
        raise ValueError("sample entries must be finite")


def knn_distances(queries: Matrix, points: Matrix, k: int,
                  exclude_self: bool = False) -> np.ndarray:
    """Exact k-th nearest-neighbor L2 distance for each query row.

    With exclude_self, the single closest point is skipped for every query
    (the convention for queries drawn from `points` itself). Distances are
    selected on squared values and square-rooted afterwards; sqrt is monotone,
    so the order statistic is unchanged.
    """
    usable = points.shape[0] - (1 if exclude_self else 0)
    if k < 1 or k > usable:
        raise ValueError(f"k={k} out of range for {points.shape[0]} points"
                         f"{' (self-excluded)' if exclude_self else ''}")
    kth = k + (1 if exclude_self else 0)
    out = np.empty(queries.shape[0])
    for i in range(0, queries.shape[0], _QUERY_CHUNK):
        d2 = pairwise_sq_dists(queries[i:i + _QUERY_CHUNK], points)
        out[i:i + _QUERY_CHUNK] = np.partition(d2, kth - 1, axis=1)[:, kth - 1]
    return np.sqrt(out)


def knn_distance(points: Matrix, query, k: int, exclude_self: bool = False) -> float:
    """Single-query form of `knn_distances`."""
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    return float(knn_distances(q, points, k, exclude_self)[0])


def kl_estimate(reduced: Matrix, original: Matrix, k: int = 1) -> KlEstimate:
    """Estimate D(P'||P) from reduced ~ P' and original ~ P."""
    _validate_samples(reduced, min_rows=k + 1)
    _validate_samples(original, min_rows=k)
    if reduced.shape[1] != original.shape[1]:
        raise ValueError("sample sets must share a dimension")
    l_prime, d = reduced.shape
    l = original.shape[0]
    rho = np.maximum(knn_distances(reduced, reduced, k, exclude_self=True),
                     DISTANCE_FLOOR)
    nu = np.maximum(knn_distances(reduced, original, k, exclude_self=False),
                    DISTANCE_FLOOR)
    value = (d / l_prime) * float(np.log(nu / rho).sum()) + math.log(l / (l_prime - 1))
    return KlEstimate(value=value, k=k, reduced_count=l_prime,
                      original_count=l, dim=d)


def score_reduction(tokens: Matrix, plan: ReductionPlan, k: int = 1) -> float:
    """Divergence score of a reduction plan: kept rows vs the full token set.

    Lower is better (the kept rows look more like the original distribution).
    See the module note on the coincident-point floor.
    """
    if tokens.shape[0] != plan.original_len:
        raise ValueError(
            f"token count {tokens.shape[0]} does not match plan over {plan.original_len}")
    if plan.m <= k:
        raise ValueError(f"plan keeps m={plan.m} rows, need more than k={k}")
    return kl_estimate(tokens[plan.kept], tokens, k=k).value


def unit_ball_volume(d: int) -> float:
    """Volume of the d-dimensional unit L2 ball: pi^(d/2) / Gamma(d/2 + 1).

    This constant cancels inside the divergence estimator; it is exposed for
    the density-estimate diagnostics used in tests.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def knn_density(points: Matrix, query, k: int = 1, exclude_self: bool = False) -> float:
    """k-NN density estimate at `query`: k / (count * volume of the k-NN ball).

    The normalizing count is l - 1 when the query is one of the points
    (exclude_self) and l otherwise. Diagnostic companion to `kl_estimate`.
    """
    l = points.shape[0]
    count = l - 1 if exclude_self else l
    radius = knn_distance(points, query, k, exclude_self)
    d = points.shape[1]
    return k / (count * unit_ball_volume(d) * radius ** d)
