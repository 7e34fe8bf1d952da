"""Bipartite soft matching: strided 3D partitioning, similarity metrics,
best-destination matching, and similarity standardization.

Tokens are split into destinations (one random token per complete stride
chunk) and sources (everything else, including all tokens of incomplete
chunks). Each source is matched to its most similar destination; sources are
then ranked most-redundant-first by that similarity.

Determinism contract: both index lists are sorted ascending by flat index,
best-destination ties resolve to the lowest destination position, and the
reduction order breaks similarity ties by lowest source position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import pairwise_sq_dists

METRICS = ("neg_euclidean", "cosine", "dot", "random")
DEFAULT_METRIC = "neg_euclidean"


@dataclass(frozen=True)
class Partition:
    """Destination/source split of a flattened (T, H, W) grid."""

    dst_indices: np.ndarray
    src_indices: np.ndarray
    stride: tuple[int, int, int]
    grid_shape: tuple[int, int, int]

    @property
    def n_tokens(self) -> int:
        return len(self.dst_indices) + len(self.src_indices)

    @property
    def n_dst(self) -> int:
        return len(self.dst_indices)

    @property
    def n_src(self) -> int:
        return len(self.src_indices)

    @property
    def dst_ratio(self) -> float:
        return self.n_dst / self.n_tokens


@dataclass(frozen=True)
class MatchResult:
    """Per-source best destination and the derived reduction order.

    best_dst[i] is a position into Partition.dst_indices; reduce_order is a
    permutation of source positions sorted by best_sim descending (ties by
    lowest source position). num_evals counts pairwise similarity
    evaluations (always n_src * n_dst); zero_norm_rows counts rows the cosine
    metric had to treat as -inf similarity.
    """

    best_dst: np.ndarray
    best_sim: np.ndarray
    reduce_order: np.ndarray
    num_evals: int
    zero_norm_rows: int = 0


def partition_3d(grid_shape: tuple[int, int, int], stride: tuple[int, int, int],
                 rng: np.random.Generator) -> Partition:
    """Partition grid positions into one random destination per complete chunk.

    The destination count is floor(T/s_t) * floor(H/s_h) * floor(W/s_w); tokens
    in chunks truncated at any grid edge are all sources. One uniform draw is
    made per chunk, in t-major chunk order.
    """
    t_dim, h_dim, w_dim = grid_shape
    s_t, s_h, s_w = stride
    if min(s_t, s_h, s_w) < 1:
        raise ValueError(f"stride components must be >= 1, got {stride}")
    if min(t_dim, h_dim, w_dim) < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {grid_shape}")

    c_t, c_h, c_w = t_dim // s_t, h_dim // s_h, w_dim // s_w
    n_chunks = c_t * c_h * c_w
    dst = np.empty(0, dtype=np.int64)
    if n_chunks > 0:
        cells = rng.integers(0, s_t * s_h * s_w, size=n_chunks)
        ct, ch, cw = np.unravel_index(np.arange(n_chunks), (c_t, c_h, c_w))
        dt, dh, dw = np.unravel_index(cells, (s_t, s_h, s_w))
        t = ct * s_t + dt
        h = ch * s_h + dh
        w = cw * s_w + dw
        dst = np.sort((t * h_dim + h) * w_dim + w)

    mask = np.ones(t_dim * h_dim * w_dim, dtype=bool)
    mask[dst] = False
    src = np.nonzero(mask)[0]
    return Partition(dst_indices=dst, src_indices=src,
                     stride=(s_t, s_h, s_w), grid_shape=(t_dim, h_dim, w_dim))


def similarity_matrix(src: np.ndarray, dst: np.ndarray, metric: str,
                      rng: np.random.Generator | None = None
                      ) -> tuple[np.ndarray, int]:
    """(n_src, n_dst) similarity values plus a zero-norm diagnostic count.

    neg_euclidean is the negative L2 distance (not squared), so a source
    coinciding with a destination scores exactly 0, the metric's maximum.
    cosine maps any pair involving a zero-norm row to -inf rather than NaN.
    `random` ignores the tokens and draws i.i.d. uniforms from `rng`.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    zero_norm = 0
    if metric == "neg_euclidean":
        sims = -np.sqrt(pairwise_sq_dists(src, dst))
    elif metric == "dot":
        sims = src @ dst.T
    elif metric == "cosine":
        src_n = np.linalg.norm(src, axis=1)
        dst_n = np.linalg.norm(dst, axis=1)
        src_zero = src_n == 0.0
        dst_zero = dst_n == 0.0
        zero_norm = int(src_zero.sum() + dst_zero.sum())
        su = src / np.where(src_zero, 1.0, src_n)[:, None]
        du = dst / np.where(dst_zero, 1.0, dst_n)[:, None]
        sims = su @ du.T
        sims[src_zero, :] = -np.inf
        sims[:, dst_zero] = -np.inf
    else:  # random
        if rng is None:
            raise ValueError("the random metric needs an rng")
        sims = rng.random((len(src), len(dst)))
    return sims, zero_norm


def pairwise_best_match(tokens: np.ndarray, part: Partition, metric: str = DEFAULT_METRIC,
                        rng: np.random.Generator | None = None) -> MatchResult:
    """Match every source token to its most similar destination token."""
    if tokens.shape[0] != part.n_tokens:
        raise ValueError(
            f"token count {tokens.shape[0]} does not match partition over {part.n_tokens}")
    if part.n_dst == 0:
        raise ValueError("partition has no destinations; use a smaller stride")
    sims, zero_norm = similarity_matrix(
        tokens[part.src_indices], tokens[part.dst_indices], metric, rng)
    best_dst = np.argmax(sims, axis=1)
    best_sim = sims[np.arange(len(best_dst)), best_dst]
    reduce_order = np.argsort(-best_sim, kind="stable")
    return MatchResult(best_dst=best_dst, best_sim=best_sim,
                       reduce_order=reduce_order,
                       num_evals=part.n_src * part.n_dst,
                       zero_norm_rows=zero_norm)


def standardize_profile(raw) -> np.ndarray:
    """Clamp to the [5th, 95th] percentile range, then min-max map onto [0, 1].

    A constant input (clamp bounds coincide) maps everything to 0.5: a flat
    profile is equally uninformative everywhere, and the midpoint avoids
    always or never crossing downstream thresholds.
    """
    values = np.asarray(raw, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:
        raise ValueError("need a flat list of at least 2 values")
    lo = np.percentile(values, 5)
    hi = np.percentile(values, 95)
    if hi == lo:
        return np.full(len(values), 0.5)
    return (np.clip(values, lo, hi) - lo) / (hi - lo)
