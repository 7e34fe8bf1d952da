"""Reduction and restoration operators plus the three attention variants.

A ReductionPlan discards the most redundant source tokens (per a MatchResult)
and remembers each discarded token's kept representative. Attention runs on
the shortened sequences; restoration re-expands to the original length by
replicating representative rows, which keeps the layer drop-in compatible
with fixed-length pipelines.

All attention variants share one chunked softmax-attention core, so the
zero-rate configurations are bitwise identical to plain attention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Matrix, apply_rope_tables, row_softmax
from .flops import SOFTMAX_COST_PER_ENTRY, CostBreakdown
from .matching import MatchResult, Partition

REDUCE_OPS = ("discard", "mean")

#: cap on score-matrix entries held at once by the chunked attention core
_ATTN_CHUNK_ELEMS = 1 << 25


@dataclass(frozen=True)
class ReductionPlan:
    """Kept-index set plus the discarded-to-representative map.

    kept and discarded are ascending original indices; reps[i] is the kept
    original index standing in for discarded[i]. Only source tokens are ever
    discarded, so every destination survives and restoration is total.
    """

    kept: np.ndarray
    discarded: np.ndarray
    reps: np.ndarray
    original_len: int
    rate: float

    @property
    def m(self) -> int:
        return len(self.kept)

    def rep_of(self) -> dict[int, int]:
        """Mapping view of discarded index -> representative kept index."""
        return {int(d): int(r) for d, r in zip(self.discarded, self.reps)}

    def validate(self) -> None:
        n = self.original_len
        if len(self.kept) + len(self.discarded) != n:
            raise ValueError("kept and discarded must partition 0..n-1")
        merged = np.concatenate([self.kept, self.discarded])
        if not np.array_equal(np.sort(merged), np.arange(n)):
            raise ValueError("kept and discarded must partition 0..n-1")
        if len(self.reps) != len(self.discarded):
            raise ValueError("reps must align with discarded")
        if len(self.discarded) and not np.isin(self.reps, self.kept).all():
            raise ValueError("every representative must be a kept index")

    @staticmethod
    def identity(n: int) -> "ReductionPlan":
        return ReductionPlan(kept=np.arange(n, dtype=np.int64),
                             discarded=np.empty(0, dtype=np.int64),
                             reps=np.empty(0, dtype=np.int64),
                             original_len=n, rate=0.0)


def build_plan(match: MatchResult, part: Partition, rate: float) -> ReductionPlan:
    """Discard the floor(rate * n_src) most redundant sources.

    The reduced length is m = n - floor(rate * n_src): the rate counts over
    reducible (source) tokens only, which guarantees destinations survive.
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    n = part.n_tokens
    n_discard = int(math.floor(rate * part.n_src))
    top_positions = match.reduce_order[:n_discard]
    discarded = part.src_indices[top_positions]
    reps = part.dst_indices[match.best_dst[top_positions]]
    order = np.argsort(discarded)
    discarded = discarded[order]
    reps = reps[order]
    mask = np.ones(n, dtype=bool)
    mask[discarded] = False
    kept = np.nonzero(mask)[0]
    return ReductionPlan(kept=kept, discarded=discarded, reps=reps,
                         original_len=n, rate=rate)


def reduce_tokens(tokens: Matrix, plan: ReductionPlan, op: str = "discard") -> Matrix:
    """Shorten a token matrix to the plan's kept rows.

    discard copies kept rows verbatim; mean replaces each kept row by the
    unweighted average of itself and all rows it represents.
    """
    if op not in REDUCE_OPS:
        raise ValueError(f"unknown reduction op {op!r}, expected one of {REDUCE_OPS}")
    if tokens.shape[0] != plan.original_len:
        raise ValueError(
            f"token count {tokens.shape[0]} does not match plan over {plan.original_len}")
    out = tokens[plan.kept].copy()
    if op == "mean" and len(plan.discarded):
        kept_pos = np.full(plan.original_len, -1, dtype=np.int64)
        kept_pos[plan.kept] = np.arange(plan.m)
        targets = kept_pos[plan.reps]
        counts = np.ones(plan.m)
        np.add.at(counts, targets, 1.0)
        np.add.at(out, targets, tokens[plan.discarded])
        out /= counts[:, None]
    return out


def restore_tokens(reduced_out: Matrix, plan: ReductionPlan) -> Matrix:
    """Re-expand to the original length, replicating representatives' rows."""
    if reduced_out.shape[0] != plan.m:
        raise ValueError(
            f"reduced matrix has {reduced_out.shape[0]} rows, plan expects {plan.m}")
    kept_pos = np.empty(plan.original_len, dtype=np.int64)
    kept_pos[plan.kept] = np.arange(plan.m)
    row_source = kept_pos.copy()
    if len(plan.discarded):
        row_source[plan.discarded] = kept_pos[plan.reps]
    return reduced_out[row_source]


def attn_plain(q: Matrix, k: Matrix, v: Matrix, scale: bool = True,
               counter: CostBreakdown | None = None) -> Matrix:
    """softmax(Q K^T * s) V with s = 1/sqrt(d) when scaling is on.

    Computed in row chunks so the full score matrix is never materialized;
    chunk size is a function of the shapes alone, keeping runs reproducible.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention expects 2-D Q, K, V")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"Q and K widths differ: {q.shape[1]} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"K and V row counts differ: {k.shape[0]} vs {v.shape[0]}")
    m_q, d = q.shape
    m_kv = k.shape[0]
    s = 1.0 / math.sqrt(d) if scale else 1.0
    if counter is not None:
        counter.add(CostBreakdown(qk_matmul=m_q * m_kv * d,
                                  av_matmul=m_q * m_kv * v.shape[1],
                                  softmax=SOFTMAX_COST_PER_ENTRY * m_q * m_kv))
    chunk = max(1, min(m_q, _ATTN_CHUNK_ELEMS // max(1, m_kv)))
    out = np.empty((m_q, v.shape[1]), dtype=np.result_type(q, k, v))
    kt = k.T
    for i in range(0, m_q, chunk):
        scores = (q[i:i + chunk] * s) @ kt if scale else q[i:i + chunk] @ kt
        out[i:i + chunk] = row_softmax(scores) @ v
    return out


@dataclass(frozen=True)
class AttentionWeights:
    """Projection matrices applied to the shared input before attention."""

    w_q: Matrix
    w_k: Matrix
    w_v: Matrix


def attn_sym_rnr(h: Matrix, weights: AttentionWeights, plan: ReductionPlan,
                 op: str = "discard", scale: bool = True,
                 rope_tables: tuple[np.ndarray, np.ndarray] | None = None,
                 counter: CostBreakdown | None = None) -> Matrix:
    """Symmetric variant: reduce the shared input, attend, restore.

    Q, K, V are projected from the already-shortened sequence, so one plan
    governs all three. When rotary tables are given, the kept rows are rotated
    by their original positions' angles.
    """
    if h.shape[0] != plan.original_len:
        raise ValueError(f"input has {h.shape[0]} rows, plan expects {plan.original_len}")
    reduced = reduce_tokens(h, plan, op)
    d = h.shape[1]
    if counter is not None:
        counter.add(CostBreakdown(projections=3 * plan.m * d * d))
    q = reduced @ weights.w_q
    k = reduced @ weights.w_k
    v = reduced @ weights.w_v
    if rope_tables is not None:
        cos, sin = rope_tables
        q = apply_rope_tables(q, cos[plan.kept], sin[plan.kept])
        k = apply_rope_tables(k, cos[plan.kept], sin[plan.kept])
    out = attn_plain(q, k, v, scale=scale, counter=counter)
    return restore_tokens(out, plan)


def attn_asym_rnr(q: Matrix, k: Matrix, v: Matrix, plan_q: ReductionPlan,
                  plan_kv: ReductionPlan, op: str = "discard", scale: bool = True,
                  counter: CostBreakdown | None = None) -> Matrix:
    """Asymmetric variant: reduce Q and K/V independently, restore Q only.

    K and V share plan_kv (their rows correspond one-to-one); the output is
    re-expanded along the query axis alone, since key/value information is
    already folded into the attention mix.
    """
    if q.shape[0] != plan_q.original_len:
        raise ValueError(f"Q has {q.shape[0]} rows, plan_q expects {plan_q.original_len}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"K and V row counts differ: {k.shape[0]} vs {v.shape[0]}")
    if k.shape[0] != plan_kv.original_len:
        raise ValueError(f"K/V have {k.shape[0]} rows, plan_kv expects {plan_kv.original_len}")
    q_red = reduce_tokens(q, plan_q, op)
    k_red = reduce_tokens(k, plan_kv, op)
    v_red = reduce_tokens(v, plan_kv, op)
    out = attn_plain(q_red, k_red, v_red, scale=scale, counter=counter)
    return restore_tokens(out, plan_q)
