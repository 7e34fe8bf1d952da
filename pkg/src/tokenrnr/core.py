"""Dense numeric substrate: token matrices, matmul, row softmax, 3D rotary embedding.

Matrices are plain 2-D numpy arrays (row-major, float64 by default). Operations
validate shapes eagerly; finiteness is enforced at construction points
(`as_matrix`, `TokenGrid`) and preserved by the stabilized operations.

Randomness goes through `make_rng` / `spawn_rngs`, which wrap numpy's PCG64
generator: the same seed yields the same stream on every platform.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

Matrix = np.ndarray

#: relative cutoff below which squared distances are recomputed exactly,
#: so coincident rows report a distance of exactly 0.0
_SQDIST_REFINE_REL = 1e-8


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 generator for the given 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent child generators derived from one seed, in a fixed order."""
    root = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(child)) for child in root.spawn(n)]


def as_matrix(values, dtype=np.float64) -> Matrix:
    """Validate and convert to a 2-D float matrix with finite entries."""
    mat = np.asarray(values, dtype=dtype)
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={mat.ndim}")
    if not np.isfinite(mat).all():
        raise ValueError("matrix entries must be finite")
    return mat


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def row_softmax(a: Matrix) -> Matrix:
    """Row-wise softmax, stabilized by subtracting each row's max.

    Every output row is a probability vector; large inputs cannot overflow
    because the per-row maximum is shifted to zero before exponentiation.
    """
    if a.ndim != 2:
        raise ValueError("row_softmax expects a 2-D matrix")
    shifted = a - a.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


@dataclass(frozen=True)
class TokenGrid:
    """A (T, H, W) grid of d-dimensional tokens, flattened t-major.

    The flat index of grid position (t, h, w) is ((t * h_dim) + h) * w_dim + w.
    All partitioning and stride logic in this package relies on that order.
    """

    t_dim: int
    h_dim: int
    w_dim: int
    tokens: Matrix

    def __post_init__(self):
        if min(self.t_dim, self.h_dim, self.w_dim) < 1:
            raise ValueError("grid dimensions must be >= 1")
        n = self.t_dim * self.h_dim * self.w_dim
        if self.tokens.ndim != 2 or self.tokens.shape[0] != n:
            raise ValueError(
                f"token matrix must have {n} rows for grid "
                f"({self.t_dim},{self.h_dim},{self.w_dim}), got {self.tokens.shape}"
            )
        if not np.isfinite(self.tokens).all():
            raise ValueError("grid tokens must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.t_dim, self.h_dim, self.w_dim)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.tokens.shape[1]

    def flat_index(self, t: int, h: int, w: int) -> int:
        return (t * self.h_dim + h) * self.w_dim + w

    @staticmethod
    def random(shape: tuple[int, int, int], feature_dim: int,
               rng: np.random.Generator) -> "TokenGrid":
        t, h, w = shape
        tokens = rng.standard_normal((t * h * w, feature_dim))
        return TokenGrid(t, h, w, tokens)


def grid_coordinates(shape: tuple[int, int, int]) -> np.ndarray:
    """(n, 3) array of (t, h, w) coordinates in flat (t-major) order."""
    t_dim, h_dim, w_dim = shape
    idx = np.arange(t_dim * h_dim * w_dim)
    t = idx // (h_dim * w_dim)
    h = (idx // w_dim) % h_dim
    w = idx % w_dim
    return np.stack([t, h, w], axis=1)


def _rope_axis_pairs(feature_dim: int) -> tuple[int, int, int]:
    """Split d/2 rotation pairs across (t, h, w) roughly proportional to (2, 1, 1).

    Each axis gets at least one pair, so feature_dim must be an even number >= 6.
    """
    if feature_dim % 2 != 0:
        raise ValueError(f"feature_dim must be even for rotary embedding, got {feature_dim}")
    pairs = feature_dim // 2
    p_h = max(1, pairs // 4)
    p_w = max(1, pairs // 4)
    p_t = pairs - p_h - p_w
    if p_t < 1:
        raise ValueError(f"feature_dim={feature_dim} too small to split across three axes (need >= 6)")
    return p_t, p_h, p_w


def rope3d_tables(shape: tuple[int, int, int], feature_dim: int,
                  base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (cos, sin) tables of shape (n, d/2), one angle per rotation pair.

    Angles depend only on the (t, h, w) coordinate of each token: pair j of an
    axis group with p pairs rotates by coordinate * base**(-j / p).
    """
    p_t, p_h, p_w = _rope_axis_pairs(feature_dim)
    coords = grid_coordinates(shape).astype(np.float64)
    angle_cols = []
    for axis, p_axis in enumerate((p_t, p_h, p_w)):
        inv_freq = base ** (-np.arange(p_axis) / p_axis)
        angle_cols.append(coords[:, axis:axis + 1] * inv_freq[None, :])
    angles = np.concatenate(angle_cols, axis=1)
    return np.cos(angles), np.sin(angles)


def apply_rope_tables(mat: Matrix, cos: np.ndarray, sin: np.ndarray) -> Matrix:
    """Rotate adjacent column pairs (2j, 2j+1) of `mat` by precomputed tables."""
    if mat.shape[0] != cos.shape[0] or mat.shape[1] != 2 * cos.shape[1]:
        raise ValueError(f"table shape {cos.shape} does not match matrix {mat.shape}")
    even = mat[:, 0::2]
    odd = mat[:, 1::2]
    out = np.empty_like(mat)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def apply_rope3d(mat: Matrix, shape: tuple[int, int, int], base: float = 10000.0) -> Matrix:
    """3D rotary position embedding over a t-major flattened (T, H, W) grid.

    Each token's feature pairs are rotated by angles determined solely by its
    (t, h, w) coordinate, so rotation preserves the norm of every pair and the
    token at (0, 0, 0) is left unchanged.
    """
    n = shape[0] * shape[1] * shape[2]
    if mat.shape[0] != n:
        raise ValueError(f"matrix has {mat.shape[0]} rows, grid {shape} needs {n}")
    cos, sin = rope3d_tables(shape, mat.shape[1], base)
    return apply_rope_tables(mat, cos, sin)


def pairwise_sq_dists(a: Matrix, b: Matrix) -> np.ndarray:
    """All-pairs squared Euclidean distances between rows of `a` and rows of `b`.

    Uses the |x|^2 + |y|^2 - 2 x.y expansion for speed, then recomputes
    near-zero entries with the direct difference formula so that coincident
    rows yield exactly 0.0 (the expansion alone can leave cancellation noise).
    """
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"row dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    a2 = np.einsum("ij,ij->i", a, a)
    b2 = np.einsum("ij,ij->i", b, b)
    d2 = a2[:, None] + b2[None, :]
    d2 -= 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    scale = float(a2.max(initial=0.0) + b2.max(initial=0.0))
    ii, jj = np.nonzero(d2 <= _SQDIST_REFINE_REL * scale)
    if ii.size:
        diff = a[ii] - b[jj]
        d2[ii, jj] = np.einsum("ij,ij->i", diff, diff)
    return d2


def checksum_matrix(mat: Matrix) -> str:
    """Stable hex digest of a matrix's shape and float64 contents."""
    h = hashlib.sha256()
    h.update(str(mat.shape).encode())
    h.update(np.ascontiguousarray(mat, dtype=np.float64).tobytes())
    return h.hexdigest()
