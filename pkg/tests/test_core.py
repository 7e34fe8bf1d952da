import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenrnr.core import (TokenGrid, apply_rope3d, as_matrix, checksum_matrix,
                           grid_coordinates, make_rng, matmul, pairwise_sq_dists,
                           rope3d_tables, row_softmax, spawn_rngs)

from oracles import naive_matmul


class TestMatmul:
    def test_identity_left(self):
        a = make_rng(0).standard_normal((3, 5))
        assert np.array_equal(matmul(np.eye(3), a), a)

    def test_identity_right(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, np.eye(2)), a)

    def test_against_naive_oracle(self):
        rng = make_rng(42)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() <= 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_associativity(self, seed):
        rng = make_rng(seed)
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((6, 5))
        c = rng.standard_normal((5, 3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        scale = max(np.abs(left).max(), 1.0)
        assert np.abs(left - right).max() / scale <= 1e-9


class TestRowSoftmax:
    def test_uniform_row(self):
        out = row_softmax(np.array([[0.0, 0.0, 0.0]]))
        assert np.allclose(out, 1 / 3, atol=1e-15)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_large_magnitude_stays_finite(self):
        out = row_softmax(np.array([[1000.0, 0.0]]))
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert out[0, 1] >= 0.0

    def test_against_extended_precision(self):
        row = np.array([[1.0, 2.0, 3.0]])
        wide = np.exp(np.array([1, 2, 3], dtype=np.longdouble))
        expected = (wide / wide.sum()).astype(np.float64)
        assert np.abs(row_softmax(row) - expected).max() <= 1e-12

    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 8),
           st.floats(0.1, 500.0))
    @settings(max_examples=40, deadline=None)
    def test_rows_are_probability_vectors(self, seed, rows, cols, magnitude):
        a = make_rng(seed).standard_normal((rows, cols)) * magnitude
        out = row_softmax(a)
        assert (out >= 0).all()
        assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-12


class TestRope:
    def test_origin_token_unchanged(self):
        rng = make_rng(1)
        mat = rng.standard_normal((8, 8))
        out = apply_rope3d(mat, (2, 2, 2))
        assert np.array_equal(out[0], mat[0])

    def test_pair_norms_preserved(self):
        rng = make_rng(2)
        mat = rng.standard_normal((27, 10))
        out = apply_rope3d(mat, (3, 3, 3))
        before = np.hypot(mat[:, 0::2], mat[:, 1::2])
        after = np.hypot(out[:, 0::2], out[:, 1::2])
        assert np.abs(before - after).max() <= 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_token_norms_preserved(self, seed):
        rng = make_rng(seed)
        mat = rng.standard_normal((12, 16)) * 3.0
        out = apply_rope3d(mat, (3, 2, 2))
        assert np.abs(np.linalg.norm(out, axis=1)
                      - np.linalg.norm(mat, axis=1)).max() <= 1e-10

    def test_rotation_depends_only_on_coordinates(self):
        # the same (t, h, w) coordinate gets the same angles in any grid
        cos_a, sin_a = rope3d_tables((3, 4, 5), 12)
        cos_b, sin_b = rope3d_tables((2, 3, 4), 12)
        coords_a = grid_coordinates((3, 4, 5))
        coords_b = grid_coordinates((2, 3, 4))
        lookup = {tuple(c): i for i, c in enumerate(coords_a)}
        for i, c in enumerate(coords_b):
            j = lookup[tuple(c)]
            assert np.array_equal(cos_a[j], cos_b[i])
            assert np.array_equal(sin_a[j], sin_b[i])

    def test_odd_feature_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            apply_rope3d(np.ones((8, 7)), (2, 2, 2))

    def test_tiny_feature_dim_rejected(self):
        with pytest.raises(ValueError, match="three axes"):
            apply_rope3d(np.ones((8, 4)), (2, 2, 2))


class TestRng:
    def test_same_seed_same_stream(self):
        a = make_rng(123).standard_normal(16)
        b = make_rng(123).standard_normal(16)
        assert np.array_equal(a, b)

    def test_spawned_streams_differ_but_are_reproducible(self):
        first = [r.standard_normal(4) for r in spawn_rngs(7, 3)]
        second = [r.standard_normal(4) for r in spawn_rngs(7, 3)]
        for a, b in zip(first, second):
            assert np.array_equal(a, b)
        assert not np.array_equal(first[0], first[1])


class TestPairwiseSqDists:
    def test_coincident_rows_give_exact_zero(self):
        rng = make_rng(3)
        a = rng.standard_normal((6, 5))
        b = a.copy()
        d2 = pairwise_sq_dists(a, b)
        assert np.array_equal(np.diag(d2), np.zeros(6))

    def test_against_difference_formula(self):
        rng = make_rng(4)
        a = rng.standard_normal((10, 7))
        b = rng.standard_normal((8, 7))
        expected = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        d2 = pairwise_sq_dists(a, b)
        assert np.abs(d2 - expected).max() <= 1e-12 * max(1.0, expected.max())

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            pairwise_sq_dists(np.ones((2, 3)), np.ones((2, 4)))


class TestGridAndValidation:
    def test_flattening_order(self):
        grid = TokenGrid.random((2, 3, 4), 6, make_rng(0))
        assert grid.flat_index(1, 2, 3) == (1 * 3 + 2) * 4 + 3
        coords = grid_coordinates((2, 3, 4))
        assert tuple(coords[grid.flat_index(1, 0, 2)]) == (1, 0, 2)

    def test_row_count_validation(self):
        with pytest.raises(ValueError, match="rows"):
            TokenGrid(2, 2, 2, np.ones((7, 3)))

    def test_as_matrix_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            as_matrix([[1.0, np.inf]])

    def test_as_matrix_rejects_wrong_ndim(self):
        with pytest.raises(ValueError, match="2-D"):
            as_matrix([1.0, 2.0])

    def test_checksum_sensitivity(self):
        a = np.ones((3, 3))
        b = a.copy()
        assert checksum_matrix(a) == checksum_matrix(b)
        b[0, 0] += 1e-15
        assert checksum_matrix(a) != checksum_matrix(b)
