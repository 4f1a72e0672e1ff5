import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tileq.errors import DataError, ParameterError, ShapeError, SizeError
from tileq.linalg import exact_svd_truncated, kmeans, make_rng, matmul, sketch_lowrank


def _residual(w, f):
    return np.linalg.norm(w - f.reconstruct())


class TestMatmul:
    def test_identity(self):
        b = np.array([[5, 6], [7, 8]], dtype=np.float32)
        np.testing.assert_array_equal(matmul(np.eye(2), b), b)

    def test_hand_product(self):
        out = matmul([[1, 2], [3, 4]], [[5, 6], [7, 8]])
        np.testing.assert_array_equal(out, [[19, 22], [43, 50]])
        assert out.dtype == np.float32

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal((17, 9)), rng.standard_normal((9, 5))
        expected = np.zeros((17, 5))
        for r in range(17):
            for c in range(5):
                for t in range(9):
                    expected[r, c] += a[r, t] * b[t, c]
        np.testing.assert_allclose(matmul(a, b), expected, rtol=1e-6, atol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a, b, c = (rng.standard_normal(s) for s in ((6, 7), (7, 8), (8, 5)))
            left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
            assert np.linalg.norm(left - right) <= 1e-4 * np.linalg.norm(left)

    def test_rejects_nonfinite(self):
        with pytest.raises(DataError):
            matmul([[np.nan]], [[1.0]])


class TestSketch:
    def test_rank_one_recovered(self):
        rng = np.random.default_rng(0)
        u = rng.standard_normal(30)
        v = rng.standard_normal(20)
        w = np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v)) * 3.0
        f = sketch_lowrank(w, 1, 4, 0)
        assert abs(f.singulars[0] - np.linalg.norm(w)) <= 1e-5 * np.linalg.norm(w)
        assert _residual(w, f) <= 1e-5 * np.linalg.norm(w)

    def test_planted_rank_four(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((64, 4)) @ rng.standard_normal((4, 48))
        f = sketch_lowrank(w, 4, 4, 1)
        assert _residual(w, f) <= 1e-4 * np.linalg.norm(w)

    def test_gaussian_close_to_exact(self):
        w = np.random.default_rng(1).standard_normal((64, 48))
        exact = exact_svd_truncated(w, 8)
        assert _residual(w, sketch_lowrank(w, 8, 4, 1)) <= 1.10 * _residual(w, exact)

    def test_factor_invariants(self):
        w = np.random.default_rng(3).standard_normal((20, 15))
        f = sketch_lowrank(w, 6, 2, 3)
        f.check()
        assert np.all(np.diff(f.singulars) <= 0) and np.all(f.singulars >= 0)
        np.testing.assert_allclose(np.linalg.norm(f.left, axis=0), 1.0, rtol=1e-4)
        np.testing.assert_allclose(np.linalg.norm(f.right, axis=1), 1.0, rtol=1e-4)

    def test_zero_matrix(self):
        f = sketch_lowrank(np.zeros((5, 4)), 3, 4, 0)
        np.testing.assert_array_equal(f.singulars, 0.0)
        np.testing.assert_array_equal(f.reconstruct(), 0.0)

    def test_rank_out_of_range(self):
        with pytest.raises(ParameterError):
            sketch_lowrank(np.ones((4, 3)), 4, 1, 0)
        with pytest.raises(ParameterError):
            sketch_lowrank(np.ones((4, 3)), 0, 1, 0)

    def test_deterministic(self):
        w = np.random.default_rng(5).standard_normal((12, 9))
        a, b = sketch_lowrank(w, 3, 2, 11), sketch_lowrank(w, 3, 2, 11)
        np.testing.assert_array_equal(a.left, b.left)
        np.testing.assert_array_equal(a.singulars, b.singulars)
        np.testing.assert_array_equal(a.right, b.right)

    def test_residual_nonincreasing_in_rank(self):
        w = np.random.default_rng(8).standard_normal((30, 25))
        res = [_residual(w, sketch_lowrank(w, r, 4, 2)) for r in range(1, 11)]
        assert all(b <= a * (1 + 1e-9) for a, b in zip(res, res[1:]))


class TestExactSvd:
    def test_diagonal(self):
        f = exact_svd_truncated(np.diag([3.0, 2.0, 1.0]), 2)
        np.testing.assert_allclose(f.singulars, [3, 2], rtol=1e-6)
        assert abs(_residual(np.diag([3.0, 2.0, 1.0]), f) - 1.0) < 1e-6

    def test_exact_rank(self):
        rng = np.random.default_rng(2)
        u, _ = np.linalg.qr(rng.standard_normal((9, 3)))
        v, _ = np.linalg.qr(rng.standard_normal((7, 3)))
        w = u @ np.diag([5.0, 4.0, 3.0]) @ v.T
        assert _residual(w, exact_svd_truncated(w, 3)) <= 1e-6

    def test_tail_energy(self):
        w = np.random.default_rng(3).standard_normal((20, 12))
        evals = np.sort(np.linalg.eigvalsh(w.T @ w))[::-1]
        f = exact_svd_truncated(w, 5)
        np.testing.assert_allclose(_residual(w, f) ** 2, evals[5:].sum(), rtol=1e-6)
        np.testing.assert_allclose(f.singulars, np.sqrt(evals[:5]), rtol=1e-6)

    def test_sign_convention(self):
        w = np.random.default_rng(4).standard_normal((10, 8))
        f = exact_svd_truncated(w, 8)
        for col in f.left.T:
            first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
            assert first >= 0

    def test_size_cap(self):
        with pytest.raises(SizeError):
            exact_svd_truncated(np.zeros((513, 513)), 1)


class TestKmeans:
    def test_singletons(self):
        pts = np.random.default_rng(0).standard_normal((5, 3))
        c = kmeans(pts, 5, seed=0)
        assert sorted(c.labels.tolist()) == [0, 1, 2, 3, 4]
        assert c.inertia == 0.0

    def test_blobs_match_exhaustive_optimum(self):
        rng = np.random.default_rng(0)
        centers = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        truth = np.repeat(np.arange(3), 3)
        pts = centers[truth] + 0.01 * rng.standard_normal((9, 2))

        def inertia(labels):
            return sum(((pts[labels == j] - pts[labels == j].mean(0)) ** 2).sum()
                       for j in range(3) if np.any(labels == j))

        best = min((np.array(p) for p in itertools.product(range(3), repeat=9)
                    if len(set(p)) == 3), key=inertia)
        c = kmeans(pts, 3, seed=0)
        # same partition up to relabeling
        assert len({(a, b) for a, b in zip(c.labels, best)}) == 3
        assert len({(a, b) for a, b in zip(c.labels, truth)}) == 3

    def test_duplicates(self):
        pts = np.tile([[1.5, -2.0]], (6, 1))
        c = kmeans(pts, 2, seed=0)
        np.testing.assert_allclose(c.centroids, [[1.5, -2.0]] * 2)
        assert c.inertia == 0.0 and set(c.labels.tolist()) <= {0, 1}

    def test_k_greater_than_n(self):
        with pytest.raises(ParameterError):
            kmeans(np.zeros((2, 2)), 3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(3, 40), st.integers(1, 6), st.integers(0, 10_000))
    def test_history_nonincreasing_and_nonempty(self, n, k, seed):
        k = min(k, n)
        pts = np.random.default_rng(seed).standard_normal((n, 3))
        c = kmeans(pts, k, seed=seed)
        assert all(b <= a + 1e-12 for a, b in zip(c.history, c.history[1:]))
        assert set(c.labels.tolist()) == set(range(k))

    def test_deterministic(self):
        pts = np.random.default_rng(1).standard_normal((30, 4))
        a, b = kmeans(pts, 4, seed=9), kmeans(pts, 4, seed=9)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.centroids, b.centroids)


def test_rng_reproducible():
    a = make_rng(3).random(4)
    b = make_rng(3).random(4)
    np.testing.assert_array_equal(a, b)
