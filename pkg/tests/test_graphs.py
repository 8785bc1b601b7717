import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mllc import diagnostics
from mllc.clg import build_clg_affinity, normalize_clg
from mllc.slg import (DegenerateFeatureError, GraphParameterError, SlgParams, build_slg_affinity,
                      normalize_symmetric)
from mllc.tensor_store import seeded_rng

from oracles import dense_clg_normalize, dense_clg_raw, dense_slg_raw, dense_sym_normalize, random_simplex


def neighbor_lists(raw):
    raw = raw.tocsr()
    return [sorted(raw.indices[raw.indptr[i]:raw.indptr[i + 1]].tolist()) for i in range(raw.shape[0])]


class TestSlgAffinity:
    def test_identical_vectors(self):
        raw = build_slg_affinity(np.array([[1.0, 0.0], [1.0, 0.0]]), SlgParams(k=1))
        np.testing.assert_array_equal(raw.toarray(), [[0.0, 1.0], [1.0, 0.0]])

    def test_orthogonal_features_store_zeros(self):
        for k in (1, 2, 3):
            raw = build_slg_affinity(np.eye(4), SlgParams(k=k))
            assert raw.nnz == 4 * k
            assert np.all(raw.data == 0.0)

    def test_small_random_matches_oracle(self):
        x = seeded_rng(3).normal(size=(5, 3))
        raw = build_slg_affinity(x, SlgParams(k=2))
        dense, nbrs = dense_slg_raw(x, 2)
        assert neighbor_lists(raw) == nbrs
        np.testing.assert_allclose(raw.toarray(), dense, atol=1e-12, rtol=0)

    def test_tie_break_prefers_lower_index(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
        raw = build_slg_affinity(x, SlgParams(k=1))
        assert neighbor_lists(raw)[1] == [2]
        assert neighbor_lists(raw)[0] == [1]

    def test_zero_norm_row_is_named(self):
        x = np.array([[1.0, 0.0], [0.0, 0.0], [0.5, 0.5]])
        with pytest.raises(DegenerateFeatureError, match="row 1"):
            build_slg_affinity(x, SlgParams(k=1))
        raw = build_slg_affinity(x, SlgParams(k=1), zero_rows="isolate")
        assert neighbor_lists(raw) == [[2], [], [0]]

    def test_k_too_large(self):
        with pytest.raises(GraphParameterError):
            build_slg_affinity(np.eye(3), SlgParams(k=3))

    def test_fully_connected_and_empty_modes(self):
        x = seeded_rng(0).normal(size=(6, 3))
        raw = build_slg_affinity(x, SlgParams(k=None))
        assert raw.nnz == 30
        dense, _ = dense_slg_raw(x, None)
        np.testing.assert_allclose(raw.toarray(), dense, atol=1e-12)
        assert build_slg_affinity(x, SlgParams(k=0)).nnz == 0

    def test_gamma_matches_oracle(self):
        x = seeded_rng(5).normal(size=(9, 4))
        for gamma in (0.5, 2.0):
            dense, nbrs = dense_slg_raw(x, 3, gamma)
            raw = build_slg_affinity(x, SlgParams(k=3, gamma=gamma))
            assert neighbor_lists(raw) == nbrs
            np.testing.assert_allclose(raw.toarray(), dense, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 0.9))
    def test_gamma_changes_values_not_pattern(self, seed, gamma):
        x = seeded_rng(seed).normal(size=(10, 3))
        a = build_slg_affinity(x, SlgParams(k=3))
        b = build_slg_affinity(x, SlgParams(k=3, gamma=gamma))
        assert neighbor_lists(a) == neighbor_lists(b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_scale_invariance(self, seed):
        rng = seeded_rng(seed)
        x = rng.normal(size=(12, 4))
        scaled = x * rng.uniform(0.1, 10.0, size=(12, 1))
        a = build_slg_affinity(x, SlgParams(k=4))
        b = build_slg_affinity(scaled, SlgParams(k=4))
        assert neighbor_lists(a) == neighbor_lists(b)
        np.testing.assert_allclose(a.toarray(), b.toarray(), atol=1e-12)

    def test_row_sparsity_bound(self):
        raw = build_slg_affinity(seeded_rng(9).normal(size=(40, 5)), SlgParams(k=7))
        assert np.all(np.diff(raw.indptr) <= 7)
        assert np.all(raw.diagonal() == 0)

    def test_blocked_search_equals_single_block(self):
        x = seeded_rng(4).normal(size=(50, 6))
        a = build_slg_affinity(x, SlgParams(k=5), block_rows=7)
        b = build_slg_affinity(x, SlgParams(k=5))
        assert neighbor_lists(a) == neighbor_lists(b)
        np.testing.assert_allclose(a.toarray(), b.toarray(), atol=1e-14)


class TestSymmetricNormalization:
    def test_two_node(self):
        a = normalize_symmetric(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(a.toarray(), [[0.0, 1.0], [1.0, 0.0]])

    def test_random_matches_dense(self):
        raw = seeded_rng(1).uniform(size=(6, 6))
        np.fill_diagonal(raw, 0)
        dense, d = dense_sym_normalize(raw)
        a = normalize_symmetric(raw).toarray()
        np.testing.assert_allclose(a, dense, atol=1e-12, rtol=0)
        np.testing.assert_allclose(a @ np.sqrt(d), np.sqrt(d), atol=1e-9)

    def test_isolated_node_keeps_zero_row(self):
        diagnostics.reset()
        raw = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        a = normalize_symmetric(raw).toarray()
        assert np.all(a[2] == 0) and np.all(a[:, 2] == 0)
        assert a[2, 2] == 0
        assert diagnostics.counters["slg_isolated_nodes"] == 1

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(3, 40))
    def test_symmetry_and_spectrum(self, seed, n):
        x = seeded_rng(seed).normal(size=(n, 4))
        a = normalize_symmetric(build_slg_affinity(x, SlgParams(k=min(3, n - 1)))).toarray()
        assert np.max(np.abs(a - a.T)) <= 1e-12
        assert np.max(np.abs(np.linalg.eigvalsh(a))) <= 1 + 1e-9


class TestClgAffinity:
    def test_identical_one_hot(self):
        p = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        np.testing.assert_array_equal(build_clg_affinity(p).toarray(), np.ones((2, 2)))

    def test_class_mismatch(self):
        w = build_clg_affinity(np.array([[0.9, 0.1], [0.2, 0.8]])).toarray()
        np.testing.assert_array_equal(w, np.eye(2))

    def test_random_matches_dense(self):
        p = random_simplex(seeded_rng(2), 8, 3)
        np.testing.assert_allclose(build_clg_affinity(p).toarray(), dense_clg_raw(p), atol=1e-15)

    def test_argmax_tie_goes_to_lowest_class(self):
        p = np.array([[0.5, 0.5], [0.6, 0.4], [0.4, 0.6]])
        w = build_clg_affinity(p).toarray()
        assert w[0, 1] > 0 and w[0, 2] == 0

    def test_excluded_nodes_have_no_entries(self):
        p = random_simplex(seeded_rng(3), 6, 2)
        excl = np.array([False, True, False, False, True, False])
        w = build_clg_affinity(p, excl).toarray()
        assert np.all(w[excl] == 0) and np.all(w[:, excl] == 0)
        keep = ~excl
        np.testing.assert_allclose(w[np.ix_(keep, keep)], dense_clg_raw(p[keep]), atol=1e-15)
        n = normalize_clg(w).toarray()
        assert np.all(n[excl] == 0)

    def test_class_cap_splits_into_groups(self):
        p = np.tile([[0.9, 0.1]], (10, 1))
        w = build_clg_affinity(p, cap=4, rng=seeded_rng(0)).toarray()
        sizes = sorted(int((row > 0).sum()) for row in w)
        assert max(sizes) <= 4
        np.testing.assert_array_equal(w, w.T)
        np.testing.assert_array_equal(np.diag(w), 1.0)
        with pytest.raises(ValueError):
            build_clg_affinity(p, cap=4)


class TestClgNormalization:
    def test_singleton(self):
        w = normalize_clg(np.array([[1.0]])).toarray()
        assert w[0, 0] == 1.0

    def test_two_clique(self):
        np.testing.assert_allclose(normalize_clg(np.ones((2, 2))).toarray(), np.full((2, 2), 0.5))

    def test_random_matches_dense(self):
        p = random_simplex(seeded_rng(8), 10, 3)
        raw = dense_clg_raw(p)
        dense, d = dense_clg_normalize(raw)
        w = normalize_clg(build_clg_affinity(p)).toarray()
        np.testing.assert_allclose(w, dense, atol=1e-12, rtol=0)
        np.testing.assert_allclose(w @ np.sqrt(d), np.sqrt(d), atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 40), st.integers(2, 5))
    def test_cross_class_zero_and_equivariance(self, seed, n, c):
        rng = seeded_rng(seed)
        p = random_simplex(rng, n, c, sharp=2.0)
        w = normalize_clg(build_clg_affinity(p)).toarray()
        pred = p.argmax(axis=1)
        assert np.all(w[pred[:, None] != pred[None, :]] == 0)
        assert np.max(np.abs(w - w.T)) <= 1e-12
        assert np.max(np.abs(np.linalg.eigvalsh(w))) <= 1 + 1e-9
        perm = rng.permutation(n)
        wp = normalize_clg(build_clg_affinity(p[perm])).toarray()
        np.testing.assert_allclose(wp, w[np.ix_(perm, perm)], atol=1e-12)
