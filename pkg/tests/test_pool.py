"""Neighbor-graph exactness, dataset ingestion, and cache integrity."""

import numpy as np
import pytest

from mfsearch.pool import (
    CacheError,
    DatasetSpec,
    PointPool,
    SyntheticParams,
    build_neighbor_graph,
    cache_graph,
    feature_digest,
    load_cached,
    load_pool,
    synth_pool,
)


def brute_force_neighbors(features, k, metric="euclidean"):
    n = len(features)
    out = []
    for i in range(n):
        dists = []
        for j in range(n):
            if j == i:
                continue
            if metric == "euclidean":
                d = float(np.linalg.norm(features[i] - features[j]))
            else:
                inter = float((features[i] * features[j]).sum())
                union = float(features[i].sum() + features[j].sum() - inter)
                d = 1.0 - (inter / union if union > 0 else 1.0)
            dists.append((d, j))
        dists.sort()
        out.append([j for _, j in dists[:k]])
    return out


class TestNeighborGraph:
    def test_collinear_points(self):
        feats = np.array([[0.0], [1.0], [3.0]])
        ids, weights = build_neighbor_graph(feats, 1)
        np.testing.assert_array_equal(ids.ravel(), [1, 0, 1])
        np.testing.assert_array_equal(weights, np.ones((3, 1)))

    def test_identical_points_tie_to_lowest_ids(self):
        feats = np.zeros((5, 3))
        ids, _ = build_neighbor_graph(feats, 2)
        np.testing.assert_array_equal(ids[0], [1, 2])
        np.testing.assert_array_equal(ids[3], [0, 1])

    def test_matches_brute_force(self, rng):
        for metric in ("euclidean", "jaccard"):
            if metric == "euclidean":
                feats = rng.normal(size=(30, 4))
            else:
                feats = (rng.random((30, 16)) < 0.4).astype(float)
            ids, _ = build_neighbor_graph(feats, 5, metric)
            want = brute_force_neighbors(feats, 5, metric)
            for i in range(30):
                assert list(ids[i]) == want[i]

    def test_neighbor_count_truncated_on_small_pools(self, rng):
        feats = rng.normal(size=(4, 2))
        ids, _ = build_neighbor_graph(feats, 50)
        assert ids.shape == (4, 3)

    def test_jaccard_requires_binary(self, rng):
        with pytest.raises(ValueError, match="binary"):
            build_neighbor_graph(rng.normal(size=(5, 3)), 2, "jaccard")

    def test_reverse_adjacency_is_exact_transpose(self, rng):
        feats = rng.normal(size=(25, 3))
        pool = PointPool.build(feats, neighbors=4)
        # brute-force transpose oracle
        for p in range(pool.n):
            src, w = pool.reverse_neighbors(p)
            want = sorted(x for x in range(pool.n) if p in pool.knn_ids[x])
            assert sorted(src.tolist()) == want
            for s, wt in zip(src, w):
                pos = list(pool.knn_ids[s]).index(p)
                assert wt == pool.knn_weights[s][pos]

    def test_pool_validation(self):
        feats = np.zeros((3, 1))
        with pytest.raises(ValueError, match="self-loop"):
            PointPool(feats, np.array([[0], [0], [1]]), np.ones((3, 1)))
        with pytest.raises(ValueError, match="out of range"):
            PointPool(feats, np.array([[3], [0], [1]]), np.ones((3, 1)))
        with pytest.raises(ValueError, match="positive"):
            PointPool(feats, np.array([[1], [0], [1]]),
                      np.array([[1.0], [0.0], [1.0]]))


class TestCsvIngestion:
    def write(self, tmp_path, text):
        path = tmp_path / "data.csv"
        path.write_text(text)
        return path

    def test_small_file_caps_neighbors(self, tmp_path):
        path = self.write(tmp_path, "a,b,label\n0,0,1\n1,0,0\n0,1,0\n")
        pool, labels = load_pool(DatasetSpec(str(path), neighbors=10))
        assert pool.n == 3 and pool.k == 2
        np.testing.assert_array_equal(labels, [1, 0, 0])

    def test_bad_label_reports_row(self, tmp_path):
        path = self.write(tmp_path, "a,label\n0,1\n1,2\n")
        with pytest.raises(ValueError, match="row 3"):
            load_pool(DatasetSpec(str(path), neighbors=1))

    def test_ragged_row_reports_row(self, tmp_path):
        path = self.write(tmp_path, "a,b,label\n0,0,1\n1,0\n")
        with pytest.raises(ValueError, match="row 3"):
            load_pool(DatasetSpec(str(path), neighbors=1))

    def test_missing_label_column(self, tmp_path):
        path = self.write(tmp_path, "a,b\n0,0\n")
        with pytest.raises(ValueError, match="label"):
            load_pool(DatasetSpec(str(path), neighbors=1))

    def test_deterministic_reload(self, tmp_path):
        path = self.write(tmp_path, "a,b,label\n0,0,1\n1,0,0\n0,1,0\n2,2,1\n")
        spec = DatasetSpec(str(path), neighbors=2)
        pool_a, _ = load_pool(spec)
        pool_b, _ = load_pool(spec)
        assert pool_a.digest() == pool_b.digest()


class TestSyntheticPool:
    def test_prevalence_band(self):
        params = SyntheticParams(n=2000, prevalence=0.05, seed=4)
        pool, labels = synth_pool(params, neighbors=10)
        assert 80 <= int(labels.sum()) <= 120

    def test_seeded_determinism(self):
        params = SyntheticParams(n=300, prevalence=0.1, seed=9)
        pool_a, labels_a = synth_pool(params, neighbors=5)
        pool_b, labels_b = synth_pool(params, neighbors=5)
        assert pool_a.digest() == pool_b.digest()
        np.testing.assert_array_equal(labels_a, labels_b)

    def test_single_cluster_spreads_positives(self):
        params = SyntheticParams(n=400, clusters=1, prevalence=0.5, seed=2)
        _, labels = synth_pool(params, neighbors=5)
        # positives should appear in every quarter of the id range
        for lo in range(0, 400, 100):
            assert labels[lo:lo + 100].sum() > 0

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticParams(n=100, prevalence=0.0)
        with pytest.raises(ValueError):
            SyntheticParams(n=1, prevalence=0.1)


class TestGraphCache:
    def test_round_trip_is_lossless(self, rng, tmp_path):
        pool = PointPool.build(rng.normal(size=(20, 3)), neighbors=4)
        path = tmp_path / "pool.npz"
        cache_graph(pool, path)
        loaded = load_cached(path)
        assert loaded.digest() == pool.digest()
        np.testing.assert_array_equal(loaded.rknn_indptr, pool.rknn_indptr)
        np.testing.assert_array_equal(loaded.rknn_src, pool.rknn_src)

    def test_rejects_cache_for_other_features(self, rng, tmp_path):
        pool = PointPool.build(rng.normal(size=(10, 2)), neighbors=2)
        path = tmp_path / "pool.npz"
        cache_graph(pool, path)
        with pytest.raises(CacheError, match="different features"):
            load_cached(path, features=rng.normal(size=(10, 2)))

    def test_truncated_file_is_integrity_error(self, rng, tmp_path):
        pool = PointPool.build(rng.normal(size=(10, 2)), neighbors=2)
        path = tmp_path / "pool.npz"
        cache_graph(pool, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CacheError):
            load_cached(path)

    def test_not_a_cache(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, magic=np.array("something-else"), version=np.array(1))
        with pytest.raises(CacheError):
            load_cached(path)

    def test_feature_digest_stability(self, rng):
        feats = rng.normal(size=(5, 2))
        assert feature_digest(feats) == feature_digest(feats.copy())
        assert feature_digest(feats) != feature_digest(feats + 1e-12)
