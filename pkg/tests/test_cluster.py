import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltscope.cluster import (
    ClusterCPA,
    TraceKMeans,
    cluster_attack,
    enumerate_voltage_multisets,
    fuse_rankings,
    ideal_k,
    kmeans,
    sweep_k,
)
from voltscope.cpa import cpa_attack_all
from voltscope.synth import PulseModel, SynthPlan, synthesize
from voltscope.traces import IslandConfig, TraceSet

KEY = bytes(range(16))


def brute_multisets(m, g):
    return len({tuple(sorted(t)) for t in itertools.product(range(g), repeat=m)})


class TestIdealK:
    def test_known_anchors(self):
        assert [ideal_k(m, 5) for m in (1, 2, 3, 4)] == [5, 15, 35, 70]

    def test_enumeration(self):
        for m in range(1, 7):
            for g in range(1, 9):
                assert ideal_k(m, g) == brute_multisets(m, g) == len(enumerate_voltage_multisets(m, g))

    def test_invalid(self):
        with pytest.raises(ValueError):
            ideal_k(0, 5)
        with pytest.raises(ValueError):
            ideal_k(2, 0)

    def test_large_exact(self):
        assert ideal_k(40, 40) == 53753604366668088230810


class TestKMeans:
    def test_separated_groups(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(0, 1, (30, 5)), rng.normal(100, 1, (30, 5))])
        est = TraceKMeans(2, seed=3).fit(X)
        assert len(set(est.labels_[:30])) == 1 and len(set(est.labels_[30:])) == 1
        assert est.labels_[0] != est.labels_[-1]

    def test_k_equals_n(self):
        X = np.random.default_rng(1).normal(size=(12, 4))
        est = TraceKMeans(12).fit(X)
        assert est.inertia_ == 0
        assert len(set(est.labels_)) == 12

    def test_k_one_is_mean(self):
        X = np.random.default_rng(2).normal(size=(40, 6))
        est = TraceKMeans(1).fit(X)
        np.testing.assert_allclose(est.cluster_centers_[0], X.mean(axis=0))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 8))
    def test_inertia_non_increasing(self, seed, k):
        X = np.random.default_rng(seed).normal(size=(60, 3)) * [1, 5, 0.2]
        hist = TraceKMeans(k, seed=seed).fit(X).inertia_history_
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_deterministic(self):
        X = np.random.default_rng(3).normal(size=(200, 5))
        a = TraceKMeans(6, seed=9).fit(X)
        b = TraceKMeans(6, seed=9).fit(X)
        assert np.array_equal(a.labels_, b.labels_)
        assert a.cluster_centers_.tobytes() == b.cluster_centers_.tobytes()

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_constant_offset_invariance(self, seed):
        rng = np.random.default_rng(seed)
        X = np.vstack([rng.normal(0, 1, (20, 4)), rng.normal(6, 1, (20, 4))])
        offset = rng.normal(size=4) * 3
        a = TraceKMeans(2, seed=1).fit(X).labels_
        b = TraceKMeans(2, seed=1).fit(X + offset).labels_
        assert np.array_equal(a, b)

    def test_errors(self):
        X = np.zeros((3, 2))
        with pytest.raises(ValueError):
            TraceKMeans(4).fit(X)
        with pytest.raises(ValueError):
            TraceKMeans(0).fit(X)

    def test_duplicate_points(self):
        X = np.zeros((10, 3))
        est = TraceKMeans(3).fit(X)
        assert est.inertia_ == 0 and set(est.labels_) <= {0, 1, 2}

    def test_predict(self):
        X = np.array([[0.0], [0.1], [10.0], [10.1]])
        est = TraceKMeans(2, seed=0).fit(X)
        assert est.predict([[0.05]])[0] == est.labels_[0]

    def test_model_wrapper(self):
        ts = synthesize(SynthPlan(IslandConfig(), 300, 1, KEY))
        model = kmeans(ts, 5, seed=2)
        assert model.k == 5 and model.assignment.shape == (300,)
        assert model.sizes.sum() == 300
        assert model.inertia >= 0
        with pytest.raises(ValueError):
            kmeans(ts, 0)


class TestFusion:
    def test_identical_rankings(self):
        r = np.random.default_rng(0).permutation(256)
        ranking, avg = fuse_rankings([r, r])
        np.testing.assert_array_equal(ranking, r)

    def test_average_and_ties(self):
        a = np.arange(256)
        b = np.r_[1, 0, np.arange(2, 256)]
        ranking, avg = fuse_rankings([a, b])
        assert avg[0] == avg[1] == 0.5
        assert ranking[:2].tolist() == [0, 1]

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
    def test_permutation(self, seed, n):
        rng = np.random.default_rng(seed)
        ranking, _ = fuse_rankings([rng.permutation(256) for _ in range(n)])
        assert sorted(ranking.tolist()) == list(range(256))


@pytest.fixture(scope="module")
def dvs():
    return synthesize(SynthPlan(IslandConfig(), 3000, 4, KEY, pulse=PulseModel(noise_sigma=2.0)))


class TestClusterAttack:
    def test_k1_equals_cpa(self, dvs):
        fused = cluster_attack(dvs, 1, known_key=KEY)
        plain = cpa_attack_all(dvs, known_key=KEY)
        for f, p in zip(fused, plain):
            np.testing.assert_array_equal(f.fused_ranking, p.ranking)
            assert f.fused_pge == p.pge

    def test_result_shape(self, dvs):
        res = cluster_attack(dvs, 5, known_key=KEY, byte_indices=[0, 3])
        assert [r.byte_index for r in res] == [0, 3]
        assert sorted(res[0].fused_ranking.tolist()) == list(range(256))
        assert sum(c.n_traces for c in res[0].per_cluster) <= len(dvs)

    def test_degenerate_clusters_skipped(self):
        X = np.vstack([np.zeros((10, 4)), [[50.0] * 4]])
        pts = np.random.default_rng(0).integers(0, 256, (11, 16), dtype=np.uint8)
        X[:10] += np.random.default_rng(1).normal(size=(10, 4))
        ts = TraceSet(samples=X, plaintexts=pts, keys=np.frombuffer(KEY, np.uint8))
        with pytest.warns(RuntimeWarning, match="excluded"):
            res = cluster_attack(ts, 2, byte_indices=[0])
        assert len(res[0].per_cluster) == 1

    def test_all_degenerate(self):
        ts = TraceSet(samples=np.arange(4.0)[:, None] * 10, plaintexts=np.zeros((4, 16)))
        with pytest.raises(ValueError, match="degenerate"):
            with pytest.warns(RuntimeWarning):
                cluster_attack(ts, 4, byte_indices=[0])

    def test_sweep_rows(self, dvs):
        rows = sweep_k(dvs, [1, 5], known_key=KEY, schedule=[1000, 3000])
        assert list(rows) == [1, 5]
        for r in rows.values():
            assert r.mtd.schedule == [1000, 3000]
            assert 0 <= r.avg_pge <= 255

    def test_sweep_empty(self, dvs):
        with pytest.raises(ValueError):
            sweep_k(dvs, [], known_key=KEY)

    def test_estimator(self, dvs):
        est = ClusterCPA(n_clusters=5, byte_indices=[0, 1]).fit(dvs.samples, dvs.plaintexts, KEY)
        assert est.predict().shape == (2,)
        assert est.labels_.shape == (len(dvs),)
        assert est.get_params()["n_clusters"] == 5

    def test_worker_count_invariant(self, dvs):
        a = cluster_attack(dvs, 5, known_key=KEY, n_jobs=1)
        b = cluster_attack(dvs, 5, known_key=KEY, n_jobs=3)
        for x, y in zip(a, b):
            assert x.average_rank.tobytes() == y.average_rank.tobytes()
