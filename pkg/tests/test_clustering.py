import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marketstates.clustering import (
    ClusterModel,
    assign,
    assign_all,
    fit_kmeans,
    load_assignments,
    load_model,
    repair_empty_clusters,
    save_model,
    squared_distances,
    write_assignments,
)
from marketstates.errors import PipelineError
from marketstates.preprocess import FeatureVector
from marketstates.synth import brute_force_assign, generate_planted


def _purity_perfect(labels, truth, k):
    # every planted blob maps onto exactly one cluster and vice versa
    pairs = set(zip(truth.tolist(), labels.tolist()))
    return len(pairs) == k and len({p[0] for p in pairs}) == k and len({p[1] for p in pairs}) == k


class TestFit:
    def test_separated_blobs_perfect_purity(self):
        data = generate_planted(k=8, n=800, separation=1.0, noise=0.02, seed=1)
        model = fit_kmeans(data.features, k=8, seed=0)
        assert _purity_perfect(model.labels, data.labels, 8)

    def test_k_equals_n(self, rng):
        X = rng.normal(size=(6, 4))
        model = fit_kmeans(X, k=6, seed=0)
        assert model.inertia == 0.0
        assert sorted(map(tuple, model.centroids)) == sorted(map(tuple, X))

    def test_deterministic(self):
        data = generate_planted(n=400, seed=2)
        a = fit_kmeans(data.features, seed=7)
        b = fit_kmeans(data.features, seed=7)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        np.testing.assert_array_equal(a.labels, b.labels)

    @pytest.mark.parametrize("init", ["spread", "uniform"])
    def test_inertia_non_increasing(self, init, rng):
        X = rng.normal(size=(300, 5))
        model = fit_kmeans(X, k=8, seed=3, init=init)
        hist = np.asarray(model.inertia_history)
        assert np.all(np.diff(hist) <= 1e-9 * hist[0])
        assert model.inertia == pytest.approx(hist[-1])

    def test_labels_match_assign(self, rng):
        X = rng.normal(size=(500, 45))
        model = fit_kmeans(X, k=8, seed=0)
        ids, _ = assign_all(model, X)
        np.testing.assert_array_equal(ids, model.labels)
        assert len(np.unique(model.labels)) == 8

    def test_max_iter_bound(self, rng):
        model = fit_kmeans(rng.normal(size=(200, 3)), k=5, seed=0, max_iter=2, tol=0)
        assert model.iterations_run == 2

    def test_errors(self, rng):
        with pytest.raises(PipelineError, match="fewer vectors"):
            fit_kmeans(rng.normal(size=(3, 2)), k=4)
        with pytest.raises(PipelineError, match="empty input"):
            fit_kmeans(np.empty((0, 2)), k=2)
        with pytest.raises(PipelineError, match="unknown init"):
            fit_kmeans(rng.normal(size=(10, 2)), k=2, init="bogus")

    def test_model_invariants(self):
        with pytest.raises(PipelineError, match="identical"):
            ClusterModel(np.zeros((2, 3)), seed=0)
        with pytest.raises(PipelineError, match="finite"):
            ClusterModel(np.array([[0.0, np.nan], [1.0, 1.0]]), seed=0)

    def test_accepts_feature_vectors(self, rng):
        X = rng.normal(size=(50, 3))
        vecs = [FeatureVector(np.datetime64("2000-01-01") + i, x) for i, x in enumerate(X)]
        np.testing.assert_array_equal(fit_kmeans(vecs, k=3).centroids, fit_kmeans(X, k=3).centroids)


class TestAssign:
    @pytest.fixture
    def model(self, rng):
        return ClusterModel(rng.normal(size=(6, 45)), seed=0)

    def test_exact_centroid(self, model):
        a = assign(model, model.centroids[3])
        assert a.cluster_id == 3 and a.distance == 0.0

    def test_tie_lowest_id(self):
        c = np.array([[9.0, 9.0], [1.0, 1.0], [-9.0, 9.0], [9.0, -9.0], [1.0, -1.0]])
        model = ClusterModel(c, seed=0)
        # equidistant from centroids 1 and 4
        assert assign(model, np.array([1.0, 0.0])).cluster_id == 1
        assert brute_force_assign(c, [1.0, 0.0]) == 1

    def test_against_brute_force(self, model, rng):
        X = rng.normal(size=(1000, 45))
        ids, dist = assign_all(model, X)
        expected = [brute_force_assign(model.centroids, x) for x in X]
        np.testing.assert_array_equal(ids, expected)
        assert np.all(dist >= 0)

    def test_dimension_mismatch(self, model):
        with pytest.raises(PipelineError, match="dimension mismatch"):
            assign(model, np.zeros(44))

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    @settings(max_examples=40, deadline=None)
    def test_translation_invariant(self, offset):
        rng = np.random.default_rng(4)
        c = rng.normal(size=(4, 3))
        x = rng.normal(size=(50, 3))
        offset = np.asarray(offset)
        base, _ = assign_all(ClusterModel(c, seed=0), x)
        moved, _ = assign_all(ClusterModel(c + offset, seed=0), x + offset)
        # near-ties may flip under rounding; compare decided points only
        d2 = np.sort(squared_distances(x, c), axis=1)
        clear = d2[:, 1] - d2[:, 0] > 1e-9
        np.testing.assert_array_equal(base[clear], moved[clear])


class TestRepair:
    def test_no_empty_identity(self, rng):
        X = rng.normal(size=(10, 2))
        c = X[:3].copy()
        labels = np.array([0, 1, 2] * 3 + [0])
        d2 = squared_distances(X, c)[np.arange(10), labels]
        out = repair_empty_clusters(X, c, labels, d2)
        assert out[0] is c and out[1] is labels

    def test_reseeds_to_farthest(self):
        # points 0..3 belong to centroid 0, centroid 2 is orphaned
        X = np.array([[0.0], [1.0], [2.0], [9.0], [20.0], [21.0]])
        c = np.array([[1.0], [20.5], [100.0]])
        labels = np.array([0, 0, 0, 0, 1, 1])
        d2 = ((X - c[labels]) ** 2).ravel()
        c2, labels2, d2_2 = repair_empty_clusters(X, c, labels, d2)
        # farthest from its own centroid is x=9 (distance 8)
        assert c2[2, 0] == 9.0
        assert labels2[3] == 2 and d2_2[3] == 0.0
        assert np.bincount(labels2, minlength=3).min() >= 1

    def test_fit_with_collapsing_init(self):
        # duplicate points make uniform init prone to empty clusters
        X = np.repeat(np.array([[0.0, 0.0], [5.0, 5.0], [10.0, 0.0]]), 20, axis=0)
        X = np.vstack([X, [[20.0, 20.0]]])
        for seed in range(10):
            model = fit_kmeans(X, k=4, seed=seed, init="uniform", max_iter=50)
            assert len(np.unique(model.labels)) == 4


def test_model_and_assignment_round_trip(tmp_path, rng):
    X = rng.normal(size=(100, 45))
    model = fit_kmeans(X, k=8, seed=5, feature_names=[f"f{i}" for i in range(45)])
    save_model(model, tmp_path / "m.json")
    loaded = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(loaded.centroids, model.centroids)
    assert loaded.seed == 5 and loaded.feature_names == model.feature_names
    dates = np.datetime64("2000-01-03") + np.arange(100)
    ids, dist = assign_all(model, X)
    write_assignments(dates, ids, dist, tmp_path / "a.csv")
    frame = load_assignments(tmp_path / "a.csv")
    np.testing.assert_array_equal(frame["cluster_id"], ids)
    np.testing.assert_array_equal(frame["distance"], dist)
