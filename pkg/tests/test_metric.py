import numpy as np
import pytest

from taskprune.errors import ValidationError
from taskprune.gmm import GmmParams, fit_em, log_density
from taskprune.metric import (
    MODEL_EMBEDDING,
    RAW_FLATTEN,
    FeatureExtractor,
    construct_metric_dataset,
    empirical_kl,
    extract_features,
    gather,
    load_manifest,
    save_manifest,
)

from conftest import make_patches


def _unit_gmm(center):
    center = np.asarray(center, dtype=np.float64)
    return GmmParams(
        weights=np.array([1.0]),
        means=center[None, :],
        variances=np.ones((1, len(center))),
    )


class TestExtraction:
    def test_raw_flatten_is_reshape(self, rng):
        images = rng.normal(size=(7, 6, 6))
        feats = extract_features(FeatureExtractor(mode=RAW_FLATTEN), images)
        np.testing.assert_array_equal(feats, images.reshape(7, -1))

    def test_model_embedding_matches_token_representation(self, tiny_model, rng):
        patches = make_patches(rng, 9)
        extractor = FeatureExtractor(mode=MODEL_EMBEDDING, model=tiny_model)
        feats = extract_features(extractor, patches)
        np.testing.assert_array_equal(feats, tiny_model.token_representation(patches))

    def test_intermediate_layer_tap(self, tiny_model, rng):
        patches = make_patches(rng, 4)
        extractor = FeatureExtractor(mode=MODEL_EMBEDDING, model=tiny_model, layer_index=0)
        feats = extract_features(extractor, patches)
        np.testing.assert_array_equal(feats, tiny_model.token_representation(patches, 0))

    def test_deterministic(self, tiny_model, rng):
        patches = make_patches(rng, 5)
        extractor = FeatureExtractor(mode=MODEL_EMBEDDING, model=tiny_model)
        a = extract_features(extractor, patches)
        b = extract_features(extractor, patches)
        assert a.tobytes() == b.tobytes()

    def test_mode_and_shape_validation(self, tiny_model, rng):
        with pytest.raises(ValidationError):
            extract_features(FeatureExtractor(mode="bogus"), np.zeros((2, 4)))
        with pytest.raises(ValidationError):
            extract_features(FeatureExtractor(mode=MODEL_EMBEDDING), np.zeros((2, 4)))
        bad = np.zeros((2, 3, 5))
        with pytest.raises(ValidationError):
            extract_features(FeatureExtractor(mode=MODEL_EMBEDDING, model=tiny_model), bad)


class TestSelection:
    def test_matches_full_sort_oracle(self, rng):
        feats = rng.normal(size=(200, 3))
        params, _ = fit_em(rng.normal(size=(50, 3)), k=2, seed=0)
        metric = construct_metric_dataset(params, feats, size=40)
        scores = log_density(params, feats)
        oracle = sorted(range(200), key=lambda i: (-scores[i], i))[:40]
        np.testing.assert_array_equal(metric.indices, oracle)
        np.testing.assert_array_equal(metric.scores, scores)

    def test_boundary_ties_prefer_lower_index(self):
        params = _unit_gmm([0.0])
        feats = np.array([[3.0], [1.0], [-1.0], [1.0], [0.0]])
        metric = construct_metric_dataset(params, feats, size=3)
        # scores: idx4 best, idx1 == idx3 == idx2 tied below; lower index wins
        np.testing.assert_array_equal(metric.indices, [4, 1, 2])

    def test_prefix_property(self, rng):
        feats = rng.normal(size=(120, 2))
        params = _unit_gmm([0.5, -0.5])
        small = construct_metric_dataset(params, feats, size=10)
        large = construct_metric_dataset(params, feats, size=60)
        np.testing.assert_array_equal(small.indices, large.indices[:10])

    def test_permutation_invariance(self, rng):
        feats = rng.normal(size=(80, 2))
        params = _unit_gmm([0.0, 0.0])
        base = construct_metric_dataset(params, feats, size=20)
        perm = rng.permutation(80)
        permuted = construct_metric_dataset(params, feats[perm], size=20)
        assert set(perm[permuted.indices].tolist()) == set(base.indices.tolist())

    def test_planted_population_recovered(self, rng):
        near = rng.normal(size=(50, 4)) * 0.5
        far = rng.normal(size=(50, 4)) * 0.5 + 10.0
        pool = np.concatenate([near, far])
        params, _ = fit_em(rng.normal(size=(100, 4)) * 0.5, k=1, seed=0)
        metric = construct_metric_dataset(params, pool, size=50)
        hits = int((metric.indices < 50).sum())
        assert hits >= 49

    def test_size_bounds(self, rng):
        feats = rng.normal(size=(10, 2))
        params = _unit_gmm([0.0, 0.0])
        assert construct_metric_dataset(params, feats, size=0).indices.size == 0
        assert construct_metric_dataset(params, feats, size=10).size == 10
        with pytest.raises(ValidationError):
            construct_metric_dataset(params, feats, size=11)

    def test_gather_aligns_arrays(self, rng):
        feats = rng.normal(size=(30, 2))
        labels = rng.integers(0, 5, size=30)
        params = _unit_gmm([0.0, 0.0])
        metric = construct_metric_dataset(params, feats, size=8)
        picked_feats, picked_labels = gather(metric, feats, labels)
        np.testing.assert_array_equal(picked_feats, feats[metric.indices])
        np.testing.assert_array_equal(picked_labels, labels[metric.indices])


class TestManifest:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        feats = rng.normal(size=(60, 3))
        params, _ = fit_em(rng.normal(size=(30, 3)), k=1, seed=0)
        metric = construct_metric_dataset(params, feats, size=15, device_id="dev_2")
        path = tmp_path / "metric.json"
        save_manifest(path, metric)
        loaded = load_manifest(path)
        assert loaded.device_id == "dev_2"
        assert loaded.size == 15
        np.testing.assert_array_equal(loaded.indices, metric.indices)
        assert loaded.scores.tobytes() == metric.scores.tobytes()

    def test_rejects_duplicate_indices(self):
        doc = {
            "version": 1,
            "device_id": "d",
            "N": 2,
            "indices": [3, 3],
            "scores": [0.0] * 5,
        }
        from taskprune.metric import MetricDataset

        with pytest.raises(ValidationError):
            MetricDataset.from_dict(doc)


class TestEmpiricalKl:
    def test_identical_samples_give_zero(self, rng):
        feats = rng.normal(size=(100, 3))
        assert empirical_kl(feats, feats) == 0.0

    def test_mismatched_distributions_positive(self, rng):
        a = rng.normal(size=(200, 2))
        b = rng.normal(size=(200, 2)) + 4.0
        assert empirical_kl(a, b) > empirical_kl(a, rng.normal(size=(200, 2)))

    def test_dimension_check(self, rng):
        with pytest.raises(ValidationError):
            empirical_kl(rng.normal(size=(10, 2)), rng.normal(size=(10, 3)))
