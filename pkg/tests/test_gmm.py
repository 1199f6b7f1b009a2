import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from taskprune.errors import ValidationError
from taskprune.gmm import (
    VARIANCE_FLOOR,
    GmmParams,
    bic_parameter_count,
    fit_em,
    load_params,
    log_density,
    responsibilities,
    save_params,
    select_k_bic,
)


def _two_blob_data(rng, n_per=200, gap=8.0, dim=2):
    a = rng.normal(size=(n_per, dim)) + gap / 2
    b = rng.normal(size=(n_per, dim)) - gap / 2
    return np.concatenate([a, b])


class TestFit:
    def test_single_component_closed_form(self, rng):
        x = rng.normal(size=(50, 3)) * 2.0 + 1.0
        params, report = fit_em(x, k=1, seed=0)
        np.testing.assert_allclose(params.weights, [1.0], atol=1e-12)
        np.testing.assert_allclose(params.means[0], x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(params.variances[0], x.var(axis=0), atol=1e-12)
        assert report.converged

    def test_recovers_planted_means(self, rng):
        x = _two_blob_data(rng)
        params, _ = fit_em(x, k=2, seed=1)
        got = sorted(params.means[:, 0])
        assert abs(got[0] - (-4.0)) < 0.2
        assert abs(got[1] - 4.0) < 0.2
        np.testing.assert_allclose(params.weights, [0.5, 0.5], atol=0.05)

    def test_log_likelihood_non_decreasing(self, rng):
        x = rng.normal(size=(120, 4)) @ rng.normal(size=(4, 4))
        for k in (1, 2, 4):
            _, report = fit_em(x, k=k, seed=3)
            curve = np.asarray(report.log_likelihood)
            assert np.all(np.diff(curve) >= -1e-9 * np.abs(curve[:-1]))

    def test_repeated_points_hit_variance_floor(self):
        x = np.tile([[1.0, -2.0]], (30, 1))
        params, report = fit_em(x, k=1, seed=0)
        np.testing.assert_array_equal(params.variances, VARIANCE_FLOOR)
        assert np.all(np.isfinite(params.means))

    def test_seed_determinism(self, rng):
        x = _two_blob_data(rng, n_per=60)
        a, _ = fit_em(x, k=3, seed=9)
        b, _ = fit_em(x, k=3, seed=9)
        assert a.means.tobytes() == b.means.tobytes()
        assert a.weights.tobytes() == b.weights.tobytes()

    def test_scale_equivariance(self, rng):
        x = _two_blob_data(rng, n_per=80)
        base, _ = fit_em(x, k=2, seed=4)
        scaled, _ = fit_em(2.0 * x, k=2, seed=4)
        np.testing.assert_allclose(scaled.means, 2.0 * base.means, rtol=1e-6)
        np.testing.assert_allclose(scaled.variances, 4.0 * base.variances, rtol=1e-6)

    def test_rejects_bad_inputs(self, rng):
        with pytest.raises(ValidationError):
            fit_em(rng.normal(size=(3, 2)), k=5)
        with pytest.raises(ValidationError):
            fit_em(np.array([[1.0, np.nan]]), k=1)
        with pytest.raises(ValidationError):
            fit_em(rng.normal(size=(10, 2)), k=0)
        with pytest.raises(ValidationError):
            fit_em(rng.normal(size=10), k=1)


class TestDensity:
    def _random_params(self, rng, k=3, dim=2):
        means = rng.normal(size=(k, dim)) * 3
        variances = rng.uniform(0.5, 2.0, size=(k, dim))
        weights = rng.uniform(0.2, 1.0, size=k)
        weights /= weights.sum()
        return GmmParams(weights=weights, means=means, variances=variances)

    def test_matches_scipy_norm_oracle(self, rng):
        params = self._random_params(rng)
        x = rng.normal(size=(20, 2)) * 4
        per_comp = np.stack(
            [
                stats.norm.logpdf(x, loc=params.means[k], scale=np.sqrt(params.variances[k])).sum(axis=1)
                for k in range(3)
            ],
            axis=1,
        )
        expected = logsumexp(per_comp + np.log(params.weights), axis=1)
        np.testing.assert_allclose(log_density(params, x), expected, atol=1e-10)

    def test_density_integrates_to_one(self):
        params = GmmParams(
            weights=np.array([0.3, 0.7]),
            means=np.array([[-2.0], [3.0]]),
            variances=np.array([[0.5], [2.0]]),
        )
        grid = np.linspace(-30.0, 30.0, 20001)[:, None]
        mass = np.trapezoid(np.exp(log_density(params, grid)), grid[:, 0])
        assert abs(mass - 1.0) < 1e-4

    def test_symmetric_point_splits_evenly(self):
        params = GmmParams(
            weights=np.array([0.5, 0.5]),
            means=np.array([[1.5], [-1.5]]),
            variances=np.array([[0.8], [0.8]]),
        )
        resp = responsibilities(params, np.array([0.0]))
        assert resp[0] == resp[1]
        np.testing.assert_allclose(resp, 0.5, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        params = self._random_params(rng)
        resp = responsibilities(params, rng.normal(size=(40, 2)))
        np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-12)

    def test_scalar_form(self, rng):
        params = self._random_params(rng)
        single = log_density(params, np.array([0.5, -0.5]))
        batch = log_density(params, np.array([[0.5, -0.5]]))
        assert isinstance(single, float)
        assert single == batch[0]

    def test_dimension_mismatch(self, rng):
        params = self._random_params(rng)
        with pytest.raises(ValidationError):
            log_density(params, np.zeros((4, 5)))


class TestSelection:
    def test_bic_picks_planted_component_count(self, rng):
        centers = np.array([[-8.0, 0.0], [0.0, 8.0], [8.0, 0.0]])
        x = np.concatenate([rng.normal(size=(150, 2)) + c for c in centers])
        params, chosen, bics = select_k_bic(x, range(2, 6), seed=0)
        assert chosen == 3
        assert params.n_components == 3
        assert len(bics) == 4
        assert bics[1] == min(bics)

    def test_singleton_range(self, rng):
        x = rng.normal(size=(40, 2))
        params, chosen, bics = select_k_bic(x, [2], seed=0)
        assert chosen == 2
        assert len(bics) == 1

    def test_failed_k_recorded_as_inf(self, rng):
        x = rng.normal(size=(5, 2))
        _, chosen, bics = select_k_bic(x, [2, 50], seed=0)
        assert chosen == 2
        assert bics[1] == math.inf

    def test_all_failures_aggregate(self, rng):
        x = rng.normal(size=(3, 2))
        with pytest.raises(ValidationError, match="all mixture fits failed"):
            select_k_bic(x, [10, 20], seed=0)

    def test_bic_formula(self, rng):
        x = rng.normal(size=(64, 3))
        _, report = fit_em(x, k=2, seed=0)
        expected = -2.0 * report.log_likelihood[-1] + bic_parameter_count(2, 3) * math.log(64)
        assert report.bic == expected
        assert bic_parameter_count(2, 3) == 1 + 2 * 2 * 3


class TestWire:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        x = _two_blob_data(rng, n_per=50)
        params, _ = fit_em(x, k=2, seed=6)
        path = tmp_path / "gmm.json"
        save_params(path, params)
        loaded = load_params(path)
        assert loaded.means.tobytes() == params.means.tobytes()
        assert loaded.variances.tobytes() == params.variances.tobytes()
        assert loaded.weights.tobytes() == params.weights.tobytes()
        assert loaded.seed == params.seed

    def test_from_dict_cross_checks(self, rng):
        params = GmmParams(
            weights=np.array([1.0]),
            means=np.zeros((1, 2)),
            variances=np.ones((1, 2)),
        )
        doc = params.to_dict()
        doc["K"] = 3
        with pytest.raises(ValidationError):
            GmmParams.from_dict(doc)

    def test_validate_rejects_bad_weights(self):
        params = GmmParams(
            weights=np.array([0.6, 0.6]),
            means=np.zeros((2, 2)),
            variances=np.ones((2, 2)),
        )
        with pytest.raises(ValidationError):
            params.validate()
