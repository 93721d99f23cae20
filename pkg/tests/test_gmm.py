"""Gaussian-mixture EM on raw samples."""

import numpy as np
import pytest

from rpem.core import MixtureParams
from rpem.gmm import GmmConfig, _single_fit, align_components, gmm_fit


def draw_mixture_1d(rng, n, weights, means, sds):
    comps = rng.choice(len(weights), size=n, p=weights)
    return (np.asarray(means)[comps] + np.asarray(sds)[comps] * rng.standard_normal(n))[:, None]


class TestSingleComponent:
    def test_equals_sample_moments_exactly(self, rng):
        x = rng.standard_normal((200, 3)) * [1.0, 2.0, 0.5] + [4.0, -1.0, 0.0]
        got = gmm_fit(x, GmmConfig(K=1), rng)
        np.testing.assert_array_equal(got.weights, [1.0])
        np.testing.assert_array_equal(got.means[0], x.mean(axis=0))
        d = x - x.mean(axis=0)
        np.testing.assert_array_equal(got.covariances[0], d.T @ d / len(x))


class TestTwoClusters:
    def test_separated_clusters_recovered(self, rng):
        x = np.concatenate([rng.standard_normal(500) + 0.0, rng.standard_normal(500) + 10.0])[:, None]
        got = gmm_fit(x, GmmConfig(K=2), rng)
        order = np.argsort(got.means[:, 0])
        means = got.means[order, 0]
        weights = got.weights[order]
        # labeling oracle: nearest-cluster assignment is unambiguous here
        assert abs(means[0] - 0.0) < 0.15
        assert abs(means[1] - 10.0) < 0.15
        assert abs(weights[0] - 0.5) < 0.05
        assert abs(weights[1] - 0.5) < 0.05

    def test_reference_rate_mixture_recovered(self, rng):
        # the elimination-rate coordinate of the bundled two-component truth
        x = draw_mixture_1d(rng, 20_000, [0.8, 0.2], [0.3, 0.6], [0.06, 0.06])
        got = gmm_fit(x, GmmConfig(K=2), rng)
        order = np.argsort(got.means[:, 0])
        assert abs(got.means[order[0], 0] - 0.3) < 0.02
        assert abs(got.means[order[1], 0] - 0.6) < 0.02
        assert abs(got.weights[order[0]] - 0.8) < 0.05

    def test_loglik_monotone_within_slack(self, rng):
        x = draw_mixture_1d(rng, 800, [0.6, 0.4], [0.0, 3.0], [1.0, 1.0])
        _, _, _, _, _, trace = _single_fit(x, 2, GmmConfig(K=2), rng)
        diffs = np.diff(trace)
        assert np.all(diffs >= -1e-9)

    def test_restarts_agree_up_to_label_permutation(self, rng):
        x = draw_mixture_1d(rng, 2000, [0.5, 0.5], [0.0, 6.0], [1.0, 1.0])
        a = gmm_fit(x, GmmConfig(K=2, n_init=3), np.random.default_rng(1))
        b = gmm_fit(x, GmmConfig(K=2, n_init=3), np.random.default_rng(2))
        b_aligned = align_components(b, a)
        np.testing.assert_allclose(b_aligned.means, a.means, atol=1e-4)
        np.testing.assert_allclose(b_aligned.weights, a.weights, atol=1e-4)


class TestValidation:
    def test_sample_count_precondition(self, rng):
        with pytest.raises(ValueError):
            gmm_fit(rng.standard_normal((3, 2)), GmmConfig(K=2), rng)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GmmConfig(K=0)
        with pytest.raises(ValueError):
            GmmConfig(K=1, tol=0.0)

    def test_align_components_permutes_back(self, rng):
        ref = MixtureParams(
            weights=np.array([0.7, 0.3]),
            means=np.array([[0.0, 0.0], [5.0, 5.0]]),
            covariances=np.array([np.eye(2), np.eye(2)]),
        )
        swapped = MixtureParams(
            weights=ref.weights[::-1], means=ref.means[::-1], covariances=ref.covariances[::-1]
        )
        got = align_components(swapped, ref)
        np.testing.assert_array_equal(got.means, ref.means)
        np.testing.assert_array_equal(got.weights, ref.weights)
