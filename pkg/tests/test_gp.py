from __future__ import annotations

import itertools

import numpy as np
import pytest

from helpers import kernel_from_spec, random_spec
from misokg.gp import (
    NumericalConditioningError,
    Observation,
    PosteriorState,
    posterior_cov,
    posterior_mean,
    sigma_tilde,
    update,
)
from misokg.kernel import BaseKernel, MeanFunction, MisoKernel
from oracles import dense_posterior, miso_matrix


def random_state(rng, n, n_sources, d=2, family="se", noise_scale=0.05, zero_noise=False):
    spec = random_spec(rng, d, n_sources, family, groups=True, alpha=True)
    K = kernel_from_spec(spec)
    mean = float(rng.normal())
    src = [int(s) for s in rng.integers(0, n_sources, n)]
    X = rng.uniform(-2, 2, (n, d))
    y = rng.normal(size=n) * 2
    noise = rng.uniform(0, noise_scale, n)
    if zero_noise:
        noise[rng.random(n) < 0.3] = 0.0
    train = [(s, tuple(x)) for s, x in zip(src, X)]
    state = PosteriorState(K, MeanFunction(mean), src, X, y, noise)
    return state, spec, mean, train, list(y), list(noise)


class TestObservation:
    def test_rejects_negative_noise(self):
        with pytest.raises(ValueError):
            Observation(0, [0.0], 1.0, -1e-3)

    def test_rejects_nan_noise(self):
        with pytest.raises(ValueError):
            Observation(0, [0.0], 1.0, float("nan"))


class TestPosteriorMean:
    def test_prior(self, rng):
        K = kernel_from_spec(random_spec(rng, 2, 3))
        s = PosteriorState(K, MeanFunction(1.25))
        assert posterior_mean(s, (2, [0.3, 0.1])) == 1.25

    def test_interpolates_noise_free_observation(self, rng):
        K = kernel_from_spec(random_spec(rng, 2, 2))
        s = PosteriorState(K, MeanFunction(0.0), [1], [[0.2, -0.4]], [3.0], [0.0], jitter=0.0)
        assert posterior_mean(s, (1, [0.2, -0.4])) == pytest.approx(3.0, abs=1e-10)

    def test_three_observations_dense_oracle(self, rng):
        state, spec, mean, train, y, noise = random_state(rng, 3, 2)
        P = [(int(rng.integers(2)), tuple(rng.uniform(-2, 2, 2))) for _ in range(5)]
        mu, _ = dense_posterior(spec, mean, train, y, noise, P)
        got = [posterior_mean(state, p) for p in P]
        np.testing.assert_allclose(got, mu, atol=1e-8)


class TestPosteriorCov:
    def test_prior_is_kernel(self, rng):
        spec = random_spec(rng, 2, 3)
        K = kernel_from_spec(spec)
        s = PosteriorState(K, MeanFunction(0.0))
        p, q = (1, (0.1, 0.2)), (2, (0.5, -0.3))
        assert posterior_cov(s, p, q) == pytest.approx(miso_matrix(spec, [p], [q])[0, 0], rel=1e-13)

    def test_noise_free_observation_has_zero_variance(self, rng):
        K = kernel_from_spec(random_spec(rng, 2, 2))
        s = PosteriorState(K, MeanFunction(0.0), [1], [[0.2, -0.4]], [3.0], [0.0], jitter=0.0)
        assert abs(posterior_cov(s, (1, [0.2, -0.4]), (1, [0.2, -0.4]))) <= 1e-8

    def test_four_observations_dense_oracle(self, rng):
        state, spec, mean, train, y, noise = random_state(rng, 4, 3)
        P = [(int(rng.integers(3)), tuple(rng.uniform(-2, 2, 2))) for _ in range(4)]
        _, C = dense_posterior(spec, mean, train, y, noise, P)
        got = np.array([[posterior_cov(state, p, q) for q in P] for p in P])
        np.testing.assert_allclose(got, C, atol=1e-8)

    def test_variance_nonnegative(self, rng):
        state, *_ = random_state(rng, 15, 3, zero_noise=True)
        X = np.vstack([state.X, rng.uniform(-2, 2, (30, 2))])
        s = np.concatenate([state.sources, rng.integers(0, 3, 30)])
        assert np.all(state.variance(s, X) >= 0)


class TestUpdate:
    def test_matches_rebuild(self, rng):
        for _ in range(10):
            state, spec, mean, train, y, noise = random_state(rng, 8, 3, zero_noise=True)
            inc = PosteriorState(state.kernel, state.mean_function)
            for o in state.observations:
                inc = update(inc, o)
            X = rng.uniform(-2, 2, (10, 2))
            s = rng.integers(0, 3, 10)
            np.testing.assert_allclose(inc.mean(s, X), state.mean(s, X), atol=1e-8)
            np.testing.assert_allclose(inc.cov(s, X, s, X), state.cov(s, X, s, X), atol=1e-8)

    def test_locality(self, rng):
        K = MisoKernel(BaseKernel("se", [0.1], 1.0), [BaseKernel("se", [0.1], 0.1)])
        s = PosteriorState(K, MeanFunction(0.0), [0], [[0.0]], [1.0], [0.01])
        s2 = s.update(Observation(0, [0.05], 2.0, 0.01))
        far = np.array([[50.0]])
        assert abs(s2.mean([0], far)[0] - s.mean([0], far)[0]) < 1e-6

    def test_biased_source_informs_truth(self, rng):
        state, *_ = random_state(rng, 5, 2)
        x = rng.uniform(-2, 2, 2)
        assert state.kernel.sigma0.eval(x, x) > 0
        before = state.variance([0], x[None])[0]
        after = state.update(Observation(1, x, 0.3, 0.01)).variance([0], x[None])[0]
        assert after < before

    def test_cholesky_reconstructs_gram(self, rng):
        state, *_ = random_state(rng, 12, 3, zero_noise=True)
        s2 = state.update(Observation(2, [0.1, 0.1], 0.0, 0.0))
        from misokg.kernel import gram
        G = gram(s2.kernel, s2.sources, s2.X, s2.noise, s2.jitter)
        scale = np.sqrt(np.outer(np.diag(G), np.diag(G)))
        assert np.max(np.abs(s2.chol @ s2.chol.T - G) / scale) <= 1e-8

    def test_conditioning_error_names_observation(self):
        K = MisoKernel(BaseKernel("se", [1.0], 1.0), [BaseKernel("se", [1.0], 1.0)])
        s = PosteriorState(K, MeanFunction(0.0), [0], [[0.0]], [1.0], [0.0], jitter=0.0)
        with pytest.raises(NumericalConditioningError) as err:
            s.update(Observation(0, [0.0], 1.0, 0.0))
        assert err.value.observation.source == 0
        assert "x=[0.0]" in str(err.value)

    def test_dimension_checked(self, rng):
        state, *_ = random_state(rng, 2, 2)
        with pytest.raises(ValueError):
            state.update(Observation(0, [0.0, 0.0, 0.0], 1.0, 0.1))

    def test_repeated_observations_allowed(self, rng):
        state, *_ = random_state(rng, 3, 2)
        s2 = state.update(Observation(1, [0.5, 0.5], 1.0, 0.1)).update(Observation(1, [0.5, 0.5], 1.2, 0.1))
        assert s2.n == 5


class TestSigmaTilde:
    def test_uncorrelated_candidate(self):
        # the truth kernel is negligible, so distinct sources share nothing
        s0 = BaseKernel("se", [1.0], 1e-300)
        K = MisoKernel(s0, [BaseKernel("se", [1.0], 1.0), BaseKernel("se", [1.0], 1.0)])
        s = PosteriorState(K, MeanFunction(0.0))
        st = sigma_tilde(s, (1, [0.2]), 0.1, [(0, [0.2]), (2, [0.3]), (0, [1.0])])
        np.testing.assert_allclose(st, 0.0, atol=1e-150)

    def test_self_target(self, rng):
        state, *_ = random_state(rng, 4, 2)
        c = (1, np.array([0.3, -0.7]))
        st = state.sigma_tilde(c, 0.0, [1], c[1][None])
        var = state.variance([1], c[1][None])[0]
        # zero noise is replaced by the jitter
        assert st[0] == pytest.approx(var / np.sqrt(var + state.jitter), rel=1e-12)
        st0 = PosteriorState(state.kernel, state.mean_function, state.sources, state.X, state.y,
                             state.noise, jitter=0.0).sigma_tilde(c, 0.0, [1], c[1][None])
        assert st0[0] == pytest.approx(np.sqrt(var), rel=1e-10)

    def test_resampling_oracle(self, rng):
        state, spec, mean, train, y, noise = random_state(rng, 5, 3)
        cand = (1, tuple(rng.uniform(-2, 2, 2)))
        lam = 0.05
        targets = [(0, tuple(rng.uniform(-2, 2, 2))) for _ in range(4)] + [(0, cand[1])]
        st = sigma_tilde(state, cand, lam, targets)

        mu_c, var_c = dense_posterior(spec, mean, train, y, noise, [cand])
        n_draws = 100_000
        y_new = mu_c[0] + np.sqrt(var_c[0, 0] + lam) * rng.standard_normal(n_draws)
        # rebuild: one dense solve against every sampled data vector
        tr2 = train + [cand]
        K2 = miso_matrix(spec, tr2, tr2) + np.diag(noise + [lam])
        kT = miso_matrix(spec, targets, tr2)
        Y = np.vstack([np.repeat(np.asarray(y)[:, None], n_draws, axis=1), y_new[None]]) - mean
        means = mean + kT @ np.linalg.solve(K2, Y)
        sd = means.std(axis=1, ddof=1)
        se = sd / np.sqrt(2 * (n_draws - 1))
        assert np.all(np.abs(sd - np.abs(st)) <= 3 * se + 1e-12)

    def test_martingale(self, rng):
        state, spec, mean, train, y, noise = random_state(rng, 6, 2)
        cand = (1, np.array([0.1, 0.4]))
        target = np.array([[0.3, 0.2]])
        mu0 = state.mean([0], target)[0]
        st = state.sigma_tilde(cand, 0.02, [0], target)[0]
        z = rng.standard_normal(100_000)
        draws = mu0 + st * z
        assert abs(draws.mean() - mu0) <= 3 * draws.std(ddof=1) / np.sqrt(z.size)
        # and through an explicit update at a few sampled outcomes
        mu_c = state.mean([1], cand[1][None])[0]
        sd_c = np.sqrt(state.variance([1], cand[1][None])[0] + 0.02)
        for zk in (-1.3, 0.0, 0.7):
            s2 = state.update(Observation(1, cand[1], mu_c + sd_c * zk, 0.02))
            assert s2.mean([0], target)[0] == pytest.approx(mu0 + st * zk, abs=1e-8)


class TestSerialization:
    def test_round_trip(self, rng):
        state, *_ = random_state(rng, 6, 3)
        s2 = PosteriorState.from_dict(state.to_dict())
        X = rng.uniform(-2, 2, (5, 2))
        s = rng.integers(0, 3, 5)
        np.testing.assert_allclose(s2.mean(s, X), state.mean(s, X), rtol=1e-13)
        assert "chol" not in state.to_dict()


@pytest.mark.property
class TestGpProperties:
    def test_exchangeability(self, rng):
        state, *_ = random_state(rng, 5, 3, family="matern52")
        obs = state.observations
        X = rng.uniform(-2, 2, (6, 2))
        s = rng.integers(0, 3, 6)
        ref_m, ref_c = state.mean(s, X), state.cov(s, X, s, X)
        for perm in itertools.islice(itertools.permutations(range(5)), 0, 120, 7):
            p = PosteriorState(state.kernel, state.mean_function)
            for i in perm:
                p = p.update(obs[i])
            np.testing.assert_allclose(p.mean(s, X), ref_m, atol=1e-8)
            np.testing.assert_allclose(p.cov(s, X, s, X), ref_c, atol=1e-8)

    def test_variance_shrinkage(self, rng):
        for _ in range(20):
            state, *_ = random_state(rng, int(rng.integers(0, 10)), 3, zero_noise=True)
            X = rng.uniform(-2, 2, (25, 2))
            s = rng.integers(0, 3, 25)
            v0 = state.variance(s, X)
            o = Observation(int(rng.integers(3)), rng.uniform(-2, 2, 2), 0.0, float(rng.uniform(0, 0.1)))
            v1 = state.update(o).variance(s, X)
            assert np.all(v1 <= v0 + 1e-8)

    def test_prior_recovery(self, rng):
        state, spec, *_ = random_state(rng, 7, 3)
        prior = state.prior()
        X = rng.uniform(-2, 2, (5, 2))
        s = rng.integers(0, 3, 5)
        np.testing.assert_array_equal(prior.mean(s, X), state.mean_function.constant)
        np.testing.assert_array_equal(prior.cov(s, X, s, X), state.kernel.matrix(s, X))
