import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyssm import filtering as fl
from polyssm import polymodel as pm
from polyssm import systems as sy
from polyssm.errors import DegeneracyError, UsageError

import oracles as orc


def linear_spec(obs_var=1.0, state_var=0.5, init_var=1.0):
    D = pm.generate_degree_matrix(2, 1)
    A = np.array([[0.9, 0.1], [-0.2, 0.8]])
    b = np.array([0.1, -0.05])
    return sy.SsmSpec(state_cov=state_var * np.eye(2), obs_cov=obs_var * np.eye(2), init_mean=np.zeros(2),
                      init_cov=init_var * np.eye(2), dt=1.0, C=np.column_stack([b, A]), D=D,
                      noise_scale=False), A, b


# -- resampling ----------------------------------------------------------------

def test_one_hot_weights_always_pick_that_particle():
    w = np.zeros(7)
    w[4] = 1.0
    idx = fl.resample_multinomial(w, np.random.default_rng(0))
    assert np.all(idx == 4)


def test_uniform_weights_give_uniform_ancestor_counts():
    K = 50
    counts = np.zeros(K)
    rng = np.random.default_rng(1)
    for _ in range(400):
        counts += np.bincount(fl.resample_multinomial(np.full(K, 1 / K), rng), minlength=K)
    expected = 400.0
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    # 49 degrees of freedom; the 99.9% quantile is about 85
    assert chi2 < 85


def test_resampling_is_reproducible_from_seed():
    w = np.random.default_rng(2).dirichlet(np.ones(20))
    a = fl.resample_multinomial(w, np.random.default_rng(9))
    b = fl.resample_multinomial(w, np.random.default_rng(9))
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 30))
def test_resampling_never_picks_zero_weight(seed, K):
    rng = np.random.default_rng(seed)
    w = rng.random(K)
    w[rng.random(K) < 0.5] = 0.0
    if not w.any():
        w[0] = 1.0
    w = w / w.sum()
    idx = fl.resample_multinomial(w, rng)
    assert idx.shape == (K,)
    assert np.all(w[idx] > 0)


def test_resampling_rejects_bad_weights():
    with pytest.raises(ValueError):
        fl.resample_multinomial(np.array([0.5, -0.1, 0.6]), np.random.default_rng(0))
    with pytest.raises(ValueError):
        fl.resample_multinomial(np.array([0.2, 0.2]), np.random.default_rng(0))
    with pytest.raises(DegeneracyError):
        fl.resample_multinomial(np.zeros(3), np.random.default_rng(0))


# -- likelihood from weights ---------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 8))
def test_log_likelihood_matches_naive_product(seed, T, K):
    log_nu = np.random.default_rng(seed).uniform(-5, 2, size=(T, K))
    assert fl.log_likelihood_from_weights(log_nu) == pytest.approx(orc.naive_log_likelihood(log_nu), rel=1e-12,
                                                                   abs=1e-12)


def test_log_likelihood_equal_weights():
    # K equal weights of log(1/K) sum to one at every step
    K = 8
    assert fl.log_likelihood_from_weights(np.full((5, K), -math.log(K))) == pytest.approx(0.0, abs=1e-14)


def test_log_likelihood_survives_tiny_weights():
    log_nu = np.array([[-1000.0, -1001.0]])
    assert fl.log_likelihood_from_weights(log_nu) == pytest.approx(-1000.0 + math.log1p(math.exp(-1.0)))


def test_log_likelihood_all_zero_weights_names_the_step():
    log_nu = np.array([[0.0, 0.0], [-np.inf, -np.inf]])
    with pytest.raises(DegeneracyError) as info:
        fl.log_likelihood_from_weights(log_nu)
    assert info.value.step == 2


# -- filter outputs --------------------------------------------------------------

def test_normalised_weights_sum_to_one():
    spec = sy.lorenz63_spec()
    y = sy.simulate(spec, 15, 3).observations
    out = fl.sir_filter(spec, y, 64, 3)
    sums = np.exp(out.cloud.norm_log_weights).sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-12)
    assert out.cloud.particles.shape == (15, 64, 3)
    assert out.posterior_means.shape == (15, 3)


def test_step_likelihoods_sum_to_total():
    spec, _, _ = linear_spec()
    y = sy.simulate(spec, 12, 4).observations
    out = fl.sir_filter(spec, y, 40, 4)
    assert out.value == pytest.approx(out.step_log_likelihoods.sum(), rel=1e-13)


def test_posterior_mean_is_weighted_average():
    spec, _, _ = linear_spec()
    y = sy.simulate(spec, 6, 5).observations
    cl = fl.sir_filter(spec, y, 30, 5).cloud
    t = 4
    w = np.exp(cl.norm_log_weights[t - 1])
    manual = sum(w[k] * cl.particles[t - 1, k] for k in range(cl.K))
    assert np.allclose(fl.posterior_mean(cl, t), manual)
    with pytest.raises(IndexError):
        fl.posterior_mean(cl, 0)


def test_circular_posterior_mean_wraps_around():
    parts = np.array([[[math.pi - 0.1], [-math.pi + 0.1]]])
    mean = fl.weighted_means(parts, np.log(np.full((1, 2), 0.5)), circular=True)
    assert abs(abs(mean[0, 0]) - math.pi) < 1e-12


def test_diffuse_observations_give_uniform_weights():
    spec, _, _ = linear_spec(obs_var=1e12)
    y = np.zeros((5, 2))
    out = fl.sir_filter(spec, y, 25, 6)
    assert np.allclose(np.exp(out.cloud.norm_log_weights), 1 / 25, rtol=1e-9)


def test_filter_is_reproducible_from_seed():
    spec = sy.lorenz63_spec()
    y = sy.simulate(spec, 10, 7).observations
    a = fl.sir_filter(spec, y, 32, 11)
    b = fl.sir_filter(spec, y, 32, 11)
    c = fl.sir_filter(spec, y, 32, 12)
    assert a.value == b.value and np.array_equal(a.posterior_means, b.posterior_means)
    assert a.value != c.value


def test_streams_are_independent_children():
    s = fl.FilterStreams.from_seed(3)
    draws = [s.prior.random(), s.proposal.random(), s.resample.random()]
    assert len(set(draws)) == 3
    eps = orc.proposal_noise(3, 1, 4, 2)[0]
    assert np.array_equal(fl.FilterStreams.from_seed(3).proposal.standard_normal((4, 2)), eps)


def test_gradient_needs_differentiable_run():
    spec, _, _ = linear_spec()
    y = sy.simulate(spec, 3, 0).observations
    with pytest.raises(UsageError):
        fl.sir_filter(spec, y, 10, 0).gradient()


def test_input_validation():
    spec, _, _ = linear_spec()
    with pytest.raises(ValueError):
        fl.sir_filter(spec, np.zeros((4, 2)), 1, 0)
    with pytest.raises(ValueError):
        fl.sir_filter(spec, np.zeros((4, 3)), 10, 0)


def test_impossible_observation_raises_degeneracy():
    spec, _, _ = linear_spec(obs_var=1e-6, state_var=1e-6, init_var=1e-6)
    y = np.full((3, 2), 1e200)  # squared innovations overflow to inf
    with pytest.raises(DegeneracyError):
        fl.sir_filter(spec, y, 10, 0)


# -- likelihood estimator against the exact linear-Gaussian value ---------------

def test_estimator_is_unbiased_for_likelihood():
    # E[p_hat] = p: check the mean of exp(ll_hat - exact) is one
    spec, A, b = linear_spec()
    y = sy.simulate(spec, 8, 21).observations
    exact = orc.kalman_log_likelihood(A, b, spec.state_cov, spec.obs_cov, np.zeros(2), np.eye(2), y)
    ratios = np.array([math.exp(fl.sir_filter(spec, y, 200, s).value - exact) for s in range(200)])
    se = ratios.std(ddof=1) / math.sqrt(ratios.size)
    assert abs(ratios.mean() - 1.0) < 4 * se + 1e-3


def test_log_likelihood_variance_shrinks_with_particles():
    spec, A, b = linear_spec()
    y = sy.simulate(spec, 10, 22).observations
    sd = [np.std([fl.sir_filter(spec, y, K, s).value for s in range(40)]) for K in (50, 800)]
    # the standard deviation scales like 1/sqrt(K): 16x particles, about 4x smaller
    assert sd[1] < sd[0] / 2


def test_kalman_slope_in_coefficients():
    # the likelihood surface of a linear model peaks near the true coefficients
    spec, A, b = linear_spec()
    y = sy.simulate(spec, 30, 23).observations
    offsets = (-0.3, 0.0, 0.3)
    exact = []
    est = []
    for off in offsets:
        A2 = A + off * np.eye(2)
        exact.append(orc.kalman_log_likelihood(A2, b, spec.state_cov, spec.obs_cov, np.zeros(2), np.eye(2), y))
        C = np.column_stack([b, A2])
        est.append(np.mean([fl.sir_filter(spec, y, 2000, s, params=C).value for s in range(5)]))
    # differences across the grid agree with the exact ones to within 10%
    for i in (0, 2):
        assert est[i] - est[1] == pytest.approx(exact[i] - exact[1], rel=0.1)


# -- degeneracy probe --------------------------------------------------------------

def test_probe_survives_full_series_with_true_model():
    spec, _, _ = linear_spec()
    y = sy.simulate(spec, 30, 24).observations
    assert fl.degeneracy_probe(spec, y, 100, 0, C=spec.C) == 30


def test_probe_stops_early_with_wild_coefficients():
    spec, _, _ = linear_spec()
    y = sy.simulate(spec, 100, 25).observations
    C = 5.0 * np.ones_like(spec.C)  # an explosive linear map
    steps = fl.degeneracy_probe(spec, y, 100, 0, C=C)
    assert 0 <= steps < 10
