import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from wsnqcd.change_model import (ChangeSpec, NatureTrajectory, ObservationModel, batch_change_prob,
                                 kl_divergence, log_likelihood, log_likelihood_ratio, sample_change_time,
                                 sample_change_times, sample_observation)

GAUSS = ObservationModel.gaussian(0.0, 1.0, 1.0, 1.0)


def test_rho_one_always_zero():
    rng = np.random.default_rng(1)
    spec = ChangeSpec(1.0, 0.5)
    assert all(sample_change_time(spec, rng) == 0 for _ in range(200))


def test_change_spec_rejects_bad_params():
    with pytest.raises(ValueError):
        ChangeSpec(-0.1, 0.5)
    with pytest.raises(ValueError):
        ChangeSpec(0.0, 0.0)
    with pytest.raises(ValueError):
        ChangeSpec(0.0, 1.0)


def test_mean_change_time_2000_slots():
    t = sample_change_times(ChangeSpec(0.0, 0.0005), np.random.default_rng(2), 10**6)
    # sd of T is ~2000, so the standard error of the mean is ~2
    assert abs(t.mean() - 2000) < 4 * 2000 / math.sqrt(len(t))


def test_pmf_goodness_of_fit():
    spec = ChangeSpec(0.1, 0.5)
    t = sample_change_times(spec, np.random.default_rng(3), 10**5)
    ks = np.arange(0, 8)
    obs = np.array([(t == k).sum() for k in ks] + [(t >= 8).sum()])
    exp = np.append(spec.pmf(ks), spec.survival(7)) * len(t)
    assert stats.chisquare(obs, exp).pvalue > 0.01
    assert spec.pmf(1) == pytest.approx(0.45)
    assert spec.pmf(2) == pytest.approx(0.225)


def test_scalar_and_vector_samplers_share_the_law():
    spec = ChangeSpec(0.0, 0.5)
    rng = np.random.default_rng(4)
    t = np.array([sample_change_time(spec, rng) for _ in range(20000)])
    assert (t == 1).mean() == pytest.approx(0.5, abs=0.02)
    assert (t == 2).mean() == pytest.approx(0.25, abs=0.02)


def test_batch_change_prob_values():
    assert batch_change_prob(0.3, 1) == pytest.approx(0.3, abs=1e-15)
    assert batch_change_prob(0.0, 34) == 0.0
    # 1 - 0.9995**34 evaluated at high precision
    assert batch_change_prob(0.0005, 34) == pytest.approx(0.016860, abs=5e-7)
    assert batch_change_prob(0.0005, 34) == pytest.approx(0.016860495110174528, rel=1e-14)


@given(st.floats(1e-6, 0.5), st.integers(1, 40), st.integers(1, 40))
def test_batch_change_prob_composition(p, a, b):
    lhs = batch_change_prob(p, a * b)
    rhs = 1 - (1 - batch_change_prob(p, a)) ** b
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-15)


def test_batch_change_prob_rejects_fractional_period():
    with pytest.raises(ValueError):
        batch_change_prob(0.1, 2.5)


def test_log_likelihood_examples():
    assert log_likelihood_ratio(GAUSS, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert log_likelihood_ratio(GAUSS, 1.0) == pytest.approx(0.5)
    assert log_likelihood(GAUSS, 0, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi))


@pytest.mark.parametrize("model", [GAUSS, ObservationModel.gaussian(0.5, 2.0, -1.0, 0.5),
                                   ObservationModel.laplace(0.0, 1.0, 1.0, 3.0)])
def test_densities_normalised(model):
    for h in (0, 1):
        val, _ = integrate.quad(lambda x: math.exp(log_likelihood(model, h, x)), -60, 60, points=[model.loc(h)],
                                limit=200)
        assert val == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("model, expected", [(GAUSS, 0.5), (ObservationModel.gaussian(0, 1, 2, 1), 2.0),
                                             (ObservationModel.gaussian(0, 1, 0, 1), 0.0)])
def test_kl_examples(model, expected):
    assert kl_divergence(model) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("model", [ObservationModel.gaussian(0.5, 2.0, -1.0, 0.5),
                                   ObservationModel.laplace(0.0, 1.0, 1.0, 3.0),
                                   ObservationModel.laplace(1.0, 2.0, -0.5, 0.7)])
def test_kl_matches_quadrature(model):
    def f(x):
        l1 = log_likelihood(model, 1, x)
        return math.exp(l1) * (l1 - log_likelihood(model, 0, x))
    pts = sorted({model.loc(0), model.loc(1)})
    val, _ = integrate.quad(f, -80, 80, points=pts, limit=400)
    assert kl_divergence(model) == pytest.approx(val, abs=1e-6)
    assert kl_divergence(model) >= 0


def test_sample_means_clt():
    rng = np.random.default_rng(5)
    n = 10**6
    for theta, mu in ((0, 0.0), (1, 1.0)):
        x = sample_observation(GAUSS, theta, rng, n)
        assert abs(x.mean() - mu) < 4 / math.sqrt(n)


def test_uninformative_samples_indistinguishable():
    model = ObservationModel.gaussian(0.3, 2.0, 0.3, 2.0)
    rng = np.random.default_rng(6)
    a = sample_observation(model, 0, rng, 20000)
    b = sample_observation(model, 1, rng, 20000)
    assert stats.ks_2samp(a, b).pvalue > 0.01
    assert np.all(log_likelihood_ratio(model, a[:10]) == 0)


def test_laplace_scale_from_variance():
    m = ObservationModel.laplace(0.0, 2.0, 0.0, 8.0)
    assert m.scale(0) == pytest.approx(1.0)
    assert m.scale(1) == pytest.approx(2.0)
    x = sample_observation(m, 1, np.random.default_rng(7), 200000)
    assert x.var() == pytest.approx(8.0, rel=0.03)


def test_observation_model_validation():
    with pytest.raises(ValueError):
        ObservationModel.gaussian(0, 0.0, 1, 1)
    with pytest.raises(ValueError):
        ObservationModel.gaussian(math.nan, 1, 1, 1)
    with pytest.raises(ValueError):
        ObservationModel(0, 1, 1, 1, "cauchy")


def test_nature_trajectory_monotone():
    nat = NatureTrajectory(7)
    th = nat.theta_at(np.arange(20))
    assert np.all(np.diff(th) >= 0) and th[6] == 0 and th[7] == 1
    assert nat.batch_theta(1, 7) == 1 and nat.batch_theta(1, 6) == 0


@settings(max_examples=50)
@given(st.floats(-50, 50))
def test_log_likelihood_finite(x):
    for model in (GAUSS, ObservationModel.laplace()):
        assert math.isfinite(log_likelihood(model, 0, x)) and math.isfinite(log_likelihood(model, 1, x))
