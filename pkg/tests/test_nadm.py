import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from wsnqcd import nadm
from wsnqcd.change_model import ChangeSpec, ObservationModel, batch_change_prob
from wsnqcd.config import baseline_scenario
from wsnqcd.nadm import (PosteriorDomainError, SufficientStat, UpdateMismatchError, initial_stat, pi_to_psi,
                         psi_to_pi, update)
from wsnqcd.network import E1, E2, E3, NetConfig, QueueState, SlotOutcome
from wsnqcd.streams import episode_streams

GAUSS = ObservationModel.gaussian(0.0, 1.0, 1.0, 1.0)
FLAT = ObservationModel.gaussian(0.0, 1.0, 0.0, 1.0)


def small(period=4, n=2, sigma=0.8, p=0.01, rho=0.0, obs=GAUSS):
    return baseline_scenario(period, change=ChangeSpec(rho, p), obs=obs,
                          alpha=min(0.01, 0.5 * (1 - rho))).with_net(n_sensors=n, sigma=sigma)


def test_lemma_examples():
    assert psi_to_pi(1.0, 17, 0.3) == 1.0
    assert psi_to_pi(0.37, 0, 0.3) == 0.37
    assert psi_to_pi(0.5, 1, 0.1) == pytest.approx(0.55, abs=1e-15)
    assert pi_to_psi(0.55, 1, 0.1) == pytest.approx(0.5, abs=1e-15)
    assert pi_to_psi(1.0, 5, 0.1) == 1.0


def test_pi_below_floor_is_domain_error():
    with pytest.raises(PosteriorDomainError):
        pi_to_psi(0.05, 1, 0.1)
    with pytest.raises(ValueError):
        psi_to_pi(0.5, -1, 0.1)


@given(st.floats(0, 1), st.integers(0, 40), st.floats(1e-4, 0.05))
def test_round_trip(psi, delta, p):
    assert pi_to_psi(psi_to_pi(psi, delta, p), delta, p) == pytest.approx(psi, abs=1e-12)
    assert psi_to_pi(psi, delta, p) >= psi


def _stat(delta=0, batch=1, W=(0, 0), R=(0, 0), slot=None, lam=4, pi=0.2):
    return SufficientStat(QueueState(lam, batch, delta, W, R, slot if slot is not None else batch * 4 + delta), pi)


def test_e1_update_example():
    s = _stat(delta=0, slot=5, lam=3)
    nxt = QueueState(2, 1, 0, (0, 0), (0, 0), 6)
    out = update(s, SlotOutcome(0), nxt, GAUSS, 0.1, batch_change_prob(0.1, 4))
    assert out.pi == pytest.approx(0.28, abs=1e-15)


def test_e2_update_examples():
    cfg = NetConfig(2, 4, 0.8)
    q = QueueState(4, 1, 0, (0, 0), (0, 0), 4)
    nxt = QueueState(3, 1, 1, (0, 0), (1, 0), 5)
    oc = SlotOutcome(1, ((0, 1, 1.0),), False, E2)
    out = update(SufficientStat(q, 0.5), oc, nxt, GAUSS, 0.1, 0.3439, cfg)
    post = math.exp(0.5) / (1 + math.exp(0.5))
    assert pi_to_psi(out.pi, 1, 0.1) == pytest.approx(post, abs=1e-12)
    assert post == pytest.approx(0.6225, abs=1e-4)
    flat = update(SufficientStat(q, 0.5), oc, nxt, FLAT, 0.1, 0.3439, cfg)
    assert pi_to_psi(flat.pi, 1, 0.1) == pytest.approx(0.5, abs=1e-15)


def test_e3_absorbing():
    cfg = NetConfig(1, 4, 0.8)
    q = QueueState(4, 1, 0, (0,), (0,), 4)
    nxt = QueueState(3, 2, 0, (0,), (0,), 5)
    out = update(SufficientStat(q, 1.0), SlotOutcome(1, ((0, 1, -3.0),), True, E3), nxt, GAUSS, 0.1, 0.3439, cfg)
    assert out.pi == 1.0


def _e3_direct(psi, y0, ys, delta, period, p, model):
    """Three-term completion posterior straight from densities."""
    f0 = lambda x: stats.norm.pdf(x, model.pre_mean, math.sqrt(model.pre_var))
    f1 = lambda x: stats.norm.pdf(x, model.post_mean, math.sqrt(model.post_var))
    q = 1 - (1 - p) ** min(period, delta + 1)
    p0 = np.prod([f0(y) for y in ys]) if ys else 1.0
    p1 = np.prod([f1(y) for y in ys]) if ys else 1.0
    num = (1 - psi) * q * f0(y0) * p1 + psi * f1(y0) * p1
    den = num + (1 - psi) * (1 - q) * f0(y0) * p0
    return num / den


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(-2, 3), st.lists(st.floats(-2, 3), max_size=3), st.integers(3, 12))
def test_e3_log_domain_matches_direct(psi, y0, ys, delta):
    from wsnqcd import _kernels as kern
    model = ObservationModel.gaussian(0.0, 1.0, 0.8, 1.5)
    from wsnqcd.change_model import log_likelihood_ratio
    got = kern.completion_step(psi, float(log_likelihood_ratio(model, y0)),
                               float(sum(log_likelihood_ratio(model, y) for y in ys)), delta, 4, 0.05)
    assert got == pytest.approx(_e3_direct(psi, y0, ys, delta, 4, 0.05, model), abs=1e-9)


def test_update_on_stopped_stat_is_identity():
    s = SufficientStat(QueueState(4, 1, 0, (0,), (0,), 4), 0.9, stopped=True)
    assert update(s, SlotOutcome(1, ((0, 1, 1.0),), True, E3), QueueState(3, 2, 0, (0,), (0,), 5),
                  GAUSS, 0.1, 0.3439) is s


def test_update_rejects_inconsistent_outcomes():
    q = QueueState(4, 1, 0, (0, 0), (0, 0), 4)
    with pytest.raises(UpdateMismatchError):
        update(SufficientStat(q, 0.2), SlotOutcome(1, ((0, 1, 1.0),), False, E1),
               QueueState(3, 1, 1, (0, 0), (0, 0), 5), GAUSS, 0.1, 0.3439)
    with pytest.raises(UpdateMismatchError):
        update(SufficientStat(q, 0.2), SlotOutcome(1, ((0, 1, 1.0),), False, E2),
               QueueState(3, 1, 1, (0, 0), (1, 0), 9), GAUSS, 0.1, 0.3439)
    with pytest.raises(UpdateMismatchError):
        update(SufficientStat(q, 0.2), SlotOutcome(1, ((0, 3, 1.0),), False, E2),
               QueueState(3, 1, 1, (0, 0), (1, 0), 5), GAUSS, 0.1, 0.3439)


@given(st.floats(0, 1), st.floats(1e-4, 0.5))
def test_prior_drift_monotone(pi, p):
    s = SufficientStat(QueueState(3, 1, 0, (0,), (0,), 1), pi)
    out = update(s, SlotOutcome(0), QueueState(2, 1, 0, (0,), (0,), 2), GAUSS, p, p)
    assert out.pi >= pi
    assert (out.pi == pi) == (pi == 1.0) or out.pi - pi < 1e-15


@pytest.mark.parametrize("scn", [small(), small(period=3, n=3, sigma=0.95, p=0.02),
                                 baseline_scenario(34, change=ChangeSpec(0.0, 0.005))])
def test_kernel_matches_reference(scn):
    for e in range(3):
        tr = nadm.trace(scn, 600, episode_streams(9, 4, e))
        T, pi, ev = nadm.kernel_trace(scn, 600, episode_streams(9, 4, e))
        assert T == tr.T
        assert np.array_equal(ev, tr.events)
        np.testing.assert_allclose(pi, tr.pi, rtol=0, atol=1e-12)


def test_every_slot_has_one_event_class():
    _, _, ev = nadm.kernel_trace(small(), 2000, episode_streams(1, 4, 0))
    assert set(np.unique(ev)) <= {E1, E2, E3} and len(ev) == 2000


@pytest.mark.parametrize("rho", [0.0, 0.3])
def test_uninformative_collapse_reference_and_kernel(rho):
    scn = small(obs=FLAT, rho=rho, p=0.0005)
    tr = nadm.trace(scn, 500, episode_streams(2, 4, 0))
    _, pi, _ = nadm.kernel_trace(scn, 10_000, episode_streams(2, 4, 0))
    k = np.arange(10_001)
    exact = math.log1p(-rho) + k * math.log1p(-scn.change.p)
    assert np.max(np.abs(np.log1p(-pi) - exact)) < 1e-9
    assert np.max(np.abs(np.log1p(-tr.pi) - exact[:501])) < 1e-9


def test_uninformative_stop_time_closed_form():
    scn = small(obs=FLAT)
    gamma = 0.6
    tau = math.ceil(math.log(1 - gamma) / math.log1p(-scn.change.p))
    for i in range(5):
        e = nadm.run_episode(scn, gamma, episode_streams(3, 2, i))
        assert e.tau == tau
        assert e.false_alarm == (tau < e.T) and e.delay == max(tau - e.T, 0)


def test_gamma_below_prior_stops_at_zero():
    scn = small(rho=0.4)
    for i in range(5):
        e = nadm.run_episode(scn, 0.3, episode_streams(4, 2, i))
        assert e.tau == 0 and e.delay == 0


def test_episode_reproducible_and_delay_rule():
    scn = small()
    a = [nadm.run_episode(scn, 0.95, episode_streams(5, 2, i)) for i in range(30)]
    assert a == [nadm.run_episode(scn, 0.95, episode_streams(5, 2, i)) for i in range(30)]
    for e in a:
        assert (e.delay == 0) == (e.false_alarm or e.tau == e.T)
    # a bare Generator is accepted and split into the three streams
    assert isinstance(nadm.run_episode(scn, 0.95, np.random.default_rng(0)), nadm.NadmEpisode)


def test_pre_change_max_matches_stop_rule():
    scn = small()
    for i in range(40):
        T, m = nadm.pre_change_max(scn, episode_streams(6, 1, i))
        e = nadm.run_episode(scn, 0.9, episode_streams(6, 1, i))
        assert e.T == T
        assert e.false_alarm == (m >= 0.9)


def test_initial_stat():
    s = initial_stat(NetConfig(2, 4, 0.5), 0.1)
    assert s.pi == 0.1 and s.queue.slot == 0 and not s.stopped


def test_sufficient_statistic_calibration():
    scn = small(p=0.01, obs=ObservationModel.gaussian(0, 1, 0.5, 1))
    buckets = nadm.verify_sufficient_stat_consistency(scn, 1200, 300, seed=1)
    mid = [b for b in buckets if b.lo == 0.45][0]
    assert mid.visits >= 10_000
    assert 0.45 <= mid.freq <= 0.55 or mid.consistent
    assert mid.consistent
    top = buckets[-1]
    assert top.lo > 0.99 and top.freq == 1.0
    assert all(b.consistent for b in buckets)
