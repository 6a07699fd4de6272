import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfee import autodiff as ad
from cfee.objective import (
    KappaState,
    SupportBounds,
    draw_uniform,
    ee_per_user,
    stochastic_objective,
    sum_ee,
    support_penalty,
    update_kappa,
)
from cfee.scenario import SystemParams, generate_sample, sample_rng
from oracles import ee_straight_line

UNIT = SystemParams(n_aps=1, n_ues=1, noise_power=1.0, bandwidth=1.0)


def random_instance(r, K, L):
    gains = r.lognormal(-20, 2, size=(L, K, K))
    P = r.uniform(0, 1, size=(K, L)) * (r.uniform(size=(K, L)) > 0.2)
    return gains, P


def test_zero_power_gives_zero():
    g = generate_sample(SystemParams(n_aps=3, n_ues=4), sample_rng(0, 0))
    assert sum_ee(g, np.zeros((4, 3)), SystemParams(n_aps=3, n_ues=4)) == 0.0


def test_single_link_value():
    assert sum_ee(np.ones((1, 1, 1)), np.ones((1, 1)), UNIT) == pytest.approx(0.2, rel=1e-15)


def test_matches_straight_line_evaluator():
    r = np.random.default_rng(0)
    p = SystemParams(bandwidth=10e6)
    for _ in range(50):
        K, L = int(r.integers(1, 6)), int(r.integers(1, 5))
        gains, P = random_instance(r, K, L)
        ref = ee_straight_line(gains, P, p.noise_power, p.amp_inefficiency, p.static_power, p.bandwidth)
        assert sum_ee(gains, P, p) == pytest.approx(ref, rel=1e-12, abs=0)


def test_batch_evaluation_matches_single():
    r = np.random.default_rng(1)
    p = SystemParams()
    gains = np.stack([random_instance(r, 3, 2)[0] for _ in range(4)])
    P = r.uniform(size=(4, 3, 2))
    batch = sum_ee(gains, P, p)
    assert batch.shape == (4,)
    assert np.allclose(batch, [sum_ee(g, q, p) for g, q in zip(gains, P)], rtol=1e-14)


def test_negative_power_rejected():
    with pytest.raises(ValueError):
        sum_ee(np.ones((1, 1, 1)), -np.ones((1, 1)), UNIT)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        sum_ee(np.ones((2, 3, 3)), np.ones((3, 3)), SystemParams())


def test_bandwidth_override_scales_linearly():
    r = np.random.default_rng(2)
    g, P = random_instance(r, 3, 2)
    p = SystemParams()
    assert sum_ee(g, P, p) == pytest.approx(p.bandwidth * sum_ee(g, P, p, 1.0), rel=1e-14)


def test_per_user_sums_to_total():
    r = np.random.default_rng(3)
    g, P = random_instance(r, 4, 3)
    p = SystemParams()
    assert ee_per_user(g, P, p).data.sum() == pytest.approx(sum_ee(g, P, p), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(K=st.integers(1, 5), L=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_permutation_invariance(K, L, seed):
    r = np.random.default_rng(seed)
    g, P = random_instance(r, K, L)
    p = SystemParams()
    base = sum_ee(g, P, p)
    pi, sigma = r.permutation(K), r.permutation(L)
    g_ue = g[:, pi][:, :, pi]
    assert sum_ee(g_ue, P[pi], p) == pytest.approx(base, rel=1e-12)
    assert sum_ee(g[sigma], P[:, sigma], p) == pytest.approx(base, rel=1e-12)
    assert base >= 0


def test_support_penalty_examples():
    assert support_penalty(SupportBounds(np.zeros((2, 3)), np.zeros((2, 3)))) == 0.0
    assert support_penalty(SupportBounds(np.zeros((2, 3)), np.ones((2, 3)))) == 6.0
    w = np.zeros((2, 3))
    w[1, 2] = 0.25
    assert support_penalty(SupportBounds(np.zeros((2, 3)), w)) == 0.25


def test_support_bounds_helpers():
    b = SupportBounds(np.full((1, 1), 0.2), np.full((1, 1), 0.4))
    assert b.b[0, 0] == pytest.approx(0.6) and b.midpoint[0, 0] == pytest.approx(0.4)


def test_batched_penalty_tensor():
    w = np.arange(12.0).reshape(2, 2, 3)
    assert support_penalty(w).data.tolist() == [15.0, 51.0]


def test_zero_width_objective_is_deterministic():
    r = np.random.default_rng(4)
    g, a = random_instance(r, 3, 2)
    p = SystemParams()
    for M in (1, 5, 50):
        loss, P = stochastic_objective(g, a, np.zeros_like(a), 0.7, M, rng=r, params=p, bandwidth=1.0)
        assert float(loss.data) == pytest.approx(sum_ee(g, a, p, 1.0), rel=1e-14)
        assert P.shape == (M, 3, 2)


def test_penalty_only_for_zero_gains():
    loss, _ = stochastic_objective(np.zeros((1, 1, 1)), np.zeros((1, 1)), np.ones((1, 1)), 1.0, 8,
                                   rng=np.random.default_rng(0), params=UNIT)
    assert float(loss.data) == -1.0


def test_monte_carlo_matches_quadrature():
    p = SystemParams(n_aps=1, n_ues=1)
    g = np.full((1, 1, 1), 3e-9)
    a, w = 0.05, 0.6
    M = 10_000
    loss, P = stochastic_objective(g, np.full((1, 1), a), np.full((1, 1), w), 0.0, M,
                                   rng=np.random.default_rng(5), params=p, bandwidth=1.0)
    vals = np.atleast_1d(sum_ee(g[None], P, p, 1.0))
    se = vals.std(ddof=1) / math.sqrt(M)
    x = np.linspace(a, a + w, 10_000)
    J = np.array([sum_ee(g, np.full((1, 1), xi), p, 1.0) for xi in x])
    quad = np.trapezoid(J, x) / w
    assert abs(float(loss.data) - quad) < 3 * se


def test_draws_flow_through_gradient():
    # with fixed draws u, d/da E[J] is the mean of dJ/dp at the drawn points
    p = SystemParams(n_aps=1, n_ues=1)
    g = np.full((1, 1, 1), 2e-9)
    u = np.random.default_rng(6).uniform(size=(4, 1, 1))
    tape = ad.Tape()
    a, w = tape.leaf(np.full((1, 1), 0.1)), tape.leaf(np.full((1, 1), 0.3))
    loss, P = stochastic_objective(g, a, w, 0.0, 4, params=p, bandwidth=1.0, u=u)
    ga, gw = tape.gradient(loss, [a, w])
    assert np.allclose(P[:, 0, 0], 0.1 + 0.3 * u[:, 0, 0])
    eps = 1e-7
    d = [(sum_ee(g, np.full((1, 1), q + eps), p, 1.0) - sum_ee(g, np.full((1, 1), q - eps), p, 1.0)) / (2 * eps)
         for q in P[:, 0, 0]]
    assert ga[0, 0] == pytest.approx(np.mean(d), rel=1e-6)
    assert gw[0, 0] == pytest.approx(np.mean(np.array(d) * u[:, 0, 0]), rel=1e-6)


def test_objective_requires_samples_and_params():
    with pytest.raises(ValueError):
        stochastic_objective(np.zeros((1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 0.0, 0,
                             rng=np.random.default_rng(0), params=UNIT)
    with pytest.raises(TypeError):
        stochastic_objective(np.zeros((1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 0.0, 1)


def test_draw_uniform_shape():
    u = draw_uniform(np.random.default_rng(0), (5, 3, 2), 7)
    assert u.shape == (5, 7, 3, 2) and u.min() >= 0 and u.max() < 1


# kappa rule


def test_kappa_zero_during_warmup():
    s = KappaState(kappa=0.5, window=10, psi_history=(9.0, 9.0), iteration=3)
    assert update_kappa(s, 100.0).kappa == 0.0


def test_kappa_zero_for_first_h_iterations_exactly():
    s = KappaState(window=5)
    ks = []
    for psi in [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]:
        s = update_kappa(s, psi)
        ks.append(s.kappa)
    assert ks[:5] == [0.0] * 5
    assert ks[5] == 0.001  # i = 6 > h, flat history -> tie -> increase
    assert ks[6] == 0.002


def test_kappa_tie_increases():
    s = KappaState(kappa=0.01, delta_kappa=0.001, window=2, psi_history=(0.4, 0.6), iteration=3)
    assert update_kappa(s, 0.5).kappa == 0.01 + 0.001


def test_kappa_decrease_floors_at_zero():
    s = KappaState(kappa=0.0003, delta_kappa=0.001, window=2, psi_history=(0.8, 1.0), iteration=3)
    assert update_kappa(s, 0.5).kappa == 0.0


def test_kappa_decrease_by_half_step():
    s = KappaState(kappa=0.01, delta_kappa=0.001, window=2, psi_history=(0.8, 1.0), iteration=3)
    assert update_kappa(s, 0.5).kappa == 0.01 - 0.0005


def test_kappa_history_is_bounded_and_iteration_advances():
    s = KappaState(window=3)
    for psi in range(6):
        s = update_kappa(s, float(psi))
    assert s.psi_history == (3.0, 4.0, 5.0)
    assert s.iteration == 7


def test_kappa_uses_history_before_appending():
    # mean of the previous window (1, 1) <= 2 -> increase, even though mean(1, 2) would also be <= 2
    s = KappaState(kappa=0.0, window=2, psi_history=(1.0, 1.0), iteration=3)
    assert update_kappa(s, 2.0).kappa == 0.001
    # mean of the previous window (3, 3) > 2 -> decrease
    s = KappaState(kappa=0.002, window=2, psi_history=(3.0, 3.0), iteration=3)
    assert update_kappa(s, 2.0).kappa == 0.0015


def test_kappa_state_validation():
    with pytest.raises(ValueError):
        KappaState(kappa=-1.0)
    with pytest.raises(ValueError):
        KappaState(delta_kappa=0.0)
    with pytest.raises(ValueError):
        KappaState(window=2, psi_history=(1.0, 2.0, 3.0))
    with pytest.raises(ValueError):
        update_kappa(KappaState(), -0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=300), st.integers(1, 20))
def test_kappa_never_negative(psis, h):
    s = KappaState(window=h)
    for i, psi in enumerate(psis, start=1):
        s = update_kappa(s, psi)
        assert s.kappa >= 0
        if i <= h:
            assert s.kappa == 0.0
