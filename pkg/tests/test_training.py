import csv
import math

import numpy as np
import pytest

from cfee.gnn import Architecture, flatten_policy, init_policy, unflatten_policy
from cfee.objective import sum_ee
from cfee.scenario import Dataset, SystemParams, generate_dataset
from cfee.training import (
    METRIC_COLUMNS,
    NormalizationParams,
    TrainConfig,
    TrainingError,
    evaluate_policy,
    init_state,
    load_train_state,
    lr_at,
    midpoint_power,
    next_batch,
    normalize,
    save_train_state,
    train,
    train_step,
)

SMALL = SystemParams(n_aps=3, n_ues=3)
ARCH = Architecture(n_layers=2, sinr_depth=2, hidden=8)


def cfg(**kw):
    base = dict(total_iterations=20, batch_size=8, arch=ARCH, eval_every=5, monitor_size=16)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SMALL, 40, 3)


def same_params(p, q):
    return all(np.array_equal(x, y) for x, y in zip(flatten_policy(p), flatten_policy(q)))


def test_normalize_examples():
    x = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(normalize(x, NormalizationParams(0.0, 1.0)), x)
    assert normalize(2.5e-9, NormalizationParams()) == pytest.approx(24.9)
    c = normalize(np.full(4, 7e-10), NormalizationParams())
    assert np.all(c == c[0])


def test_normalization_needs_positive_sigma():
    with pytest.raises(ValueError):
        NormalizationParams(0.0, 0.0)


def test_lr_schedule_endpoints():
    c = TrainConfig(total_iterations=1000)
    assert lr_at(0, c) == pytest.approx(1e-3)
    assert lr_at(1000, c) == pytest.approx(1e-7)
    assert lr_at(500, c) == pytest.approx(1e-5)


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(lr_final=1e-2), dict(mc_samples=0), dict(p_max=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_train_step_is_pure_and_deterministic(data):
    c = cfg()
    state = init_state(c)
    before = [a.copy() for a in flatten_policy(state.policy)]
    batch = data.gains(range(8))
    s1, m1 = train_step(state, batch, c, SMALL)
    s2, m2 = train_step(state, batch, c, SMALL)
    assert same_params(s1.policy, s2.policy) and m1 == m2
    assert all(np.array_equal(x, y) for x, y in zip(before, flatten_policy(state.policy)))
    assert state.iteration == 0 and s1.iteration == 1
    assert not same_params(s1.policy, state.policy)
    assert set(m1) == {"loss_L", "mean_ee_bit_per_joule", "psi", "kappa", "lr"}


def test_train_step_rejects_empty_batch():
    c = cfg()
    with pytest.raises(ValueError):
        train_step(init_state(c), np.zeros((0, 3, 3, 3)), c, SMALL)


def test_zero_gain_batch_only_shrinks_support():
    c = cfg(kappa_window=5)
    state = init_state(c)
    zeros = np.zeros((4, 3, 3, 3))
    psis = []
    for _ in range(40):
        state, m = train_step(state, zeros, c, SMALL)
        psis.append(m["psi"])
        assert m["mean_ee_bit_per_joule"] == 0.0
    assert all(b <= a for a, b in zip(psis, psis[1:]))
    assert psis[-1] < psis[0]


def test_non_finite_loss_names_the_sample(data):
    c = cfg()
    batch = data.gains(range(4)).copy()
    batch[2, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="sample 2"):
        train_step(init_state(c), batch, c, SMALL)


def test_zero_iterations_returns_initial_params(data):
    c = cfg(total_iterations=0)
    res = train(c, data)
    assert same_params(res.policy, init_state(c).policy)
    assert res.metrics == []


def test_metrics_rows_and_columns(tmp_path, data):
    path = tmp_path / "m.csv"
    res = train(cfg(total_iterations=23, eval_every=5), data, metrics_path=path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == math.ceil(23 / 5) == len(res.metrics)
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [int(r["iteration"]) for r in rows] == [0, 5, 10, 15, 20]
    assert all(float(r["kappa"]) >= 0 for r in rows)


def test_training_is_deterministic(data):
    a = train(cfg(), data)
    b = train(cfg(), data)
    assert same_params(a.policy, b.policy) and a.metrics == b.metrics
    c = train(cfg(seed=1), data)
    assert not same_params(a.policy, c.policy)


def test_resume_matches_uninterrupted_run(tmp_path, data):
    c = cfg(total_iterations=14)
    full = train(c, data)
    # the LR schedule depends on the total, so the first half runs under the same config
    half = init_state(c)
    for _ in range(7):
        idx = next_batch(half, len(data), c.batch_size)
        half, _ = train_step(half, data.gains(idx), c, SMALL)
    save_train_state(half, tmp_path / "h.npz")
    state = load_train_state(tmp_path / "h.npz", c)
    assert state.iteration == 7
    resumed = train(c, data, state=state)
    assert resumed.state.iteration == 14
    assert same_params(resumed.state.policy, full.state.policy)


def test_checkpoint_written_for_best(tmp_path, data):
    from cfee.gnn import load_checkpoint

    path = tmp_path / "best.cfpm"
    res = train(cfg(), data, checkpoint_path=path)
    back = load_checkpoint(path)
    assert same_params(back, res.best_policy)
    assert evaluate_policy(back, data.gains()[:16], SMALL, NormalizationParams())[0] == pytest.approx(res.best_ee)


def test_evaluate_zero_heads_midpoint():
    policy = init_policy(np.random.default_rng(0), ARCH, p_max=1.0)
    policy = unflatten_policy(policy, [np.zeros_like(a) for a in flatten_policy(policy)])
    d = generate_dataset(SMALL, 3, 0)
    mean, per = evaluate_policy(policy, d, SMALL, NormalizationParams())
    P = np.full((3, 3), 5 / 8)
    assert np.allclose(per, [sum_ee(s, P, SMALL) for s in d.samples], rtol=1e-14)


def test_evaluate_zero_gain_sample():
    policy = init_policy(np.random.default_rng(0), ARCH)
    mean, per = evaluate_policy(policy, np.zeros((1, 3, 3, 3)), SMALL, NormalizationParams())
    assert mean == 0.0 and per.tolist() == [0.0]


def test_evaluate_is_order_independent(data):
    policy = init_policy(np.random.default_rng(1), ARCH)
    g = data.gains()
    m1, _ = evaluate_policy(policy, g, SMALL, NormalizationParams(), chunk=7)
    m2, _ = evaluate_policy(policy, g[::-1], SMALL, NormalizationParams(), chunk=7)
    assert m1 == pytest.approx(m2, rel=1e-14)


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate_policy(init_policy(np.random.default_rng(0), ARCH), Dataset(SMALL, []), SMALL, NormalizationParams())


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(cfg(), Dataset(SMALL, []))


def test_serve_threshold_forces_zero_power():
    p = SystemParams(n_aps=3, n_ues=3, serve_threshold=-75.0)
    d = generate_dataset(p, 16, 0)
    policy = init_policy(np.random.default_rng(0), ARCH)
    P = midpoint_power(policy, d.gains(), p, NormalizationParams())
    diag = np.swapaxes(np.diagonal(d.gains(), axis1=-2, axis2=-1), -1, -2)  # (n, K, L)
    weak = 10 * np.log10(diag) < -75.0
    assert weak.any() and (~weak).any()
    assert np.all(P[weak] == 0) and np.all(P[~weak] > 0)
