import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vfplan import autodiff as ad
from vfplan.cost import (CostConfig, CostError, DEFAULT_WEIGHTS, ade_distribution, effective_weights, entropy,
                         init_cost, inverse_softplus, raw_measurements, raw_measurements_batch, selection_loss,
                         trajectory_cost)
from vfplan.dynamics import EgoState, ControlSequence, Trajectory, VehicleParams, rollout_bicycle, rollout_states

VP = VehicleParams()
DT = 0.1


def _uniform(T=20, v=10.0):
    return rollout_bicycle(EgoState(0, 0, 0, v), ControlSequence(np.zeros(T), np.zeros(T)), VP)


def test_uniform_motion_matching_field_zero():
    traj = _uniform()
    assert np.array_equal(raw_measurements(traj, np.tile([10.0, 0.0], (20, 1))), np.zeros(5))


def test_uniform_motion_zero_field():
    traj = _uniform(T=20)
    np.testing.assert_allclose(raw_measurements(traj, np.zeros((20, 2))), [0, 0, 0, 0, 20 * 100.0], atol=1e-9)


def _loop_D(states, adv, dt):
    T = len(states) - 1
    acc = [(states[t + 1, 3] - states[t, 3]) / dt for t in range(T)]
    yr = []
    for t in range(T):
        d = (states[t + 1, 2] - states[t, 2] + np.pi) % (2 * np.pi) - np.pi
        yr.append(d / dt)
    jerk = [(acc[t + 1] - acc[t]) / dt for t in range(T - 1)]
    ya = [(yr[t + 1] - yr[t]) / dt for t in range(T - 1)]
    vd = 0.0
    for t in range(1, T + 1):
        v = np.array([states[t, 3] * np.cos(states[t, 2]), states[t, 3] * np.sin(states[t, 2])])
        vd += np.sum((v - adv[t - 1]) ** 2)
    return np.array([sum(a * a for a in acc), sum(j * j for j in jerk), sum(y * y for y in yr),
                     sum(a * a for a in ya), vd])


def test_raw_measurements_loop_oracle():
    rng = np.random.default_rng(0)
    st_ = rollout_states([1, 2, 0.3, 6], np.column_stack([rng.uniform(-3, 3, 30), rng.uniform(-.3, .3, 30)]), VP)
    adv = rng.normal(size=(30, 2)) * 4
    np.testing.assert_allclose(raw_measurements(st_, adv, DT), _loop_D(st_, adv, DT), rtol=1e-12, atol=1e-9)
    batch = raw_measurements_batch(st_[None], ad.Tensor(adv[None]), DT).data[0]
    np.testing.assert_allclose(batch, _loop_D(st_, adv, DT), rtol=1e-12, atol=1e-9)


def test_cf_mode_sums_scalar_costs():
    traj = _uniform(T=10)
    vals = np.arange(10.0)
    assert raw_measurements(traj, vals)[4] == vals.sum()
    assert raw_measurements(traj, vals[:, None])[4] == vals.sum()


def test_length_mismatch():
    with pytest.raises(CostError):
        raw_measurements(_uniform(T=10), np.zeros((9, 2)))
    with pytest.raises(CostError):
        raw_measurements(np.zeros((5, 4)), np.zeros((4, 2)))


def test_trajectory_cost_examples():
    store = ad.ParamStore()
    init_cost(store)
    assert trajectory_cost(np.zeros(5), store).item() == 0.0
    assert trajectory_cost(np.ones(5), np.ones(5)) == 5.0
    np.testing.assert_allclose(effective_weights(store), DEFAULT_WEIGHTS, rtol=1e-12)


def test_cost_ordering_matches_dot_products():
    rng = np.random.default_rng(1)
    D = rng.uniform(0, 100, size=(100, 5))
    w = rng.uniform(0.01, 2, 5)
    store = ad.ParamStore()
    init_cost(store, w)
    oracle = [sum(D[i, j] * w[j] for j in range(5)) for i in range(100)]
    got = trajectory_cost(D, store).data
    assert list(np.argsort(got, kind="stable")) == list(np.argsort(oracle, kind="stable"))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=5, max_size=5), st.integers(0, 4), st.floats(0.01, 1e3),
       st.lists(st.floats(-5, 5), min_size=5, max_size=5))
def test_cost_monotone_and_nonnegative(d, j, bump, raw):
    w = np.log1p(np.exp(np.array(raw)))
    d = np.array(d)
    c0 = trajectory_cost(d, w)
    d2 = d.copy()
    d2[j] += bump
    assert c0 >= 0 and trajectory_cost(d2, w) >= c0


def test_selection_aligned_equals_entropy():
    ades = np.array([0.5, 1.0, 2.0, 4.0])
    costs = 3.0 * ades + 7.0         # identical min-max normalisation
    loss, info = selection_loss(costs, ades, CostConfig(top_k_for_selection=4))
    assert abs(loss.item() - entropy(info["p_ade"])) < 1e-12


def test_selection_anti_aligned_exceeds_entropy():
    loss, info = selection_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), CostConfig(top_k_for_selection=2))
    assert loss.item() > entropy(info["p_ade"])


def test_selection_oracle_30_candidates():
    rng = np.random.default_rng(2)
    costs, ades = rng.uniform(0, 50, 30), rng.uniform(0, 5, 30)
    got = selection_loss(costs, ades, CostConfig(top_k_for_selection=20))[0].item()
    keep = sorted(range(30), key=lambda i: costs[i])[:20]
    c = [costs[i] for i in keep]
    a = [ades[i] for i in keep]
    ec = [1 - (x - min(c)) / (max(c) - min(c)) for x in c]
    ea = [1 - (x - min(a)) / (max(a) - min(a)) for x in a]
    pa = [np.exp(x) / sum(np.exp(y) for y in ea) for x in ea]
    lse = np.log(sum(np.exp(y) for y in ec))
    expect = -sum(p * (x - lse) for p, x in zip(pa, ec))
    assert abs(got - expect) < 1e-9


def test_selection_degenerate_and_errors():
    loss, _ = selection_loss(np.ones(5), np.ones(5), CostConfig(top_k_for_selection=5))
    assert loss.item() == pytest.approx(np.log(5))
    with pytest.raises(CostError):
        selection_loss(np.ones(1), np.ones(1))
    with pytest.raises(Exception):
        CostConfig(top_k_for_selection=1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 1e3))
def test_gibbs_bound_and_scale_robustness(seed, scale):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    costs, ades = rng.uniform(0, 10, n), rng.uniform(0, 3, n)
    loss, info = selection_loss(costs, ades)
    assert loss.item() >= entropy(info["p_ade"]) - 1e-12
    p = ade_distribution(ades)
    q = ade_distribution(ades * 2.0)
    assert p.tobytes() == q.tobytes()
    assert np.allclose(ade_distribution(ades * scale), p, rtol=0, atol=1e-15)


def test_selection_gradcheck_weights_and_field():
    rng = np.random.default_rng(4)
    store = ad.ParamStore()
    init_cost(store, (0.5, 0.2, 1.0, 0.3, 1.0))
    fout = store.add("field.fake", rng.normal(size=(8, 6, 2)))
    states = np.stack([rollout_states([0, 0, 0, 5], np.column_stack([rng.uniform(-2, 2, 6), rng.uniform(-.2, .2, 6)]),
                                      VP) for _ in range(8)])
    ades = rng.uniform(0, 3, 8)

    def fn():
        costs = trajectory_cost(raw_measurements_batch(states, fout, DT), store)
        return selection_loss(costs, ades, CostConfig(top_k_for_selection=5))[0]

    assert ad.grad_check(fn, store).max_rel_error < 1e-4


def test_inverse_softplus_roundtrip():
    w = np.array([1e-3, 0.1, 1.0, 30.0])
    np.testing.assert_allclose(np.log1p(np.exp(inverse_softplus(w))), w, rtol=1e-10)
