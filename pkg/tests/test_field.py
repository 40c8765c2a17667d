import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vfplan import autodiff as ad
from vfplan.dynamics import VehicleParams, rollout_states, wrap_angle
from vfplan.encoder import ContextEmbedding, encode_context
from vfplan.field import (FieldConfig, FieldError, correction_loss, field_loss, imitation_loss, init_field,
                          prepare_field, query_field, query_velocity)
from vfplan.scenario import context_at

from conftest import randomize_heads, tiny_scene

DT = 0.1


@pytest.fixture(params=["vf", "cf"])
def field_setup(request, small_cfg, small_store):
    fcfg = FieldConfig(mode=request.param, embed_dim=small_cfg.embed_dim, attn_heads=small_cfg.attn_heads)
    init_field(small_store, fcfg, np.random.default_rng(2))
    randomize_heads(small_store)
    emb = encode_context(context_at(tiny_scene(2, 3)), small_cfg, small_store)
    return fcfg, small_store, emb


def _points(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-10, 60, n), rng.uniform(-8, 8, n), rng.uniform(0, 5, n)])


def test_shapes(field_setup):
    fcfg, store, emb = field_setup
    pts = _points(7)
    assert query_field(pts, emb, store, fcfg).shape == (7, fcfg.out_dim)
    assert query_velocity(pts, emb, store, fcfg).shape == (7, fcfg.out_dim)


def test_single_vs_batch_bits(field_setup):
    fcfg, store, emb = field_setup
    pts = _points(500)
    for fn in (lambda p: query_field(p, emb, store, fcfg).data, lambda p: query_velocity(p, emb, store, fcfg)):
        full = fn(pts)
        for i in (0, 137, 499):
            assert fn(pts[i:i + 1]).tobytes() == full[i:i + 1].tobytes()


def test_permutation_equivariance(field_setup):
    fcfg, store, emb = field_setup
    pts = _points(300, 1)
    perm = np.random.default_rng(1).permutation(300)
    a = query_velocity(pts, emb, store, fcfg)
    b = query_velocity(pts[perm], emb, store, fcfg)
    assert a[perm].tobytes() == b.tobytes()


def test_fast_path_matches_tensor_path(field_setup):
    fcfg, store, emb = field_setup
    pts = _points(1500, 2)
    np.testing.assert_allclose(query_velocity(pts, emb, store, fcfg), query_field(pts, emb, store, fcfg).data,
                               rtol=0, atol=1e-12)


def test_masked_tokens_do_not_matter(field_setup):
    fcfg, store, emb = field_setup
    tokens = emb.tokens.data.copy()
    tokens[~emb.mask] = np.random.default_rng(5).normal(size=tokens[~emb.mask].shape) * 100
    other = ContextEmbedding(ad.Tensor(tokens), emb.mask, emb.roles, emb.features)
    pts = _points(50)
    assert query_field(pts, emb, store, fcfg).data.tobytes() == query_field(pts, other, store, fcfg).data.tobytes()
    assert query_velocity(pts, emb, store, fcfg).tobytes() == query_velocity(pts, other, store, fcfg).tobytes()


def test_empty_context_rejected(field_setup):
    fcfg, store, emb = field_setup
    dead = ContextEmbedding(emb.tokens, np.zeros_like(emb.mask), emb.roles, emb.features)
    with pytest.raises(FieldError):
        query_velocity(_points(3), dead, store, fcfg)


def _traj(seed, T=8):
    rng = np.random.default_rng(seed)
    u = np.column_stack([rng.uniform(-2, 2, T), rng.uniform(-0.2, 0.2, T)])
    return rollout_states([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.3, 0.3), rng.uniform(4, 9)],
                          u, VehicleParams())


def _own_vel(s):
    return np.stack([s[1:, 3] * np.cos(s[1:, 2]), s[1:, 3] * np.sin(s[1:, 2])], axis=-1)


def test_imitation_zero_on_expert():
    e = _traj(0)
    samples = np.stack([e, e])
    adv = ad.Tensor(np.stack([_own_vel(e)] * 2))
    assert imitation_loss(samples, e, None, None, FieldConfig(), DT, advised=adv).item() == 0.0


def test_imitation_distance_discount():
    T = 5
    e = np.zeros((T + 1, 4))
    far = e.copy()
    far[:, 1] = 10.0
    adv = ad.Tensor(np.ones((1, T, 2)))
    near_loss = imitation_loss(e[None], e, None, None, FieldConfig(), DT, advised=adv).item()
    far_loss = imitation_loss(far[None], e, None, None, FieldConfig(), DT, advised=adv).item()
    assert far_loss / near_loss == pytest.approx(np.exp(-5.0), rel=1e-12)
    assert abs(np.exp(-5.0) - 6.7e-3) < 1e-4


def test_imitation_loop_oracle():
    e = _traj(1)
    samples = np.stack([_traj(k) for k in (2, 3, 4)])
    adv = np.random.default_rng(0).normal(size=(3, 8, 2)) * 5
    got = imitation_loss(samples, e, None, None, FieldConfig(), DT, advised=ad.Tensor(adv)).item()
    total = 0.0
    for n in range(3):
        for t in range(1, 9):
            s = samples[n, t]
            d = np.array([s[0] - e[t, 0], s[1] - e[t, 1], wrap_angle(s[2] - e[t, 2])])
            own = np.array([s[3] * np.cos(s[2]), s[3] * np.sin(s[2])])
            total += np.exp(-np.linalg.norm(d) / 2) * np.sum((adv[n, t - 1] - own) ** 2)
    assert abs(got - total / 24) < 1e-9


def test_correction_zero_on_expert():
    e = _traj(5)
    adv = np.zeros((1, 8, 2))
    adv[0, :-1] = (e[2:, :2] - e[1:-1, :2]) / DT
    assert correction_loss(e[None], e, None, None, FieldConfig(), DT, advised=ad.Tensor(adv)).item() == 0.0


def test_correction_pull_arithmetic():
    T = 4
    e = np.zeros((T + 1, 4))
    s = e.copy()
    s[2, 0] = -1.0                     # 1 m behind at t = 2
    got = correction_loss(s[None], e, None, None, FieldConfig(), DT, advised=ad.Tensor(np.zeros((1, T, 2)))).item()
    assert got == pytest.approx(np.exp(-0.5) * 10.0 / (T - 1), rel=1e-12)


def test_correction_loop_oracle():
    e = _traj(6)
    samples = np.stack([_traj(k) for k in (7, 8, 9)])
    adv = np.random.default_rng(1).normal(size=(3, 8, 2)) * 5
    got = correction_loss(samples, e, None, None, FieldConfig(), DT, advised=ad.Tensor(adv)).item()
    total = 0.0
    for n in range(3):
        for t in range(1, 8):
            p = samples[n, t, :2]
            target = (e[t + 1, :2] - p) / DT
            total += np.exp(-np.linalg.norm(p - e[t, :2]) / 2) * np.linalg.norm(target - adv[n, t - 1])
    assert abs(got - total / 21) < 1e-9


def test_field_loss_is_sum_and_gradchecks(small_cfg, small_store):
    fcfg = FieldConfig(embed_dim=small_cfg.embed_dim, attn_heads=small_cfg.attn_heads)
    init_field(small_store, fcfg, np.random.default_rng(2))
    randomize_heads(small_store, scale=0.1)
    emb = encode_context(context_at(tiny_scene(2, 3)), small_cfg, small_store)
    frozen = ContextEmbedding(ad.Tensor(emb.tokens.data), emb.mask, emb.roles, emb.features)
    e = _traj(10, T=6)
    samples = np.stack([_traj(k, T=6) for k in (11, 12)])
    total, parts = field_loss(samples, e, frozen, small_store, fcfg, DT)
    li = imitation_loss(samples, e, frozen, small_store, fcfg, DT).item()
    lc = correction_loss(samples, e, frozen, small_store, fcfg, DT).item()
    assert abs(total.item() - (li + lc)) < 1e-12
    assert parts == {"imitation": li, "correction": lc}
    params = {n: small_store[n] for n in small_store.names("field.")}
    rep = ad.grad_check(lambda: field_loss(samples, e, frozen, small_store, fcfg, DT)[0], params, max_entries=8)
    assert rep.max_rel_error < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    e = _traj(seed % 1000)
    samples = np.stack([_traj(seed % 997 + k) for k in range(3)])
    adv = ad.Tensor(rng.normal(size=(3, 8, 2)) * 10)
    assert imitation_loss(samples, e, None, None, FieldConfig(), DT, advised=adv).item() >= 0
    assert correction_loss(samples, e, None, None, FieldConfig(), DT, advised=adv).item() >= 0


def test_cf_mode_rejected_for_field_losses():
    e = _traj(0)
    with pytest.raises(FieldError):
        field_loss(e[None], e, None, None, FieldConfig(mode="cf"), DT)


def test_bad_queries():
    with pytest.raises(FieldError):
        FieldConfig(mode="xy")
    from vfplan.field import query_features
    with pytest.raises(FieldError):
        query_features(np.zeros((3, 2)), FieldConfig())
    with pytest.raises(FieldError):
        query_features(np.array([[0.0, np.nan, 1.0]]), FieldConfig())
