import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setpool import nn
from setpool.actor_critic import ActorCritic, TrainConfig, a2c_gradients, a2c_update
from setpool.data import SyntheticConfig, gen_synthetic
from setpool.env import run_episode
from setpool.offpolicy import (ReplayPool, TrustRegionConfig, average_policy_update, is_ratios, kl_grad, load_pool,
                               off_policy_return, off_policy_step, policy_grad_off, save_pool, train_off_policy,
                               trust_region_project, value_grad_off)
from setpool.selfcheck import qp_oracle

from conftest import make_set, perturbed_model


def episode(p, rng, T=5):
    fs = make_set(rng.standard_normal((T, p.dim)), identity=int(rng.integers(p.reward_head.num_classes)))
    return run_episode(fs, p, p.reward_head, "stochastic", rng)


def fake_traj(tag):
    class T:
        logmu = np.zeros(1)
    t = T()
    t.tag = tag
    return t


# pool ------------------------------------------------------------------------

def test_pool_is_fifo():
    pool = ReplayPool(2)
    for i in range(3):
        pool.push(fake_traj(i))
    assert [t.tag for t in pool.entries] == [1, 2] and pool.inserted == 3


def test_sample_full_pool_returns_everything(rng):
    pool = ReplayPool(5)
    for i in range(5):
        pool.push(fake_traj(i))
    assert {t.tag for t in pool.sample(5, rng)} == set(range(5))


def test_sample_errors(rng):
    pool = ReplayPool(3)
    with pytest.raises(ValueError):
        pool.sample(1, rng)
    pool.push(fake_traj(0))
    with pytest.raises(ValueError):
        pool.sample(2, rng)


def test_sampling_is_uniform():
    pool = ReplayPool(10)
    for i in range(10):
        pool.push(fake_traj(i))
    rng = np.random.default_rng(99)
    counts = np.bincount([pool.sample(1, rng)[0].tag for _ in range(10_000)], minlength=10)
    chi2 = float(np.sum((counts - 1000.0) ** 2 / 1000.0))
    assert chi2 < 27.877  # 0.999 quantile of chi-square with 9 degrees of freedom


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.lists(st.one_of(st.just("push"), st.integers(1, 6)), max_size=40),
       st.integers(0, 2**31))
def test_pool_invariants_under_interleavings(capacity, ops, seed):
    pool, model, rng, n = ReplayPool(capacity), [], np.random.default_rng(seed), 0
    for op in ops:
        if op == "push":
            pool.push(fake_traj(n))
            model = (model + [n])[-capacity:]
            n += 1
        elif op <= len(pool):
            got = [t.tag for t in pool.sample(op, rng)]
            assert len(set(got)) == op and set(got) <= set(model)
        assert [t.tag for t in pool.entries] == model and len(pool) <= capacity


# ratios and returns ----------------------------------------------------------

def test_ratios_are_one_on_policy(rng):
    p = perturbed_model()
    traj = episode(p, rng)
    # behaviour densities come from single-state passes, ratios from a batched pass
    np.testing.assert_allclose(is_ratios(traj, p), 1.0, rtol=0, atol=1e-12)
    assert np.all(is_ratios(traj, p, rho_clip=1.0) <= 1.0)


@pytest.mark.parametrize("shift,expected", [(math.log(2), 2.0), (5.0, 10.0), (-1.0, math.exp(-1.0))])
def test_ratio_arithmetic_and_clip(rng, shift, expected):
    p = perturbed_model()
    traj = episode(p, rng, T=3)
    traj.logmu = p.log_prob(traj.states, traj.raws) - shift
    np.testing.assert_allclose(is_ratios(traj, p, rho_clip=10.0), expected, rtol=1e-12)


def test_return_hand_case():
    np.testing.assert_allclose(off_policy_return([1, 1, 1], [np.nan, 2.0, 0.5], 0.9), [3.61, 1.45, 1.0],
                               rtol=0, atol=1e-12)


def direct_return(r, rho, gamma):
    T = len(r)
    return np.array([sum(gamma ** j * r[t + j] * np.prod(rho[t + 1:t + j + 1]) for j in range(T - t))
                     for t in range(T)])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.floats(0, 0.99), st.integers(0, 2**31))
def test_return_recursion_matches_product_sum(T, gamma, seed):
    rng = np.random.default_rng(seed)
    r, rho = rng.standard_normal(T), rng.uniform(0, 3, T)
    np.testing.assert_allclose(off_policy_return(r, rho, gamma), direct_return(r, rho, gamma), rtol=1e-12,
                               atol=1e-12)


def test_return_special_cases(rng):
    r = rng.standard_normal(6)
    np.testing.assert_array_equal(off_policy_return(r, rng.uniform(0, 2, 6), 0.0), r)
    disc = [sum(0.9 ** j * r[t + j] for j in range(6 - t)) for t in range(6)]
    np.testing.assert_allclose(off_policy_return(r, np.ones(6), 0.9), disc, atol=1e-12)


# gradient estimators -----------------------------------------------------------

def test_value_gradient_matches_direct_formula(rng):
    p = perturbed_model()
    traj = episode(p, rng, T=2)
    rho = rng.uniform(0.2, 2.0, 2)
    got = value_grad_off(traj, rho, p, 0.9)
    v = p.value_pass(traj.states)[0]
    R = [traj.rewards[0] + 0.9 * rho[1] * traj.rewards[1], traj.rewards[1]]
    expected = [np.zeros_like(a) for a in p.value_params()]
    for t in range(2):
        p_states = traj.states[t:t + 1]
        per_step = [np.zeros_like(a) for a in p.value_params()]
        # d V(s_t) / d omega by finite differences, independent of the backward pass
        for a, g in zip(p.value_params(), per_step):
            it = np.nditer(a, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = a[i]
                a[i] = old + 1e-6
                hi = p.value_pass(p_states)[0][0]
                a[i] = old - 1e-6
                lo = p.value_pass(p_states)[0][0]
                a[i] = old
                g[i] = (hi - lo) / 2e-6
        for e, g in zip(expected, per_step):
            e += (R[t] - v[t]) * np.prod(rho[:t + 1]) * g
    for a, b in zip(got, expected):
        np.testing.assert_allclose(a, b, atol=1e-8)


def test_value_gradient_vanishes_at_zero_residual(rng):
    p = perturbed_model()
    traj = episode(p, rng, T=4)
    v = p.value_pass(traj.states)[0]
    rho = np.ones(4)
    traj.rewards = v - 0.9 * np.append(v[1:], 0.0)  # makes R_t == V(s_t)
    assert all(np.allclose(g, 0.0, atol=1e-14) for g in value_grad_off(traj, rho, p, 0.9))


def test_policy_gradient_reduces_to_a2c(rng):
    p = perturbed_model()
    traj = episode(p, rng)
    g_on, _, _ = a2c_gradients(p, traj, 0.9)
    g_off = policy_grad_off(traj, is_ratios(traj, p, 10.0), p, 0.9)
    assert all(np.max(np.abs(a - b)) <= 1e-10 for a, b in zip(g_on, g_off))


def test_policy_gradient_single_step_surrogate(rng):
    p = perturbed_model()
    traj = episode(p, rng, T=1)
    rho = np.array([1.7])
    g = policy_grad_off(traj, rho, p, 0.9)
    delta = traj.rewards[0] - p.value_pass(traj.states)[0][0]
    f = lambda: float(rho[0] * delta * p.log_prob(traj.states, traj.raws)[0])  # noqa: E731
    assert nn.grad_check(f, p.policy_params(), g) < 1e-4


def test_kl_vanishes_at_equal_policies(rng):
    p = perturbed_model()
    p.update_average(0.0)
    kl, k = kl_grad(p, 0.3 * rng.standard_normal((4, 12)))
    assert kl == 0.0
    assert all(np.max(np.abs(a)) < 1e-14 for a in k)


def test_kl_gradient_finite_differences(rng):
    p = perturbed_model()
    for a in p.avg_policy_params():
        a += 0.1 * rng.standard_normal(a.shape)
    p.touch()
    s = 0.3 * rng.standard_normal((6, 12))

    def f():
        return kl_grad(p, s)[0]

    kl, k = kl_grad(p, s)
    assert kl > 0
    assert nn.grad_check(f, p.policy_params(), k) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = perturbed_model(seed=seed % 50)
    for a in p.avg_policy_params():
        a += rng.standard_normal(a.shape)
    p.touch()
    assert kl_grad(p, rng.standard_normal((3, 12)))[0] >= 0.0


# projection ------------------------------------------------------------------

def test_projection_inactive_and_full(rng):
    d, k = rng.standard_normal(20), rng.standard_normal(20)
    xi = float(k @ d) + 0.5
    assert np.array_equal(trust_region_project(d, k, xi), d)
    np.testing.assert_allclose(trust_region_project(k, k, 0.0), 0.0, atol=1e-15)
    assert np.array_equal(trust_region_project(d, np.zeros(20), 0.1), d)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 3))
def test_projection_matches_qp_oracle(seed, xi):
    rng = np.random.default_rng(seed)
    d, k = rng.standard_normal(20), rng.standard_normal(20)
    z = trust_region_project(d, k, xi)
    assert np.max(np.abs(z - qp_oracle(d, k, xi))) <= 1e-10
    assert k @ z <= xi + 1e-10


@pytest.mark.parametrize("alpha", [1.0, 0.0, 0.5])
def test_average_policy_update(alpha):
    p = perturbed_model()
    for a in p.avg_policy_params():
        a[...] = 0.0
    for a in p.policy_params():
        a[...] = 2.0
    average_policy_update(p, alpha)
    expected = {1.0: 0.0, 0.0: 2.0, 0.5: 1.0}[alpha]
    assert all(np.all(a == expected) for a in p.avg_policy_params())


def test_trust_region_config_validation():
    with pytest.raises(ValueError):
        TrustRegionConfig(xi=0.0)
    with pytest.raises(ValueError):
        TrustRegionConfig(alpha=1.5)


# training --------------------------------------------------------------------

def test_unconstrained_single_trajectory_step_equals_a2c(rng):
    p = perturbed_model()
    for a in p.avg_policy_params():
        a += 0.2 * rng.standard_normal(a.shape)  # non-zero KL gradient that xi = inf must ignore
    p.touch()
    traj = episode(p, rng)
    q = p.copy()
    cfg = TrainConfig(xi=math.inf, lr_pi=0.05, lr_v=0.01, max_grad_norm=math.inf)
    off_policy_step(p, [traj], cfg)
    a2c_update(q, traj, 0.05, 0.01, cfg.gamma, alpha=1.0)
    # the shared trunk also moves with the (different) value targets, so compare the policy head
    for a, b in zip(p.policy_head.params(), q.policy_head.params()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def tiny_data():
    return gen_synthetic(SyntheticConfig(num_identities=4, sets_per_identity=3, dim=4, set_size_max=6), 2)


def run_off(seed=0, episodes=40, warmup=8):
    data = tiny_data()
    p = ActorCritic.create(4, 4, np.random.default_rng(seed))
    cfg = TrainConfig(episodes=episodes, warmup=warmup, minibatch=4, pool_capacity=50)
    pool = ReplayPool(cfg.pool_capacity)
    rows = train_off_policy(p, data, cfg, np.random.default_rng(seed + 1), np.random.default_rng(seed + 2), pool)
    return rows, p, pool


def test_off_policy_training_is_deterministic():
    (a, pa, _), (b, pb, _) = run_off(), run_off()
    assert a == b
    assert all(np.array_equal(x, y) for x, y in zip(pa.policy_params(), pb.policy_params()))


def test_first_update_follows_warmup():
    rows, _, pool = run_off(warmup=8)
    assert rows[0]["episodes_seen"] == 9 and len(rows) == 40 - 8
    assert pool.inserted == 40
    assert all(r["mean_KL"] >= 0 and 0 <= r["clip_fraction"] <= 1 for r in rows)


def test_pool_spill_roundtrip(tmp_path):
    _, p, pool = run_off(episodes=12)
    save_pool(pool, tmp_path / "pool.bin")
    back = load_pool(tmp_path / "pool.bin", capacity=50, floor=p.floor)
    assert len(back) == len(pool)
    for a, b in zip(pool.entries, back.entries):
        assert a.set_id == b.set_id and a.identity == b.identity
        for field in ("states", "raws", "logmu", "rewards", "weights"):
            assert np.array_equal(getattr(a, field), getattr(b, field)), field
        assert np.array_equal(is_ratios(a, p), is_ratios(b, p))


def test_pool_spill_rejects_corruption(tmp_path):
    _, _, pool = run_off(episodes=10)
    save_pool(pool, tmp_path / "pool.bin")
    blob = (tmp_path / "pool.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" + blob[1:])
    with pytest.raises(ValueError):
        load_pool(tmp_path / "bad.bin", 50)
    (tmp_path / "long.bin").write_bytes(blob + b"\0")
    with pytest.raises(ValueError):
        load_pool(tmp_path / "long.bin", 50)


def test_every_emitted_update_respects_the_trust_region(monkeypatch):
    import setpool.offpolicy as off

    seen = []
    original = off.trust_region_project

    def spy(d, k, xi):
        z = original(d, k, xi)
        seen.append((float(k @ z), xi, np.max(np.abs(z - qp_oracle(d, k, xi)))))
        return z

    monkeypatch.setattr(off, "trust_region_project", spy)
    data = tiny_data()
    p = ActorCritic.create(4, 4, np.random.default_rng(0))
    cfg = TrainConfig(episodes=60, warmup=8, minibatch=4, pool_capacity=50, xi=1e-4, lr_pi=0.5)
    train_off_policy(p, data, cfg, np.random.default_rng(1), np.random.default_rng(2))
    assert len(seen) == 52
    assert all(kz <= xi + 1e-10 and err <= 1e-10 for kz, xi, err in seen)
