import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from maac import kernels
from maac.autodiff import Graph, ShapeError, backward
from maac.buffer import Batch
from maac.critic import (VAR_FLOOR, QPair, bellman_loss, combine_candidates, critic_update, polyak_update,
                         q_forward, steve_candidates, steve_target, td_target)
from maac.dynamics import DynamicsEnsemble
from maac.envs import make_env
from maac.nets import GaussianPolicy

from fdcheck import assert_matches_fd

DI = make_env("double_integrator")


def _batch(n=16, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, (n, 2))
    a = rng.uniform(-2, 2, (n, 1))
    s2, r = DI.step_batch(s, a)
    return Batch(s, a, r, s2, np.zeros(n))


def _parts(seed=0, members=1):
    rng = np.random.default_rng(seed)
    pol = GaussianPolicy(2, 1, (8,), rng)
    q = QPair(2, 1, (8, 8), rng)
    # targets differ from the online nets so the test can tell them apart
    q.target_q1 = q.q1.copy()
    q.target_q2 = q.q2.copy()
    for net in (q.target_q1, q.target_q2):
        for k in net.params:
            net.params[k] = net.params[k] + 0.1 * rng.normal(size=net.params[k].shape)
    ens = DynamicsEnsemble(2, 1, members, (8,), rng)
    return pol, q, ens


def test_zero_q_outputs_zero():
    q = QPair(2, 1, (4,))
    g = Graph()
    out = q_forward(q.q1, g.const(np.ones((5, 2))), g.const(np.ones((5, 1))))
    assert out.shape == (5, 1) and np.all(out.value == 0.0)


def test_q_batch_mismatch():
    q = QPair(2, 1, (4,))
    g = Graph()
    with pytest.raises(ShapeError):
        q_forward(q.q1, g.const(np.ones((5, 2))), g.const(np.ones((4, 1))))


def test_q_action_gradient_matches_fd():
    q = QPair(2, 1, (8, 8), np.random.default_rng(1))
    rng = np.random.default_rng(2)
    s, a = rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
    assert_matches_fd(lambda g, v: q_forward(q.q1, g.const(s), v[0]).sum(), [a])
    assert_matches_fd(lambda g, v: q_forward(q.q2, v[0], g.const(a)).sum(), [s])


def test_tau_validation():
    with pytest.raises(ValueError):
        QPair(2, 1, tau=0.0)
    q = QPair(2, 1, (4,))
    with pytest.raises(ValueError):
        polyak_update(q, 1.5)


# ------------------------------------------------------------------ STEVE

def test_inverse_variance_hand_example():
    t, w = combine_candidates(np.array([[1.0, 2.0]]), np.array([[1.0, 3.0]]))
    assert t[0] == 1.25
    np.testing.assert_allclose(w[0], [0.75, 0.25], rtol=1e-15)


def test_equal_candidates_return_common_value():
    means = np.full((3, 4), 2.5)
    t, _ = combine_candidates(means, np.random.default_rng(0).uniform(0, 5, (3, 4)))
    np.testing.assert_allclose(t, 2.5, rtol=1e-15)


def test_zero_variance_gives_uniform_weights():
    t, w = combine_candidates(np.array([[1.0, 2.0, 6.0]]), np.zeros((1, 3)))
    np.testing.assert_allclose(w, 1.0 / 3.0, rtol=1e-15)
    assert t[0] == pytest.approx(3.0, rel=1e-15)


def test_combine_shape_checked():
    with pytest.raises(ShapeError):
        combine_candidates(np.zeros((2, 3)), np.zeros((2, 2)))


@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-100, 100)),
       hnp.arrays(np.float64, (4, 5), elements=st.floats(0, 100)))
def test_property_weights_are_a_distribution(means, variances):
    t, w = combine_candidates(means, variances)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(t >= means.min(axis=1) - 1e-9) and np.all(t <= means.max(axis=1) + 1e-9)
    expected_w = 1.0 / np.maximum(variances, VAR_FLOOR)
    np.testing.assert_allclose(w, expected_w / expected_w.sum(axis=1, keepdims=True), rtol=1e-12)


def test_h_zero_matches_td_target():
    pol, q, ens = _parts()
    b = _batch()
    for n in (1, 3):
        a = steve_target(b, ens, pol, q, 0, n, np.random.default_rng(5), DI, 0.99)
        t = td_target(b, pol, q, 0.99, np.random.default_rng(5), n, DI)
        np.testing.assert_allclose(a, t, rtol=0, atol=1e-12)


def test_single_candidate_reduction_at_h_one():
    pol, q, ens = _parts()
    q.q2 = q.q1.copy()
    q.target_q2 = q.target_q1.copy()
    b = _batch()
    a = steve_target(b, ens, pol, q, 1, 1, np.random.default_rng(6), DI, 0.99, candidates=[0])
    t = td_target(b, pol, q, 0.99, np.random.default_rng(6), 1, DI)
    np.testing.assert_allclose(a, t, rtol=0, atol=1e-12)


def test_td_target_uses_min_of_target_networks():
    pol, q, _ = _parts()
    b = _batch()
    eps = np.random.default_rng(7).standard_normal((b.size, 1))
    a2 = DI.clip(pol.act_np(b.s2, eps))
    x = np.concatenate([b.s2, a2], axis=1)
    from maac.nets import mlp_apply
    qmin = np.minimum(mlp_apply(q.target_q1, x), mlp_apply(q.target_q2, x))[:, 0]
    t = td_target(b, pol, q, 0.9, np.random.default_rng(7), 1, DI)
    np.testing.assert_allclose(t, b.r + 0.9 * qmin, rtol=1e-14)


def test_online_bootstrap_knob():
    pol, q, _ = _parts()
    b = _batch()
    with_targets = td_target(b, pol, q, 0.9, np.random.default_rng(7), 1, DI)
    q.use_target_networks = False
    online = td_target(b, pol, q, 0.9, np.random.default_rng(7), 1, DI)
    assert not np.allclose(with_targets, online)
    np.testing.assert_allclose(online, b.r + 0.9 * q.min_q_np(
        b.s2, DI.clip(pol.act_np(b.s2, np.random.default_rng(7).standard_normal((b.size, 1)))), target=False))


def test_candidates_follow_definition_with_exact_model():
    class Exact(DynamicsEnsemble):
        def predict_np(self, states, actions, members, eps=None):
            return DI.step_batch(states, actions)[0]

    pol, q, _ = _parts()
    ens = Exact(2, 1, 1, (4,))
    b = _batch(4)
    gamma = 0.9
    cand = steve_candidates(b, ens, pol, q, 3, 1, np.random.default_rng(0), DI, gamma)[0]
    # replay the same draws: action noise, then per step (member, state noise, action noise)
    rng = np.random.default_rng(0)
    s, ret = b.s2, b.r.copy()
    a = DI.clip(pol.act_np(s, rng.standard_normal((4, 1))))
    for h in range(4):
        np.testing.assert_allclose(cand[:, h], ret + gamma ** (h + 1) * q.min_q_np(s, a), rtol=1e-13)
        ret = ret + gamma ** (h + 1) * DI.reward_np(s, a)
        rng.integers(0, 1, 4)
        rng.standard_normal((4, 2))
        s = DI.step_batch(s, a)[0]
        a = DI.clip(pol.act_np(s, rng.standard_normal((4, 1))))


def test_steve_rejects_negative_horizon():
    pol, q, ens = _parts()
    with pytest.raises(ValueError):
        steve_target(_batch(), ens, pol, q, -1, 1, np.random.default_rng(0), DI, 0.99)
    with pytest.raises(ValueError):
        steve_target(_batch(), ens, pol, q, 1, 1, np.random.default_rng(0), DI, 0.99, candidates=[2])


def test_steve_target_is_convex_blend_of_candidate_means():
    pol, q, ens = _parts(members=3)
    b = _batch()
    cand = steve_candidates(b, ens, pol, q, 2, 4, np.random.default_rng(3), DI, 0.99)
    t = steve_target(b, ens, pol, q, 2, 4, np.random.default_rng(3), DI, 0.99)
    expected, _ = combine_candidates(cand.mean(axis=0), cand.var(axis=0))
    np.testing.assert_allclose(t, expected, rtol=1e-14)
    m = cand.mean(axis=0)
    assert np.all(t >= m.min(axis=1) - 1e-12) and np.all(t <= m.max(axis=1) + 1e-12)


def test_entropy_does_not_enter_targets():
    pol, q, _ = _parts()
    # a critic blind to the action: any change in policy spread can only act through an entropy term
    for net in (q.target_q1, q.target_q2):
        net.params["w0"][2, :] = 0.0
    b = _batch()
    t1 = td_target(b, pol, q, 0.99, np.random.default_rng(1), 2, DI)
    pol.params["log_std.b"] += 1.0
    t2 = td_target(b, pol, q, 0.99, np.random.default_rng(1), 2, DI)
    assert np.array_equal(t1, t2)


# ------------------------------------------------------------------ Bellman loss

def _q_with_constant(value):
    q = QPair(1, 1, (2,))
    q.q1.params["b1"][:] = value[0]
    q.q2.params["b1"][:] = value[1]
    return q


def _one_batch(n):
    return Batch(np.zeros((n, 1)), np.zeros((n, 1)), np.zeros(n), np.zeros((n, 1)), np.zeros(n))


def test_bellman_loss_zero_when_exact():
    q = _q_with_constant((1.5, 1.5))
    assert bellman_loss(q, _one_batch(3), np.full(3, 1.5)).value == 0.0


def test_bellman_loss_single_row():
    q = _q_with_constant((0.0, 0.0))
    assert bellman_loss(q, _one_batch(1), [2.0]).value == 8.0


def test_bellman_loss_mean_then_sum():
    q = QPair(1, 1, ())                   # linear critics
    q.q2.params["w0"][:] = [[1.0], [0.0]]  # q2(s, a) = s, q1 = 0
    b = Batch(np.array([[1.0], [3.0]]), np.zeros((2, 1)), np.zeros(2), np.zeros((2, 1)), np.zeros(2))
    assert bellman_loss(q, b, np.array([1.0, 3.0])).value == 5.0


def test_bellman_gradient_only_reaches_online_q():
    pol, q, _ = _parts()
    g = Graph()
    nodes = q.bind(g)
    loss = bellman_loss(q, _batch(), np.ones(16), nodes)
    grads = backward(loss)
    live = {id(n) for d in nodes for n in d.values()}
    assert grads and all(id(n) in live for n in grads)


def test_critic_update_reduces_loss_and_moves_targets():
    _, q, _ = _parts()
    b = _batch(64)
    targets = np.sin(b.s[:, 0])
    before = {k: v.copy() for k, v in q.target_q1.params.items()}
    losses = [critic_update(q, b, targets) for _ in range(200)]
    assert losses[-1] < losses[0]
    assert any(not np.array_equal(before[k], q.target_q1.params[k]) for k in before)


# ------------------------------------------------------------------ Polyak

def test_polyak_tau_one_copies():
    _, q, _ = _parts()
    polyak_update(q, 1.0)
    for k in q.q1.params:
        assert np.array_equal(q.target_q1.params[k], q.q1.params[k])


def test_polyak_half():
    q = QPair(1, 1, (2,))
    for k in q.q1.params:
        q.q1.params[k][...] = 2.0
        q.target_q1.params[k][...] = 0.0
    polyak_update(q, 0.5)
    assert all(np.all(v == 1.0) for v in q.target_q1.params.values())


def test_polyak_geometric_decay():
    _, q, _ = _parts()
    dist = lambda: np.sqrt(sum(np.sum((q.target_q1.params[k] - q.q1.params[k]) ** 2) for k in q.q1.params))
    d0 = dist()
    for i in range(1, 6):
        polyak_update(q, 0.2)
        assert dist() == pytest.approx(d0 * 0.8 ** i, rel=1e-12)


def test_kernel_twins_agree():
    rng = np.random.default_rng(0)
    m, v = rng.normal(size=(50, 4)), rng.uniform(0, 2, (50, 4))
    v[0] = 0.0
    t1, w1 = kernels.inverse_variance_combine_np(m, v, VAR_FLOOR)
    t2, w2 = kernels.inverse_variance_combine_jit(m, v, VAR_FLOOR)
    np.testing.assert_allclose(t1, t2, rtol=1e-14)
    np.testing.assert_allclose(w1, w2, rtol=1e-14)
