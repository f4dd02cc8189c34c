import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from maac import envs
from maac.autodiff import Graph, backward, numeric_grad
from maac.envs import (EnvSpec, NotLinearError, lqr_analytic_gradient, lqr_expected_return, lqr_mc_gradient,
                       lqr_optimal_gain, lqr_optimal_return, make_env)

DI = make_env("double_integrator")


def test_reset_is_deterministic_per_seed():
    for name in envs.ENVS:
        env = make_env(name)
        assert np.array_equal(env.reset(123), env.reset(123))


def test_double_integrator_reset_support_and_mean():
    s = DI.reset_batch(np.random.default_rng(0), 100_000)
    assert np.all(np.abs(s) <= 1.0)
    np.testing.assert_allclose(s.mean(axis=0), 0.0, atol=0.02)


def test_double_integrator_step_example():
    tr = DI.step([1.0, 0.0], [0.0])
    np.testing.assert_array_equal(tr.s2, [1.0, 0.0])
    assert tr.r == -1.0


def test_zero_fixed_point():
    tr = DI.step([0.0, 0.0], [0.0])
    assert np.all(tr.s2 == 0.0) and tr.r == 0.0


def test_double_integrator_dynamics_formula():
    rng = np.random.default_rng(1)
    s, a = rng.normal(size=(10, 2)), rng.uniform(-2, 2, (10, 1))
    s2, r = DI.step_batch(s, a)
    dt = DI.spec.dt
    np.testing.assert_allclose(s2[:, 0], s[:, 0] + dt * s[:, 1], rtol=1e-15)
    np.testing.assert_allclose(s2[:, 1], s[:, 1] + dt * a[:, 0], rtol=1e-15)
    np.testing.assert_allclose(r, -(s[:, 0] ** 2 + 0.1 * s[:, 1] ** 2 + 0.01 * a[:, 0] ** 2), rtol=1e-15)


def test_actions_clipped_before_integration():
    hi = DI.spec.action_high
    s2_big, _ = DI.step_batch([[0.0, 0.0]], [[hi * 10]])
    s2_hi, _ = DI.step_batch([[0.0, 0.0]], [[hi]])
    assert np.array_equal(s2_big, s2_hi)


def test_pendulum_upright_equilibrium():
    env = make_env("pendulum")
    tr = env.step([0.0, 0.0], [0.0])
    assert np.all(np.abs(tr.s2) < 1e-9)


def test_non_finite_state_rejected():
    with pytest.raises(FloatingPointError):
        DI.step([np.nan, 0.0], [0.0])


def test_done_only_at_horizon():
    T = DI.spec.horizon
    assert not DI.step([0, 0], [0], t=T - 2).done
    assert DI.step([0, 0], [0], t=T - 1).done


def test_spec_validation():
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, -1.0, 1.0, 0.0, 10)
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, -np.inf, 1.0, 0.1, 10)


def test_unknown_env_name():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("hopper")


@pytest.mark.parametrize("name", sorted(envs.ENVS))
def test_graph_reward_equals_step_reward(name):
    env = make_env(name)
    rng = np.random.default_rng(2)
    sd, ad = env.spec.state_dim, env.spec.action_dim
    s = rng.normal(size=(1000, sd)) * 2
    a = env.clip(rng.normal(size=(1000, ad)) * 2)
    g = Graph()
    node = env.reward(g.const(s), g.const(a))
    _, r = env.step_batch(s, a)
    assert np.array_equal(node.value[:, 0], r)


def test_double_integrator_reward_slope():
    g = Graph()
    s = g.param([[1.0, 0.0]])
    grads = backward(DI.reward(s, g.const([[0.0]])).sum())
    np.testing.assert_array_equal(grads[s], [[-2.0, 0.0]])


@pytest.mark.parametrize("name", sorted(envs.ENVS))
def test_reward_gradient_matches_fd(name):
    env = make_env(name)
    rng = np.random.default_rng(3)
    s0 = rng.normal(size=(1, env.spec.state_dim))
    a0 = rng.normal(size=(1, env.spec.action_dim)) * 0.5
    g = Graph()
    s, a = g.param(s0), g.param(a0)
    grads = backward(env.reward(s, a).sum())
    fs = numeric_grad(lambda x: env.reward_np(x, a0)[0], s0)
    fa = numeric_grad(lambda x: env.reward_np(s0, x)[0], a0)
    np.testing.assert_allclose(grads[s], fs, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(grads[a], fa, rtol=1e-6, atol=1e-9)


@given(hnp.arrays(np.float64, 2, elements=st.floats(-5, 5)), st.floats(-3, 3))
def test_property_double_integrator_jacobians_constant(s, a):
    ds, da = DI.true_jacobians(s, np.array([a]))
    dt = DI.spec.dt
    np.testing.assert_array_equal(ds, [[1.0, dt], [0.0, 1.0]])
    np.testing.assert_array_equal(da, [[0.0], [dt]])


@pytest.mark.parametrize("name", ["pendulum", "cartpole"])
def test_nonlinear_jacobians_match_fd(name):
    env = make_env(name)
    rng = np.random.default_rng(4)
    for _ in range(5):
        s = env.reset(rng)
        a = rng.uniform(env.spec.action_low, env.spec.action_high, env.spec.action_dim) * 0.5
        ds, da = env.true_jacobians(s, a)
        fds = np.stack([numeric_grad(lambda x: env.step_batch(x[None], a[None])[0][0, i], s)
                        for i in range(len(s))])
        fda = np.stack([numeric_grad(lambda x: env.step_batch(s[None], x[None])[0][0, i], a)
                        for i in range(len(s))])
        np.testing.assert_allclose(ds, fds, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(da, fda, rtol=1e-6, atol=1e-8)


@given(hnp.arrays(np.float64, 2, elements=st.floats(-3, 3)), hnp.arrays(np.float64, 1, elements=st.floats(-3, 3)))
def test_property_step_is_pure(s, a):
    for name in envs.ENVS:
        env = make_env(name)
        sd = env.spec.state_dim
        ss = np.resize(s, sd)
        t1, t2 = env.step(ss, a), env.step(ss, a)
        assert np.array_equal(t1.s2, t2.s2) and t1.r == t2.r


# ------------------------------------------------------------------ LQR oracle

def test_gradient_vanishes_at_optimal_gain():
    theta = lqr_optimal_gain(DI)
    assert np.linalg.norm(lqr_analytic_gradient(DI, theta)) < 1e-8


def test_optimal_stationary_gain_close_to_time_varying_optimum():
    theta = lqr_optimal_gain(DI)
    assert lqr_expected_return(DI, theta) <= lqr_optimal_return(DI) + 1e-12
    assert lqr_expected_return(DI, theta) > 1.01 * lqr_optimal_return(DI)


@pytest.mark.parametrize("theta", [(-1.0, -2.0), (-3.0, -1.0), (0.5, 0.2)])
def test_analytic_gradient_matches_fd_of_recursion(theta):
    theta = np.array(theta)
    grad = lqr_analytic_gradient(DI, theta)
    fd = numeric_grad(lambda t: lqr_expected_return(DI, t), theta, h=1e-6)
    np.testing.assert_allclose(grad, fd, rtol=1e-8, atol=1e-10)


def test_analytic_gradient_matches_monte_carlo():
    theta = np.array([-1.0, -2.0])
    mean, se = lqr_mc_gradient(DI, theta, 1_000_000, np.random.default_rng(5))
    exact = lqr_analytic_gradient(DI, theta)
    assert np.all(np.abs(mean - exact) < 3 * se)


def test_expected_return_matches_simulation():
    theta = np.array([-1.0, -2.0])
    rng = np.random.default_rng(6)
    s = DI.reset_batch(rng, 200_000)
    ret, disc = np.zeros(len(s)), 1.0
    for _ in range(DI.spec.horizon):
        s, r = DI.step_batch(s, s @ theta[:, None])
        ret += disc * r
        disc *= DI.spec.gamma
    se = ret.std() / np.sqrt(len(ret))
    assert abs(ret.mean() - lqr_expected_return(DI, theta)) < 4 * se


@pytest.mark.parametrize("fn", [lqr_analytic_gradient, lqr_expected_return])
def test_lqr_oracle_rejects_nonlinear_env(fn):
    with pytest.raises(NotLinearError):
        fn(make_env("pendulum"), np.zeros(2))
