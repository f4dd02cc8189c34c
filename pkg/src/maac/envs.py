"""Built-in deterministic toy environments and the double-integrator LQR oracle.

All three environments are deterministic; randomness enters through the
initial-state distribution and the policy only. Actions are clipped to the
bounds before integration, and episodes end only at the horizon.

Double integrator
    state (p, v); p' = p + dt v, v' = v + dt a; r = -(p^2 + 0.1 v^2 + 0.01 a^2);
    dt = 0.05, T = 50, |a| <= 15, p0 = U([-1, 1]^2).
Pendulum (theta = 0 is upright)
    w' = w + dt (g/l sin(theta) + a/(m l^2)); theta' = theta + dt w';
    r = -(2 (1 - cos theta) + 0.1 w^2 + 0.001 a^2); g = 9.81, m = l = 1,
    dt = 0.05, T = 100, |a| <= 2, p0: theta ~ U[-pi, pi], w ~ U[-1, 1].
Cartpole swing-up (frictionless, theta = 0 upright, pole half-length 0.5)
    r = -(2 (1 - cos theta) + 0.1 x^2 + 0.01 xd^2 + 0.01 thd^2 + 0.001 a^2);
    m_cart = 1, m_pole = 0.1, g = 9.8, dt = 0.05, T = 100, |a| <= 10,
    p0: hanging down (theta = pi) with U[-0.05, 0.05] noise on every coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import kernels
from .autodiff import Node, cos


class NotLinearError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: float
    action_high: float
    dt: float
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        if not self.dt > 0 or self.horizon < 1:
            raise ValueError(f"{self.name}: need dt > 0 and horizon >= 1")
        if not (np.isfinite(self.action_low) and np.isfinite(self.action_high)):
            raise ValueError(f"{self.name}: action bounds must be finite")


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class Env:
    spec: EnvSpec
    is_linear = False

    def reset(self, seed_or_rng) -> np.ndarray:
        return self.reset_batch(_rng(seed_or_rng), 1)[0]

    def reset_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def clip(self, actions):
        return np.clip(actions, self.spec.action_low, self.spec.action_high)

    def _dynamics(self, states, actions):
        raise NotImplementedError

    def step_batch(self, states, actions):
        """Clip, integrate one step. Returns ``(next_states, rewards)``."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = self.clip(np.atleast_2d(np.asarray(actions, dtype=np.float64)))
        if not np.all(np.isfinite(states)):
            raise FloatingPointError(f"{self.spec.name}: non-finite state {states}")
        nxt = self._dynamics(states, actions)
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError(f"{self.spec.name}: dynamics produced a non-finite state")
        return nxt, self.reward_np(states, actions)

    def step(self, state, action, t: int = 0) -> Transition:
        s = np.asarray(state, dtype=np.float64)
        a = self.clip(np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim))
        nxt, r = self.step_batch(s[None], a[None])
        return Transition(s.copy(), a, float(r[0]), nxt[0], t + 1 >= self.spec.horizon)

    def reward_np(self, states, actions) -> np.ndarray:
        """Rewards, shape (B,)."""
        raise NotImplementedError

    def reward(self, state: Node, action: Node) -> Node:
        """Differentiable reward, shape (B, 1); equals ``reward_np`` bit for bit."""
        raise NotImplementedError

    def true_jacobians(self, state, action) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def linear_system(self):
        raise NotLinearError(f"{self.spec.name} is not a linear-quadratic system")


class DoubleIntegrator(Env):
    is_linear = True
    W_STATE = np.array([[1.0], [0.1]])
    W_ACTION = np.array([[0.01]])

    def __init__(self, dt=0.05, horizon=50, action_bound=15.0, gamma=0.99):
        self.spec = EnvSpec("double_integrator", 2, 1, -action_bound, action_bound, dt, horizon, gamma)
        self.A = np.array([[1.0, dt], [0.0, 1.0]])
        self.B = np.array([[0.0], [dt]])

    def reset_batch(self, rng, n):
        return rng.uniform(-1.0, 1.0, (n, 2))

    def p0_moments(self):
        """Mean and second moment E[s s^T] of the initial-state distribution."""
        return np.zeros(2), np.eye(2) / 3.0

    def _dynamics(self, states, actions):
        return states @ self.A.T + actions @ self.B.T

    def reward_np(self, states, actions):
        return -(np.square(states) @ self.W_STATE + np.square(actions) @ self.W_ACTION)[:, 0]

    def reward(self, state, action):
        return -(state.square() @ self.W_STATE + action.square() @ self.W_ACTION)

    def true_jacobians(self, state, action):
        return self.A.copy(), self.B.copy()

    def linear_system(self):
        """``(A, B, Q, R)`` with cost s^T Q s + a^T R a."""
        return self.A, self.B, np.diag(self.W_STATE[:, 0]), self.W_ACTION.copy()


class Pendulum(Env):
    def __init__(self, dt=0.05, horizon=100, max_torque=2.0, gravity=9.81, mass=1.0, length=1.0,
                 gamma=0.99):
        self.spec = EnvSpec("pendulum", 2, 1, -max_torque, max_torque, dt, horizon, gamma)
        self.gravity, self.mass, self.length = gravity, mass, length

    def reset_batch(self, rng, n):
        return np.stack([rng.uniform(-np.pi, np.pi, n), rng.uniform(-1.0, 1.0, n)], axis=1)

    def _dynamics(self, states, actions):
        return kernels.pendulum_step(states, actions, self.spec.dt, self.gravity, self.mass, self.length)

    def reward_np(self, states, actions):
        cost = (1.0 - np.cos(states[:, 0:1])) * 2.0 + np.square(states[:, 1:2]) * 0.1 \
            + np.square(actions) * 0.001
        return -cost[:, 0]

    def reward(self, state, action):
        cost = (1.0 - cos(state[:, 0:1])) * 2.0 + state[:, 1:2].square() * 0.1 + action.square() * 0.001
        return -cost

    def true_jacobians(self, state, action):
        th = float(state[0])
        dt, inertia = self.spec.dt, self.mass * self.length ** 2
        dw_dth = dt * self.gravity / self.length * np.cos(th)
        ds = np.array([[1.0 + dt * dw_dth, dt], [dw_dth, 1.0]])
        da = np.array([[dt * dt / inertia], [dt / inertia]])
        return ds, da


class Cartpole(Env):
    W_STATE = np.array([[0.1], [0.01], [0.0], [0.01]])

    def __init__(self, dt=0.05, horizon=100, max_force=10.0, gravity=9.8, cart_mass=1.0,
                 pole_mass=0.1, half_length=0.5, gamma=0.99):
        self.spec = EnvSpec("cartpole", 4, 1, -max_force, max_force, dt, horizon, gamma)
        self.consts = (gravity, cart_mass, pole_mass, half_length)

    def reset_batch(self, rng, n):
        s = rng.uniform(-0.05, 0.05, (n, 4))
        s[:, 2] += np.pi
        return s

    def _dynamics(self, states, actions):
        return kernels.cartpole_step(states, actions, self.spec.dt, *self.consts)

    def reward_np(self, states, actions):
        cost = (1.0 - np.cos(states[:, 2:3])) * 2.0 + np.square(states) @ self.W_STATE \
            + np.square(actions) * 0.001
        return -cost[:, 0]

    def reward(self, state, action):
        cost = (1.0 - cos(state[:, 2:3])) * 2.0 + state.square() @ self.W_STATE + action.square() * 0.001
        return -cost

    def true_jacobians(self, state, action, h=1e-30):
        # complex-step differentiation: exact to machine precision, no cancellation
        x = np.concatenate([np.asarray(state, float), np.asarray(action, float)]).astype(complex)
        n = 4
        jac = np.zeros((n, n + 1))
        for j in range(n + 1):
            xp = x.copy()
            xp[j] += 1j * h
            out = kernels.cartpole_step_np(xp[None, :n], xp[None, n:], self.spec.dt, *self.consts)[0]
            jac[:, j] = out.imag / h
        return jac[:, :n], jac[:, n:]


ENVS = {"double_integrator": DoubleIntegrator, "pendulum": Pendulum, "cartpole": Cartpole}


def make_env(name: str, **kwargs) -> Env:
    try:
        return ENVS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


# ------------------------------------------------------------------ LQR oracle
#
# Linear policy a = theta . s on the double integrator. With P_0 = 0 and
#   P_{k+1} = Q + R theta theta^T + gamma (A + B theta^T)^T P_k (A + B theta^T)
# the k-step discounted return from s is -s^T P_k s, so the expected return
# from p0 is -tr(P_T E[s s^T]) (p0 has zero mean).


def _closed_loop(env, theta):
    A, B, Q, R = env.linear_system()
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    Ac = A + B @ theta[None, :]
    Qc = Q + R[0, 0] * np.outer(theta, theta)
    return A, B, Q, R, theta, Ac, Qc


def linear_policy_value_matrix(env, theta, gamma=None, horizon=None):
    """``(P, dP)``: value matrix for ``horizon`` steps and its derivative per theta_i."""
    gamma = env.spec.gamma if gamma is None else gamma
    horizon = env.spec.horizon if horizon is None else horizon
    A, B, Q, R, theta, Ac, Qc = _closed_loop(env, theta)
    n = theta.size
    P = np.zeros_like(A)
    dP = np.zeros((n,) + A.shape)
    for _ in range(horizon):
        new_dP = np.empty_like(dP)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            dAc = B @ e[None, :]
            dQc = R[0, 0] * (np.outer(e, theta) + np.outer(theta, e))
            new_dP[i] = dQc + gamma * (dAc.T @ P @ Ac + Ac.T @ dP[i] @ Ac + Ac.T @ P @ dAc)
        P = Qc + gamma * Ac.T @ P @ Ac
        dP = new_dP
    return P, dP


def lqr_expected_return(env, theta, gamma=None, horizon=None) -> float:
    env.linear_system()
    _, second = env.p0_moments()
    P, _ = linear_policy_value_matrix(env, theta, gamma, horizon)
    return -float(np.sum(P * second))


def lqr_analytic_gradient(env, theta, gamma=None, horizon=None) -> np.ndarray:
    """Exact gradient of the expected discounted T-step return w.r.t. the gain."""
    env.linear_system()
    _, second = env.p0_moments()
    _, dP = linear_policy_value_matrix(env, theta, gamma, horizon)
    return -np.einsum("ijk,jk->i", dP, second)


def lqr_optimal_gain(env, gamma=None, horizon=None, tol=1e-12, max_iter=50) -> np.ndarray:
    """Best stationary linear gain for the T-step objective (Newton on the exact gradient)."""
    gamma = env.spec.gamma if gamma is None else gamma
    horizon = env.spec.horizon if horizon is None else horizon
    A, B, Q, R = env.linear_system()
    # warm start from the finite-horizon Riccati gain at t = 0
    theta = -lqr_riccati(env, gamma, horizon)[1][0][0]
    h = 1e-6
    for _ in range(max_iter):
        grad = lqr_analytic_gradient(env, theta, gamma, horizon)
        if np.linalg.norm(grad) < tol:
            break
        hess = np.empty((theta.size, theta.size))
        for j in range(theta.size):
            e = np.zeros(theta.size)
            e[j] = h
            hess[:, j] = (lqr_analytic_gradient(env, theta + e, gamma, horizon)
                          - lqr_analytic_gradient(env, theta - e, gamma, horizon)) / (2 * h)
        hess = 0.5 * (hess + hess.T)
        theta = theta - np.linalg.solve(hess, grad)
    return theta


def lqr_riccati(env, gamma=None, horizon=None):
    """Time-varying finite-horizon optimum (unconstrained actions).

    Returns ``(P_T, gains)`` where ``gains[t]`` is K_t with a_t = -K_t s_t.
    """
    gamma = env.spec.gamma if gamma is None else gamma
    horizon = env.spec.horizon if horizon is None else horizon
    A, B, Q, R = env.linear_system()
    P = np.zeros_like(A)
    gains = []
    for _ in range(horizon):
        K = np.linalg.solve(R + gamma * B.T @ P @ B, gamma * B.T @ P @ A)
        Acl = A - B @ K
        P = Q + K.T @ R @ K + gamma * Acl.T @ P @ Acl
        gains.append(K)
    return P, gains[::-1]


def lqr_optimal_return(env, gamma=None, horizon=None) -> float:
    """Optimal expected discounted return from p0 (time-varying LQR)."""
    env.linear_system()
    _, second = env.p0_moments()
    P, _ = lqr_riccati(env, gamma, horizon)
    return -float(np.sum(P * second))


def lqr_mc_gradient(env, theta, n_samples, rng, gamma=None, horizon=None):
    """Monte-Carlo pathwise gradient through the true dynamics.

    Returns ``(mean_gradient, standard_error)``.
    """
    gamma = env.spec.gamma if gamma is None else gamma
    horizon = env.spec.horizon if horizon is None else horizon
    env.linear_system()
    starts = env.reset_batch(rng, n_samples)
    w = (env.W_STATE[0, 0], env.W_STATE[1, 0], env.W_ACTION[0, 0])
    _, grads = kernels.linear_policy_mc(starts, np.asarray(theta, float), env.spec.dt, gamma, horizon, *w)
    return grads.mean(axis=0), grads.std(axis=0, ddof=1) / np.sqrt(n_samples)
