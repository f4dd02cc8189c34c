"""Hot numeric kernels.

Each kernel exists twice: a numba ``@njit`` loop (``*_jit``) and a vectorised
numpy version (``*_np``). The public name points at the jit version unless
numba is disabled through ``MAAC_DISABLE_NUMBA``. Both paths are tested
against each other; ``benchmarks/bench_kernels.py`` times them.
"""

import numpy as np

from ._jit import NUMBA_ENABLED, njit

# ---------------------------------------------------------------- pendulum


@njit
def pendulum_step_jit(states, actions, dt, gravity, mass, length):
    n = states.shape[0]
    out = np.empty_like(states)
    inertia = mass * length * length
    for i in range(n):
        th = states[i, 0]
        om = states[i, 1]
        om2 = om + dt * (gravity / length * np.sin(th) + actions[i, 0] / inertia)
        out[i, 0] = th + dt * om2
        out[i, 1] = om2
    return out


def pendulum_step_np(states, actions, dt, gravity, mass, length):
    th, om = states[:, 0], states[:, 1]
    om2 = om + dt * (gravity / length * np.sin(th) + actions[:, 0] / (mass * length * length))
    return np.stack([th + dt * om2, om2], axis=1)


# ---------------------------------------------------------------- cartpole


@njit
def cartpole_step_jit(states, actions, dt, gravity, cart_mass, pole_mass, half_length):
    n = states.shape[0]
    out = np.empty_like(states)
    total = cart_mass + pole_mass
    for i in range(n):
        x = states[i, 0]
        xd = states[i, 1]
        th = states[i, 2]
        thd = states[i, 3]
        s = np.sin(th)
        c = np.cos(th)
        temp = (actions[i, 0] + pole_mass * half_length * thd * thd * s) / total
        thdd = (gravity * s - c * temp) / (half_length * (4.0 / 3.0 - pole_mass * c * c / total))
        xdd = temp - pole_mass * half_length * thdd * c / total
        xd2 = xd + dt * xdd
        thd2 = thd + dt * thdd
        out[i, 0] = x + dt * xd2
        out[i, 1] = xd2
        out[i, 2] = th + dt * thd2
        out[i, 3] = thd2
    return out


def cartpole_step_np(states, actions, dt, gravity, cart_mass, pole_mass, half_length):
    x, xd, th, thd = states.T
    s, c = np.sin(th), np.cos(th)
    total = cart_mass + pole_mass
    temp = (actions[:, 0] + pole_mass * half_length * thd * thd * s) / total
    thdd = (gravity * s - c * temp) / (half_length * (4.0 / 3.0 - pole_mass * c * c / total))
    xdd = temp - pole_mass * half_length * thdd * c / total
    xd2 = xd + dt * xdd
    thd2 = thd + dt * thdd
    return np.stack([x + dt * xd2, xd2, th + dt * thd2, thd2], axis=1)


# ------------------------------------------ double integrator, linear policy


@njit
def linear_policy_mc_jit(starts, theta, dt, gamma, horizon, w_p, w_v, w_a):
    """Per-start discounted return of ``a = theta . s`` and its exact pathwise gradient."""
    n = starts.shape[0]
    returns = np.zeros(n)
    grads = np.zeros((n, 2))
    for i in range(n):
        p = starts[i, 0]
        v = starts[i, 1]
        # dp/dtheta_j, dv/dtheta_j
        dp0 = 0.0
        dp1 = 0.0
        dv0 = 0.0
        dv1 = 0.0
        disc = 1.0
        ret = 0.0
        g0 = 0.0
        g1 = 0.0
        for _ in range(horizon):
            a = theta[0] * p + theta[1] * v
            da0 = p + theta[0] * dp0 + theta[1] * dv0
            da1 = v + theta[0] * dp1 + theta[1] * dv1
            ret -= disc * (w_p * p * p + w_v * v * v + w_a * a * a)
            g0 -= disc * (2 * w_p * p * dp0 + 2 * w_v * v * dv0 + 2 * w_a * a * da0)
            g1 -= disc * (2 * w_p * p * dp1 + 2 * w_v * v * dv1 + 2 * w_a * a * da1)
            p, v = p + dt * v, v + dt * a
            dp0, dp1 = dp0 + dt * dv0, dp1 + dt * dv1
            dv0, dv1 = dv0 + dt * da0, dv1 + dt * da1
            disc *= gamma
        returns[i] = ret
        grads[i, 0] = g0
        grads[i, 1] = g1
    return returns, grads


def linear_policy_mc_np(starts, theta, dt, gamma, horizon, w_p, w_v, w_a):
    p = starts[:, 0].copy()
    v = starts[:, 1].copy()
    n = starts.shape[0]
    dp = np.zeros((n, 2))
    dv = np.zeros((n, 2))
    ret = np.zeros(n)
    grad = np.zeros((n, 2))
    disc = 1.0
    for _ in range(horizon):
        a = theta[0] * p + theta[1] * v
        da = np.stack([p, v], axis=1) + theta[0] * dp + theta[1] * dv
        ret -= disc * (w_p * p * p + w_v * v * v + w_a * a * a)
        grad -= disc * (2 * w_p * p[:, None] * dp + 2 * w_v * v[:, None] * dv + 2 * w_a * a[:, None] * da)
        p, v = p + dt * v, v + dt * a
        dp, dv = dp + dt * dv, dv + dt * da
        disc *= gamma
    return ret, grad


# ------------------------------------------------ inverse-variance weighting


@njit
def inverse_variance_combine_jit(means, variances, var_floor):
    n, c = means.shape
    targets = np.empty(n)
    weights = np.empty((n, c))
    for i in range(n):
        total = 0.0
        for j in range(c):
            w = 1.0 / max(variances[i, j], var_floor)
            weights[i, j] = w
            total += w
        acc = 0.0
        for j in range(c):
            weights[i, j] /= total
            acc += weights[i, j] * means[i, j]
        targets[i] = acc
    return targets, weights


def inverse_variance_combine_np(means, variances, var_floor):
    w = 1.0 / np.maximum(variances, var_floor)
    w = w / w.sum(axis=1, keepdims=True)
    return (w * means).sum(axis=1), w


# --------------------------------------------------------------- CEM refit


@njit
def elite_refit_jit(samples, scores, n_elite, std_floor):
    # stable sort on -score: ties keep the lower index first
    order = np.argsort(-scores, kind="mergesort")
    elite = order[:n_elite]
    d = samples.shape[1]
    mean = np.zeros(d)
    std = np.zeros(d)
    for k in range(n_elite):
        mean += samples[elite[k]]
    mean /= n_elite
    for k in range(n_elite):
        diff = samples[elite[k]] - mean
        std += diff * diff
    std = np.sqrt(std / n_elite)
    for j in range(d):
        if std[j] < std_floor:
            std[j] = std_floor
    return mean, std, elite


def elite_refit_np(samples, scores, n_elite, std_floor):
    elite = np.argsort(-scores, kind="stable")[:n_elite]
    chosen = samples[elite]
    mean = chosen.mean(axis=0)
    std = np.maximum(chosen.std(axis=0), std_floor)
    return mean, std, elite


if NUMBA_ENABLED:
    pendulum_step = pendulum_step_jit
    cartpole_step = cartpole_step_jit
    linear_policy_mc = linear_policy_mc_jit
    inverse_variance_combine = inverse_variance_combine_jit
    elite_refit = elite_refit_jit
else:
    pendulum_step = pendulum_step_np
    cartpole_step = cartpole_step_np
    linear_policy_mc = linear_policy_mc_np
    inverse_variance_combine = inverse_variance_combine_np
    elite_refit = elite_refit_np
