"""Gradient-error bound calculators and the double-integrator gradient-error experiment."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .actor import MaacConfig, RolloutNoise, objective_and_gradient
from .autodiff import Graph, Node, concat
from .buffer import ReplayBuffer
from .dynamics import DynamicsEnsemble, ModelTrainConfig, train_ensemble
from .envs import DoubleIntegrator, Env, NotLinearError, linear_policy_value_matrix, lqr_analytic_gradient
from .nets import MlpParams, ParamSet, mlp_apply, mlp_forward
from .optim import Adam

log = logging.getLogger(__name__)

SERIES_TOL = 1e-9


# ------------------------------------------------------------------ bounds


@dataclass
class BoundInputs:
    eps_f: float
    eps_Q: float
    H: int
    gamma: float = 0.99
    L_f: float = 1.0
    L_pi: float = 1.0
    L_Q: float = 1.0
    L_r: float = 1.0   # kept for completeness; the closed form does not use it
    K: float = 1.0
    alpha: float = 1.0
    c_tilde: float = 1.0
    r_max: float = 1.0

    def __post_init__(self):
        for name in ("eps_f", "eps_Q", "L_f", "L_pi", "L_Q", "L_r", "K", "alpha", "c_tilde", "r_max"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if int(self.H) != self.H or self.H < 0:
            raise ValueError(f"H must be a nonnegative integer, got {self.H}")
        self.H = int(self.H)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.K < 1.0:
            raise ValueError(f"K must be >= 1, got {self.K}")

    @property
    def L(self):
        return self.L_f + self.L_f * self.L_pi


def geometric_sum(x: float, n: int) -> float:
    """sum_{j<n} x^j; the explicit series is used when x is within 1e-9 of 1."""
    if abs(x - 1.0) < SERIES_TOL:
        return float(sum(x ** j for j in range(n)))
    return (x ** n - 1.0) / (x - 1.0)


def bound_constants(inp: BoundInputs) -> Tuple[float, float, float]:
    """``(c1, c2, eps_f * c1 + eps_Q * c2)``."""
    H, L = inp.H, inp.L
    gk = inp.gamma * inp.K
    c2 = gk ** H
    tail = inp.L_Q * geometric_sum(L, H) * c2
    if abs(L - 1.0) < SERIES_TOL:
        # L/(L-1) [G(gk L) - G(gk)] -> L sum_t gk^t * t as L -> 1
        head = L * sum(gk ** t * geometric_sum(L, t) for t in range(H))
    else:
        head = L / (L - 1.0) * (geometric_sum(gk * L, H) - geometric_sum(gk, H))
    c1 = head + tail
    return c1, c2, inp.eps_f * c1 + inp.eps_Q * c2


def tv_and_improvement_bounds(inp: BoundInputs) -> Tuple[float, float]:
    """``(total-variation bound, return-gap bound)`` for one update of size ``alpha``."""
    _, _, grad_bound = bound_constants(inp)
    c3 = math.sqrt(inp.c_tilde / 2.0)
    tv = inp.alpha * c3 * grad_bound
    return tv, 2.0 * inp.r_max / (1.0 - inp.gamma) * tv


# --------------------------------------------------- gradient-error experiment
#
# Duck-typed stand-ins plugged into the actor objective: a deterministic linear
# policy, the true linear dynamics, the exact remaining-horizon Q of the
# linear policy, and a regressed (deliberately under-trained) Q network.


class LinearPolicy(ParamSet):
    """a = s @ theta with theta of shape (state_dim, 1)."""

    def __init__(self, theta):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1, 1)
        self.params = {"theta": theta}
        self.action_dim = 1

    def sample(self, state: Node, eps, nodes=None):
        if nodes is None:
            nodes = self.bind(state.graph, trainable=False)
        return state @ nodes["theta"], None, None

    def act_np(self, states, eps=None):
        return np.asarray(states) @ self.params["theta"]


class TrueDynamics:
    """Exact double-integrator transition wrapped in the ensemble interface."""

    n_members = 1

    def __init__(self, env: Env):
        self.A, self.B, _, _ = env.linear_system()
        self.state_dim = self.A.shape[0]
        self.n_queries = 0

    def predict_rows(self, s: Node, a: Node, members, eps) -> Node:
        self.n_queries += 1
        return s @ self.A.T + a @ self.B.T


class AnalyticTerminal:
    """Exact Q of the linear policy over ``steps`` remaining steps, as a graph of (s, a, theta)."""

    def __init__(self, env: Env, steps: int, gamma: float):
        self.env, self.steps, self.gamma = env, steps, gamma
        self.A, self.B, _, _ = env.linear_system()

    def terminal(self, s: Node, a: Node, policy_nodes) -> Node:
        if self.steps == 0:
            return s[:, :1] * 0.0
        theta = policy_nodes["theta"]
        total = self.env.reward(s, a)
        disc = 1.0
        for _ in range(self.steps - 1):
            s = s @ self.A.T + a @ self.B.T
            a = s @ theta
            disc *= self.gamma
            total = total + self.env.reward(s, a) * disc
        return total


def exact_q_np(env: Env, theta, steps: int, gamma: float, states, actions) -> np.ndarray:
    """Q^theta over ``steps`` remaining steps: r(s, a) + gamma V_{steps-1}(s')."""
    if steps == 0:
        return np.zeros(states.shape[0])
    A, B, _, _ = env.linear_system()
    P, _ = linear_policy_value_matrix(env, theta, gamma, steps - 1)
    s2 = states @ A.T + actions @ B.T
    return env.reward_np(states, actions) - gamma * np.einsum("bi,ij,bj->b", s2, P, s2)


class QTerminal:
    """Learned time-aware Q used as the terminal value.

    Q(s, a) = y_mean + y_std * net([s, a] / x_scale, remaining / T), with
    ``remaining`` fixed per instance (see ``at``).
    """

    def __init__(self, net: MlpParams, x_scale, y_mean, y_std, horizon, remaining=None):
        self.net, self.x_scale = net, np.asarray(x_scale, dtype=np.float64)
        self.y_mean, self.y_std, self.horizon = float(y_mean), float(y_std), int(horizon)
        self.remaining = remaining

    def at(self, remaining: int) -> "QTerminal":
        return QTerminal(self.net, self.x_scale, self.y_mean, self.y_std, self.horizon, remaining)

    def _tau(self, n, remaining=None):
        rem = self.remaining if remaining is None else remaining
        if rem is None:
            raise ValueError("QTerminal: remaining steps not set (use .at)")
        return np.broadcast_to(np.asarray(rem, dtype=np.float64) / self.horizon, (n,)).reshape(n, 1)

    def terminal(self, s: Node, a: Node, policy_nodes=None) -> Node:
        g = s.graph
        x = concat([s, a], axis=1) * (1.0 / self.x_scale)
        x = concat([x, g.const(self._tau(s.value.shape[0]))], axis=1)
        return mlp_forward(self.net, x) * self.y_std + self.y_mean

    def predict_np(self, s, a, remaining=None):
        x = np.concatenate([np.concatenate([s, a], axis=1) / self.x_scale, self._tau(s.shape[0], remaining)], axis=1)
        return mlp_apply(self.net, x)[:, 0] * self.y_std + self.y_mean


def moment_matched_starts(rng: np.random.Generator, n: int, second_moment) -> np.ndarray:
    """``n`` (even) points, symmetric about 0, whose empirical E[s s^T] equals ``second_moment``."""
    half = rng.uniform(-1.0, 1.0, (max(n // 2, 1), second_moment.shape[0]))
    pts = np.concatenate([half, -half])
    emp = pts.T @ pts / pts.shape[0]
    # map the empirical second moment onto the target exactly
    w = np.linalg.cholesky(second_moment) @ np.linalg.inv(np.linalg.cholesky(emp))
    return pts @ w.T


def _closed_loop_states(env, theta, starts, steps):
    A, B, _, _ = env.linear_system()
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 1)
    s = starts
    for _ in range(steps):
        s = s @ A.T + (s @ theta) @ B.T
    return s


@dataclass
class GradErrorConfig:
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    h_list: Sequence[int] = (0, 1, 2, 3, 5, 10, 15, 20, 30)
    theta: Sequence[float] = (-1.0, -2.0)
    gamma: float = 0.99
    n_starts: int = 2048
    # learned Q: a fixed, small number of regression steps keeps it imperfect
    q_hidden: Sequence[int] = (32, 32)
    q_updates: int = 1500
    q_lr: float = 3e-3
    q_batch: int = 256
    q_action_noise: float = 0.5
    # learned ensemble: little data and a short fit, so rollout error compounds
    model_transitions: int = 500
    model_members: int = 3
    model_hidden: Sequence[int] = (64, 64)
    model_epochs: int = 6
    estimators: Sequence[str] = ("learned_model", "true_dynamics")


def _closed_loop_batch(env, theta, rng, n):
    """States of the closed loop at uniformly drawn times, with the number of remaining steps."""
    A, B, _, _ = env.linear_system()
    T = env.spec.horizon
    t = rng.integers(0, T, n)
    s = env.reset_batch(rng, n)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 1)
    out = s.copy()
    for k in range(int(t.max()) + 1):
        hit = t == k
        out[hit] = s[hit]
        s = s @ A.T + (s @ theta) @ B.T
    return out, T - t


def value_matrix_stack(env, theta, gamma, horizon) -> np.ndarray:
    """``P[k]``: value matrix of the linear policy with ``k`` steps left, k = 0..horizon."""
    P = [linear_policy_value_matrix(env, theta, gamma, 0)[0]]
    for k in range(1, horizon + 1):
        P.append(linear_policy_value_matrix(env, theta, gamma, k)[0])
    return np.stack(P)


def exact_q_time_indexed(env, theta, gamma, states, actions, remaining, P_stack=None) -> np.ndarray:
    """Exact Q with a per-row number of remaining steps (all >= 1)."""
    if P_stack is None:
        P_stack = value_matrix_stack(env, theta, gamma, int(np.max(remaining)))
    A, B, _, _ = env.linear_system()
    s2 = states @ A.T + actions @ B.T
    P = P_stack[np.asarray(remaining) - 1]
    return env.reward_np(states, actions) - gamma * np.einsum("bi,bij,bj->b", s2, P, s2)


def train_degraded_q(env: Env, theta, cfg: GradErrorConfig, rng: np.random.Generator) -> QTerminal:
    """One critic for every horizon, regressed for a fixed small number of Adam steps.

    Training pairs are closed-loop states at uniformly drawn times with
    perturbed actions, labelled with the exact remaining-horizon Q of the
    linear policy. Inputs and targets are standardised on a probe sample.
    """
    sd = env.spec.state_dim
    theta_col = np.asarray(theta, float).reshape(-1, 1)
    P_stack = value_matrix_stack(env, theta, cfg.gamma, env.spec.horizon)

    def draw(n):
        s, rem = _closed_loop_batch(env, theta, rng, n)
        a = s @ theta_col + cfg.q_action_noise * rng.standard_normal((n, 1))
        return s, a, exact_q_time_indexed(env, theta, cfg.gamma, s, a, rem, P_stack), rem

    ps, pa, py, _ = draw(4096)
    x_scale = np.concatenate([ps, pa], axis=1).std(axis=0)
    y_mean, y_std = float(py.mean()), float(max(py.std(), 1e-12))
    T = env.spec.horizon
    net = MlpParams([sd + 2, *cfg.q_hidden, 1], rng)
    opt = Adam(net.params, lr=cfg.q_lr)
    for _ in range(cfg.q_updates):
        s, a, y, rem = draw(cfg.q_batch)
        g = Graph()
        nodes = net.bind(g)
        x = np.concatenate([np.concatenate([s, a], axis=1) / x_scale, (rem / T)[:, None]], axis=1)
        pred = mlp_forward(net, g.const(x), nodes)
        loss = (pred - ((y - y_mean) / y_std).reshape(-1, 1)).square().mean()
        g.backward(loss)
        opt.step(net.params, {k: v.grad for k, v in nodes.items()})
    return QTerminal(net, x_scale, y_mean, y_std, T)


def train_experiment_model(env: Env, cfg: GradErrorConfig, rng: np.random.Generator) -> DynamicsEnsemble:
    sd, ad = env.spec.state_dim, env.spec.action_dim
    s = env.reset_batch(rng, cfg.model_transitions)
    a = rng.uniform(-3.0, 3.0, (cfg.model_transitions, ad))
    s2, r = env.step_batch(s, a)
    buf = ReplayBuffer(cfg.model_transitions, sd, ad)
    buf.add(s, a, r, s2, np.zeros(cfg.model_transitions))
    ens = DynamicsEnsemble(sd, ad, cfg.model_members, cfg.model_hidden, rng)
    train_ensemble(ens, buf, ModelTrainConfig(max_epochs=cfg.model_epochs, patience=5), rng)
    return ens


def maac_linear_gradient(env, theta, model, terminal, H, starts, gamma, n_members=1) -> np.ndarray:
    """MAAC gradient of the linear policy with noise-free rollouts (fixed noise = 0)."""
    policy = LinearPolicy(theta)
    cfg = MaacConfig(H=H, n_samples=1, beta=0.0, gamma=gamma)
    b = starts.shape[0]
    noise = RolloutNoise(np.zeros((H + 1, b, 1)), np.zeros((H, b, env.spec.state_dim)),
                         np.arange(H * b).reshape(H, b) % n_members)
    _, grads = objective_and_gradient(policy, model, terminal, starts, cfg, env=env, noise=noise)
    return grads["theta"][:, 0]


def exact_gradient_errors(h_list=(0, 1, 3, 5, 10), theta=(-3.0, -2.5), gamma=0.99, env=None) -> Dict[int, float]:
    """L1 error with true dynamics and the analytic terminal; zero up to rounding."""
    env = env or DoubleIntegrator(gamma=gamma)
    _, second = env.p0_moments()
    # 2 symmetric pairs already match E[s s^T] exactly for a quadratic objective
    starts = moment_matched_starts(np.random.default_rng(0), 8, second)
    g_star = lqr_analytic_gradient(env, theta, gamma)
    out = {}
    for H in h_list:
        term = AnalyticTerminal(env, env.spec.horizon - H, gamma)
        g = maac_linear_gradient(env, theta, TrueDynamics(env), term, H, starts, gamma)
        out[H] = float(np.abs(g - g_star).sum())
    return out


def gradient_error_experiment(cfg: GradErrorConfig, env: Optional[Env] = None,
                              csv_path: Optional[str] = None) -> List[dict]:
    """Per-seed L1 errors of the MAAC gradient against the exact LQR gradient.

    Both estimators share, per seed and H, the same degraded Q; they differ
    only in the dynamics used for the H-step unroll.
    """
    env = env or DoubleIntegrator(gamma=cfg.gamma)
    env.linear_system()   # raises NotLinearError for the nonlinear envs
    if max(cfg.h_list) > env.spec.horizon:
        raise ValueError(f"h_list entries must be <= horizon {env.spec.horizon}")
    theta = np.asarray(cfg.theta, dtype=np.float64)
    g_star = lqr_analytic_gradient(env, theta, cfg.gamma)
    _, second = env.p0_moments()
    rows = []
    for seed in cfg.seeds:
        root = np.random.SeedSequence(int(seed))
        model_rng, q_rng, start_rng = (np.random.default_rng(s) for s in root.spawn(3))
        model = train_experiment_model(env, cfg, model_rng) if "learned_model" in cfg.estimators else None
        starts = moment_matched_starts(start_rng, cfg.n_starts, second)
        q = train_degraded_q(env, theta, cfg, q_rng)
        for H in cfg.h_list:
            for est in cfg.estimators:
                if est == "learned_model":
                    dyn, m = model, model.n_members
                elif est == "true_dynamics":
                    dyn, m = TrueDynamics(env), 1
                else:
                    raise ValueError(f"unknown estimator {est!r}")
                g = maac_linear_gradient(env, theta, dyn, q.at(env.spec.horizon - H), H, starts, cfg.gamma, m)
                rows.append({"seed": int(seed), "H": int(H), "estimator": est,
                             "l1_error": float(np.abs(g - g_star).sum())})
                log.info("seed=%d H=%d %s l1=%.4g", seed, H, est, rows[-1]["l1_error"])
    if csv_path is not None:
        write_grad_error_csv(rows, csv_path)
    return rows


def write_grad_error_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "H", "estimator", "l1_error"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "l1_error": repr(r["l1_error"])})


def summarize(rows) -> Dict[Tuple[str, int], Tuple[float, float]]:
    """``{(estimator, H): (mean, std)}`` over seeds."""
    groups: Dict[Tuple[str, int], List[float]] = {}
    for r in rows:
        groups.setdefault((r["estimator"], r["H"]), []).append(r["l1_error"])
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in sorted(groups.items())}
