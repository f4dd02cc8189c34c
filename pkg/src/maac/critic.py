"""Twin Q-functions, Bellman residual and ensemble value-expansion targets."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from . import kernels
from .autodiff import Graph, Node, ShapeError, concat, minimum
from .buffer import Batch
from .dynamics import sample_member
from .nets import MlpParams, mlp_apply, mlp_forward
from .optim import Adam

VAR_FLOOR = 1e-6


class QPair:
    """Two online Q networks and their Polyak-averaged copies."""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), rng=None, tau=0.005, lr=3e-4,
                 use_target_networks=True):
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        sizes = [state_dim + action_dim, *hidden, 1]
        self.state_dim, self.action_dim = state_dim, action_dim
        self.q1 = MlpParams(sizes, rng)
        self.q2 = MlpParams(sizes, rng)
        self.target_q1 = self.q1.copy()
        self.target_q2 = self.q2.copy()
        self.tau = tau
        self.use_target_networks = use_target_networks
        self.optim = Adam(self.online_params(), lr=lr)

    def online_params(self) -> Dict[str, np.ndarray]:
        # views onto the live arrays; in-place updates reach q1/q2
        out = {f"q1.{k}": v for k, v in self.q1.params.items()}
        out.update({f"q2.{k}": v for k, v in self.q2.params.items()})
        return out

    def bind(self, g: Graph, trainable=True):
        n1 = self.q1.bind(g, trainable)
        n2 = self.q2.bind(g, trainable)
        return n1, n2

    def bootstrap_nets(self):
        if self.use_target_networks:
            return self.target_q1, self.target_q2
        return self.q1, self.q2

    def min_q_np(self, s, a, target=True):
        n1, n2 = self.bootstrap_nets() if target else (self.q1, self.q2)
        x = np.concatenate([s, a], axis=1)
        return np.minimum(mlp_apply(n1, x), mlp_apply(n2, x))[:, 0]

    def terminal(self, s: Node, a: Node, policy_nodes=None) -> Node:
        """min(Q1, Q2) of the online nets with their weights as constants."""
        return minimum(q_forward(self.q1, s, a), q_forward(self.q2, s, a))

    def state_dict(self, prefix="q"):
        out = {}
        for name in ("q1", "q2", "target_q1", "target_q2"):
            out.update({f"{prefix}.{name}.{k}": v for k, v in getattr(self, name).params.items()})
        out.update(self.optim.state_dict(f"{prefix}.adam."))
        return out

    def load_state_dict(self, state, prefix="q"):
        for name in ("q1", "q2", "target_q1", "target_q2"):
            net = getattr(self, name)
            net.load({k: state[f"{prefix}.{name}.{k}"] for k in net.params})
        self.optim.load_state_dict(state, f"{prefix}.adam.")


def q_forward(q: MlpParams, s: Node, a: Node, nodes=None) -> Node:
    """Q(s, a) with shape (B, 1)."""
    if s.value.shape[0] != a.value.shape[0]:
        raise ShapeError(f"q_forward: batch sizes differ ({s.value.shape[0]} vs {a.value.shape[0]})")
    return mlp_forward(q, concat([s, a], axis=1), nodes)


def td_target(batch: Batch, policy, qpair: QPair, gamma: float, rng: np.random.Generator,
              n_samples: int = 1, env=None) -> np.ndarray:
    """r + gamma * min target-Q(s', a'), a' ~ pi(s'), averaged over ``n_samples`` actions."""
    b = batch.size
    s = np.tile(batch.s2, (n_samples, 1))
    eps = rng.standard_normal((n_samples * b, qpair.action_dim))
    a = policy.act_np(s, eps)
    if env is not None:
        a = env.clip(a)
    q = qpair.min_q_np(s, a).reshape(n_samples, b)
    return (batch.r[None, :] + gamma * q).mean(axis=0)


def combine_candidates(means, variances, var_floor=VAR_FLOOR):
    """Inverse-variance weighted mean over candidate horizons.

    ``means``/``variances`` have shape (B, C). Variances are floored at
    ``var_floor`` so degenerate candidates fall back to uniform weights.
    Returns ``(targets (B,), weights (B, C))``.
    """
    means = np.ascontiguousarray(means, dtype=np.float64)
    variances = np.ascontiguousarray(variances, dtype=np.float64)
    if means.shape != variances.shape or means.ndim != 2:
        raise ShapeError(f"combine_candidates: means {means.shape} vs variances {variances.shape}")
    return kernels.inverse_variance_combine(means, variances, var_floor)


def steve_candidates(batch: Batch, ensemble, policy, qpair: QPair, H: int, n_samples: int,
                     rng: np.random.Generator, env, gamma: float, max_h: Optional[int] = None):
    """Per-transition candidate targets T_h, h = 0..max_h, for each of ``n_samples`` rollouts.

    T_h = r_0 + sum_{j=1..h} gamma^j r_j + gamma^(h+1) min Q'(s_{h+1}, a_{h+1}),
    with s_1 the stored next state. Returns an array (n_samples, B, max_h + 1).
    """
    if H < 0:
        raise ValueError("H must be >= 0")
    max_h = H if max_h is None else max_h
    b = batch.size
    rows = n_samples * b
    s = np.tile(batch.s2, (n_samples, 1))
    a = env.clip(policy.act_np(s, rng.standard_normal((rows, qpair.action_dim))))
    ret = np.tile(batch.r, n_samples)
    disc = gamma
    out = np.empty((rows, max_h + 1))
    for h in range(max_h + 1):
        out[:, h] = ret + disc * qpair.min_q_np(s, a)
        if h == max_h:
            break
        ret = ret + disc * env.reward_np(s, a)
        members = sample_member(rng, ensemble.n_members, rows)
        s = ensemble.predict_np(s, a, members, rng.standard_normal((rows, qpair.state_dim)))
        a = env.clip(policy.act_np(s, rng.standard_normal((rows, qpair.action_dim))))
        disc *= gamma
    return out.reshape(n_samples, b, max_h + 1)


def steve_target(batch: Batch, ensemble, policy, qpair: QPair, H: int, n_samples: int,
                 rng: np.random.Generator, env, gamma: float,
                 candidates: Optional[Sequence[int]] = None) -> np.ndarray:
    """Value-expansion target: inverse-variance blend of the H + 1 candidates.

    ``candidates`` restricts the blend to a subset of horizons (the rollout
    is only as long as the largest one requested).
    """
    if H < 0:
        raise ValueError("H must be >= 0")
    hs = list(range(H + 1)) if candidates is None else sorted(set(int(h) for h in candidates))
    if not hs or hs[0] < 0 or hs[-1] > H:
        raise ValueError(f"candidates must lie in [0, {H}]")
    cand = steve_candidates(batch, ensemble, policy, qpair, H, n_samples, rng, env, gamma, max_h=hs[-1])
    cand = cand[:, :, hs]
    if len(hs) == 1:
        return cand[:, :, 0].mean(axis=0)
    targets, _ = combine_candidates(cand.mean(axis=0), cand.var(axis=0))
    return targets


def bellman_loss(qpair: QPair, batch: Batch, targets, nodes=None) -> Node:
    """mean[(Q1 - T)^2] + mean[(Q2 - T)^2]; ``targets`` are constants."""
    if nodes is None:
        nodes = qpair.bind(Graph())
    n1, n2 = nodes
    g = n1["w0"].graph
    s, a = g.const(batch.s), g.const(batch.a)
    t = g.const(np.asarray(targets, dtype=np.float64).reshape(-1, 1))
    l1 = (q_forward(qpair.q1, s, a, n1) - t).square().mean()
    l2 = (q_forward(qpair.q2, s, a, n2) - t).square().mean()
    return l1 + l2


def critic_update(qpair: QPair, batch: Batch, targets) -> float:
    g = Graph()
    n1, n2 = qpair.bind(g)
    loss = bellman_loss(qpair, batch, targets, (n1, n2))
    g.backward(loss)
    grads = {f"q1.{k}": v.grad for k, v in n1.items()}
    grads.update({f"q2.{k}": v.grad for k, v in n2.items()})
    qpair.optim.step(qpair.online_params(), grads)
    polyak_update(qpair)
    return float(loss.value)


def polyak_update(qpair: QPair, tau: Optional[float] = None):
    """target <- (1 - tau) target + tau online, in place."""
    tau = qpair.tau if tau is None else tau
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for online, target in ((qpair.q1, qpair.target_q1), (qpair.q2, qpair.target_q2)):
        for k, v in online.params.items():
            target.params[k] = (1.0 - tau) * target.params[k] + tau * v
