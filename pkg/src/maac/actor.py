"""Model-augmented actor objective and its pathwise gradient.

The objective unrolls the stochastic policy through the learned ensemble for
H steps, collects discounted rewards, and closes the rollout with the
terminal Q value. Everything except the policy weights enters the graph as
constants, so backpropagation through time only updates the policy.

``policy``, ``model`` and ``critic`` are duck-typed:

* ``policy.bind(graph, trainable)``, ``policy.sample(state, eps, nodes)``,
  ``policy.action_dim``
* ``model.predict_rows(s, a, members, eps)``, ``model.n_members``,
  ``model.state_dim``
* ``critic.terminal(s, a, policy_nodes)``

which lets the gradient-error experiment swap in a linear policy, the true
dynamics and an analytic terminal value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .autodiff import Graph, Node


@dataclass
class MaacConfig:
    H: int = 3
    n_samples: int = 4
    beta: float = 0.01
    gamma: float = 0.99
    entropy_states: str = "rollout"   # "start" | "rollout"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.H < 0:
            raise ValueError("maac.h must be >= 0")
        if self.n_samples < 1:
            raise ValueError("maac.n_samples must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("maac.gamma must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("maac.beta must be >= 0")
        if self.entropy_states not in ("start", "rollout"):
            raise ValueError("maac.entropy_states must be 'start' or 'rollout'")


class RolloutNoise(NamedTuple):
    """Fixed randomness of one objective evaluation.

    ``policy_eps[t]`` is (rows, action_dim) for t = 0..H, ``model_eps[t]`` is
    (rows, state_dim) and ``members[t]`` (rows,) for t = 0..H-1. Rows are
    laid out sample-major: row ``j * B + i`` is sample j of start state i.
    """
    policy_eps: np.ndarray
    model_eps: np.ndarray
    members: np.ndarray


def draw_noise(rng: np.random.Generator, n_starts: int, cfg: MaacConfig, state_dim: int, action_dim: int,
               n_members: int) -> RolloutNoise:
    rows = n_starts * cfg.n_samples
    return RolloutNoise(
        rng.standard_normal((cfg.H + 1, rows, action_dim)),
        rng.standard_normal((cfg.H, rows, state_dim)),
        rng.integers(0, n_members, size=(cfg.H, rows)),
    )


def maac_objective(policy, model, critic, start_states, cfg: MaacConfig, rng=None, env=None,
                   nodes=None, noise: Optional[RolloutNoise] = None) -> Node:
    """Scalar J(theta) = mean[sum_t gamma^t r_t + gamma^H Q(s_H, a_H)] + beta * mean entropy.

    ``nodes`` are the policy parameters bound on the graph to differentiate
    (bound as constants on a fresh graph when omitted).
    """
    start_states = np.atleast_2d(np.asarray(start_states, dtype=np.float64))
    b = start_states.shape[0]
    if b == 0:
        raise ValueError("maac_objective: empty start-state batch")
    if nodes is None:
        nodes = policy.bind(Graph(), trainable=False)
    g = next(iter(nodes.values())).graph
    if noise is None:
        noise = draw_noise(rng, b, cfg, start_states.shape[1], policy.action_dim,
                           getattr(model, "n_members", 1))
    s = g.const(np.tile(start_states, (cfg.n_samples, 1)))
    ret = None
    entropies = []
    for t in range(cfg.H):
        a, _, ent = policy.sample(s, noise.policy_eps[t], nodes)
        entropies.append(ent)
        r = env.reward(s, a) * (cfg.gamma ** t)
        ret = r if ret is None else ret + r
        s = model.predict_rows(s, a, noise.members[t], noise.model_eps[t])
    a, _, ent = policy.sample(s, noise.policy_eps[cfg.H], nodes)
    entropies.append(ent)
    term = critic.terminal(s, a, nodes) * (cfg.gamma ** cfg.H)
    ret = term if ret is None else ret + term
    objective = ret.mean()
    if cfg.beta > 0:
        used = entropies[:1] if cfg.entropy_states == "start" else entropies
        ent_mean = used[0].mean()
        for e in used[1:]:
            ent_mean = ent_mean + e.mean()
        objective = objective + ent_mean * (cfg.beta / len(used))
    return objective


def objective_and_gradient(policy, model, critic, start_states, cfg: MaacConfig, rng=None, env=None,
                           noise: Optional[RolloutNoise] = None):
    """``(J value, {param name: dJ/dparam})``."""
    g = Graph()
    nodes = policy.bind(g, trainable=True)
    obj = maac_objective(policy, model, critic, start_states, cfg, rng, env, nodes=nodes, noise=noise)
    g.backward(obj)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in nodes.items()}
    return float(obj.value), grads


def policy_gradient(policy, model, critic, start_states, cfg: MaacConfig, rng=None, env=None,
                    noise: Optional[RolloutNoise] = None):
    """Gradient of the objective w.r.t. the policy parameters only."""
    return objective_and_gradient(policy, model, critic, start_states, cfg, rng, env, noise)[1]


def actor_update(policy, optim, model, critic, start_states, cfg: MaacConfig, rng, env) -> float:
    """One ascent step on J; returns the objective value before the step."""
    value, grads = objective_and_gradient(policy, model, critic, start_states, cfg, rng, env)
    optim.step(policy.params, {k: -v for k, v in grads.items()})
    return value
