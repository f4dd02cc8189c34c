"""MLPs and the diagonal-Gaussian policy.

Parameters live in plain ``dict[str, ndarray]`` containers so that the
optimiser, checkpointing and Polyak averaging can treat every network the
same way. ``bind`` puts the arrays on a graph, either as differentiable
leaves or as constants (gradient stop).
"""

from __future__ import annotations

import math
from typing import Dict, Optional, Sequence

import numpy as np

from .autodiff import LOG_2PI, Graph, Node, ShapeError, reparam_sample, smooth_clamp, smooth_clamp_np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class ParamSet:
    params: Dict[str, np.ndarray]

    def bind(self, g: Graph, trainable: bool = True) -> Dict[str, Node]:
        make = g.param if trainable else g.const
        return {k: make(v) for k, v in self.params.items()}

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def load(self, params: Dict[str, np.ndarray]):
        for k in self.params:
            if params[k].shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected {self.params[k].shape}, got {params[k].shape}")
            self.params[k] = np.array(params[k], dtype=np.float64)


def _uniform_layer(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


class MlpParams(ParamSet):
    """tanh hidden layers, identity output. ``sizes = [in, h1, ..., out]``."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if rng is None:
                w, b = np.zeros((n_in, n_out)), np.zeros(n_out)
            else:
                w, b = _uniform_layer(rng, n_in, n_out)
            self.params[f"w{i}"] = w
            self.params[f"b{i}"] = b

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def layers(self, nodes=None):
        src = self.params if nodes is None else nodes
        return [(src[f"w{i}"], src[f"b{i}"]) for i in range(self.n_layers)]


def mlp_forward(params: MlpParams, x: Node, nodes: Optional[Dict[str, Node]] = None,
                activate_output: bool = False) -> Node:
    """Differentiable forward pass.

    ``nodes`` are the bound parameters; without them the weights enter the
    graph as constants.
    """
    if x.value.shape[-1] != params.sizes[0]:
        raise ShapeError(f"mlp_forward: input width {x.value.shape[-1]} != {params.sizes[0]}")
    if nodes is None:
        nodes = params.bind(x.graph, trainable=False)
    h = x
    layers = params.layers(nodes)
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1 or activate_output:
            h = h.tanh()
    return h


def mlp_apply(params: MlpParams, x: np.ndarray, activate_output: bool = False) -> np.ndarray:
    """Plain numpy forward pass, no tape."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.sizes[0]:
        raise ShapeError(f"mlp_apply: input width {x.shape[-1]} != {params.sizes[0]}")
    layers = params.layers()
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if i < len(layers) - 1 or activate_output:
            x = np.tanh(x)
    return x


class GaussianPolicy(ParamSet):
    """Unsquashed diagonal Gaussian; log-sigma is smoothly clamped to [-5, 2]."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(64, 64),
                 rng: Optional[np.random.Generator] = None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        trunk = MlpParams([state_dim, *hidden], rng)
        width = trunk.sizes[-1]
        self.params = {f"trunk.{k}": v for k, v in trunk.params.items()}
        # only the layer sizes are kept; weights live in self.params
        trunk.params = {}
        self.trunk = trunk
        if rng is None:
            heads = [(np.zeros((width, action_dim)), np.zeros(action_dim)) for _ in range(2)]
        else:
            heads = [_uniform_layer(rng, width, action_dim) for _ in range(2)]
        self.params["mean.w"], self.params["mean.b"] = heads[0]
        self.params["log_std.w"], self.params["log_std.b"] = heads[1]

    def _trunk_nodes(self, nodes):
        return {k[len("trunk."):]: v for k, v in nodes.items() if k.startswith("trunk.")}

    def heads(self, state: Node, nodes: Optional[Dict[str, Node]] = None):
        if nodes is None:
            nodes = self.bind(state.graph, trainable=False)
        h = mlp_forward(self.trunk, state, self._trunk_nodes(nodes), activate_output=True)
        mu = h @ nodes["mean.w"] + nodes["mean.b"]
        log_std = smooth_clamp(h @ nodes["log_std.w"] + nodes["log_std.b"], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def heads_np(self, states: np.ndarray):
        p = self.params
        h = np.asarray(states, dtype=np.float64)
        i = 0
        while f"trunk.w{i}" in p:
            h = np.tanh(h @ p[f"trunk.w{i}"] + p[f"trunk.b{i}"])
            i += 1
        mu = h @ p["mean.w"] + p["mean.b"]
        log_std = smooth_clamp_np(h @ p["log_std.w"] + p["log_std.b"], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def act_np(self, states, eps=None):
        mu, log_std = self.heads_np(states)
        if eps is None:
            return mu
        return mu + eps * np.exp(log_std)

    # duck-typed hook used by the actor objective
    def sample(self, state: Node, eps, nodes=None):
        return policy_sample(self, state, eps, nodes)


def policy_sample(policy: GaussianPolicy, state: Node, epsilon, nodes=None):
    """Reparameterised action, its log-density and the analytic entropy.

    Returns ``(action (B,k), log_prob (B,1), entropy (B,1))``.
    """
    eps = np.asarray(epsilon, dtype=np.float64)
    mu, log_std = policy.heads(state, nodes)
    if eps.shape[-1] != policy.action_dim:
        raise ShapeError(f"policy_sample: epsilon width {eps.shape[-1]} != action dim {policy.action_dim}")
    eps = np.broadcast_to(eps, mu.value.shape)
    action = reparam_sample(mu, log_std, eps)
    k = policy.action_dim
    const = -0.5 * k * LOG_2PI - 0.5 * np.sum(eps * eps, axis=-1, keepdims=True)
    log_prob = const - log_std.sum(axis=-1, keepdims=True)
    entropy = log_std.sum(axis=-1, keepdims=True) + 0.5 * k * (LOG_2PI + 1.0)
    return action, log_prob, entropy
