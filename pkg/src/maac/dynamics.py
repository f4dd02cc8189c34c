"""Bootstrap ensemble of probabilistic (diagonal Gaussian) dynamics models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .autodiff import LOG_2PI, Graph, Node, ShapeError, concat, smooth_clamp, smooth_clamp_np
from .buffer import Batch, ReplayBuffer
from .nets import MlpParams, mlp_apply, mlp_forward
from .optim import Adam

log = logging.getLogger(__name__)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 2.0


@dataclass
class ModelTrainConfig:
    max_epochs: int = 50      # G1
    patience: int = 5
    val_fraction: float = 0.1
    batch_size: int = 256
    min_samples: int = 32


@dataclass
class TrainStats:
    train_nll: List[List[float]] = field(default_factory=list)
    # val_nll[k][0] is the value before any update
    val_nll: List[List[float]] = field(default_factory=list)
    epochs: List[int] = field(default_factory=list)
    best_val: List[float] = field(default_factory=list)

    @property
    def mean_best_val(self):
        return float(np.mean(self.best_val)) if self.best_val else float("nan")


def gaussian_nll_np(mu, logvar, target):
    """Mean over rows of the diagonal Gaussian negative log-likelihood."""
    per = 0.5 * (np.square(target - mu) * np.exp(-logvar) + logvar + LOG_2PI)
    return float(per.sum(axis=-1).mean())


class DynamicsEnsemble:
    """M models, each mapping normalised (s, a) to (delta mean, raw log-variance)."""

    def __init__(self, state_dim, action_dim, n_members=5, hidden=(128, 128), rng=None, lr=1e-3):
        if n_members < 1:
            raise ValueError("ensemble needs at least one member")
        self.state_dim, self.action_dim = int(state_dim), int(action_dim)
        sizes = [state_dim + action_dim, *hidden, 2 * state_dim]
        self.members = [MlpParams(sizes, rng) for _ in range(n_members)]
        self.optims = [Adam(m.params, lr=lr) for m in self.members]
        self.in_mean = np.zeros(state_dim + action_dim)
        self.in_std = np.ones(state_dim + action_dim)
        # incremented whenever the ensemble is queried for a prediction
        self.n_queries = 0

    @property
    def n_members(self):
        return len(self.members)

    def fit_normalizer(self, states, actions):
        x = np.concatenate([states, actions], axis=1)
        self.in_mean = x.mean(axis=0)
        self.in_std = np.maximum(x.std(axis=0), 1e-6)

    def normalize(self, x):
        return (x - self.in_mean) / self.in_std

    def denormalize(self, z):
        return z * self.in_std + self.in_mean

    # ------------------------------------------------------------ graph path

    def heads(self, member: int, s: Node, a: Node, nodes=None):
        self._check_member(member)
        x = concat([s, a], axis=1)
        z = (x - self.in_mean) * (1.0 / self.in_std)
        out = mlp_forward(self.members[member], z, nodes)
        d = self.state_dim
        mu = out[:, :d]
        logvar = smooth_clamp(out[:, d:], LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def predict(self, member: int, s: Node, a: Node, epsilon, nodes=None) -> Node:
        """s' = s + delta_mu + eps * exp(logvar / 2), differentiable in s, a and weights."""
        eps = np.asarray(epsilon, dtype=np.float64)
        if eps.shape != s.value.shape:
            raise ShapeError(f"predict: epsilon {eps.shape} != state {s.value.shape}")
        self.n_queries += 1
        mu, logvar = self.heads(member, s, a, nodes)
        return s + mu + (logvar * 0.5).exp() * eps

    def predict_rows(self, s: Node, a: Node, members, eps) -> Node:
        """Per-row member choice; rows are grouped by member and restored in order."""
        members = np.asarray(members)
        eps = np.asarray(eps, dtype=np.float64)
        uniq = np.unique(members)
        if uniq.size == 1:
            return self.predict(int(uniq[0]), s, a, eps)
        parts, order = [], []
        for k in uniq:
            rows = np.flatnonzero(members == k)
            parts.append(self.predict(int(k), s[rows], a[rows], eps[rows]))
            order.append(rows)
        perm = np.concatenate(order)
        return concat(parts, axis=0)[np.argsort(perm)]

    def nll(self, member: int, s, a, s2, nodes) -> Node:
        g = nodes["w0"].graph
        mu, logvar = self.heads(member, g.const(s), g.const(a), nodes)
        sq = (mu - (s2 - s)).square()
        per = (sq * (-logvar).exp() + logvar + LOG_2PI) * 0.5
        return per.sum(axis=1).mean()

    # ------------------------------------------------------------ numpy path

    def mean_logvar_np(self, member, states, actions):
        self._check_member(member)
        z = self.normalize(np.concatenate([states, actions], axis=1))
        out = mlp_apply(self.members[member], z)
        d = self.state_dim
        return out[:, :d], smooth_clamp_np(out[:, d:], LOGVAR_MIN, LOGVAR_MAX)

    def predict_np(self, states, actions, members, eps=None):
        """Sample next states without building a graph. ``eps=None`` gives the mean."""
        members = np.broadcast_to(np.asarray(members), (states.shape[0],))
        self.n_queries += 1
        out = np.empty_like(states)
        for k in np.unique(members):
            rows = members == k
            mu, logvar = self.mean_logvar_np(int(k), states[rows], actions[rows])
            nxt = states[rows] + mu
            if eps is not None:
                nxt = nxt + np.exp(0.5 * logvar) * eps[rows]
            out[rows] = nxt
        return out

    def val_nll_np(self, member, batch: Batch):
        mu, logvar = self.mean_logvar_np(member, batch.s, batch.a)
        return gaussian_nll_np(mu, logvar, batch.s2 - batch.s)

    def _check_member(self, member):
        if not 0 <= member < self.n_members:
            raise IndexError(f"member index {member} out of range for M={self.n_members}")

    # ------------------------------------------------------------ checkpointing

    def state_dict(self, prefix="model"):
        out = {f"{prefix}.in_mean": self.in_mean, f"{prefix}.in_std": self.in_std}
        for k, (m, opt) in enumerate(zip(self.members, self.optims)):
            out.update({f"{prefix}.{k}.{n}": v for n, v in m.params.items()})
            out.update(opt.state_dict(f"{prefix}.{k}.adam."))
        return out

    def load_state_dict(self, state, prefix="model"):
        self.in_mean = np.array(state[f"{prefix}.in_mean"])
        self.in_std = np.array(state[f"{prefix}.in_std"])
        for k, (m, opt) in enumerate(zip(self.members, self.optims)):
            m.load({n: state[f"{prefix}.{k}.{n}"] for n in m.params})
            opt.load_state_dict(state, f"{prefix}.{k}.adam.")


def predict(ensemble: DynamicsEnsemble, member_index: int, s: Node, a: Node, epsilon) -> Node:
    return ensemble.predict(member_index, s, a, epsilon)


def sample_member(rng: np.random.Generator, n_members: int, size=None):
    """Uniform draw from {0, ..., M-1}."""
    if n_members < 1:
        raise ValueError("need M >= 1")
    return rng.integers(0, n_members, size=size)


def train_ensemble(ensemble: DynamicsEnsemble, env_buffer: ReplayBuffer, cfg: ModelTrainConfig,
                   rng: np.random.Generator) -> TrainStats:
    """Maximum-likelihood training of every member with early stopping.

    A validation split (``cfg.val_fraction``) is held out; each member trains
    on its own bootstrap resample of the remainder and keeps its
    best-validation weights.
    """
    data = env_buffer.all()
    n = data.size
    if n < max(cfg.min_samples, 2):
        raise ValueError(f"train_ensemble: {n} transitions < min_samples={cfg.min_samples}")
    ensemble.fit_normalizer(data.s, data.a)
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(cfg.val_fraction * n))), n - 1)
    val = data.subset(perm[:n_val])
    train_idx = perm[n_val:]
    stats = TrainStats()
    # seeds drawn from rng itself, so a restored generator reproduces the streams
    member_rngs = [np.random.default_rng(int(x)) for x in rng.integers(0, 2 ** 63, ensemble.n_members)]
    for k, (member, opt, mrng) in enumerate(zip(ensemble.members, ensemble.optims, member_rngs)):
        boot = train_idx[mrng.integers(0, train_idx.size, train_idx.size)]
        best = ensemble.val_nll_np(k, val)
        best_params = {name: v.copy() for name, v in member.params.items()}
        vals, trains = [best], []
        since, epochs = 0, 0
        while epochs < cfg.max_epochs:
            epochs += 1
            order = mrng.permutation(boot)
            losses = []
            for start in range(0, order.size, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                g = Graph()
                nodes = member.bind(g)
                loss = ensemble.nll(k, data.s[idx], data.a[idx], data.s2[idx], nodes)
                g.backward(loss)
                opt.step(member.params, {name: nd.grad for name, nd in nodes.items()})
                losses.append(float(loss.value))
            trains.append(float(np.mean(losses)))
            v = ensemble.val_nll_np(k, val)
            vals.append(v)
            if v < best:
                best, since = v, 0
                best_params = {name: p.copy() for name, p in member.params.items()}
            else:
                since += 1
            if since >= cfg.patience:
                break
        member.load(best_params)
        stats.train_nll.append(trains)
        stats.val_nll.append(vals)
        stats.epochs.append(epochs)
        stats.best_val.append(best)
    return stats


def generate_model_rollouts(ensemble: DynamicsEnsemble, policy, env_buffer: ReplayBuffer, k: int, n: int,
                            rng: np.random.Generator, env) -> Batch:
    """Unroll the current stochastic policy for ``k`` steps from ``n`` buffer states.

    A fresh uniform member is drawn for every row at every step. Returns
    ``n * k`` plain transitions.
    """
    sd, ad = ensemble.state_dim, ensemble.action_dim
    if k <= 0 or n <= 0:
        return Batch(np.zeros((0, sd)), np.zeros((0, ad)), np.zeros(0), np.zeros((0, sd)), np.zeros(0))
    if len(env_buffer) == 0:
        raise ValueError("generate_model_rollouts: empty env buffer")
    s = env_buffer.sample(n, rng).s
    parts = []
    for _ in range(k):
        a = env.clip(policy.act_np(s, rng.standard_normal((n, ad))))
        members = sample_member(rng, ensemble.n_members, n)
        s2 = ensemble.predict_np(s, a, members, rng.standard_normal((n, sd)))
        parts.append(Batch(s, a, env.reward_np(s, a), s2, np.zeros(n)))
        s = s2
    return Batch.concat(parts)
