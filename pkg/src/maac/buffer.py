"""FIFO ring buffers for real (D_env) and imagined (D_model) transitions."""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray   # (B,)
    s2: np.ndarray
    done: np.ndarray  # (B,) float 0/1

    @property
    def size(self):
        return self.s.shape[0]

    def subset(self, idx):
        return Batch(*(col[idx] for col in self))

    def transitions(self):
        from .envs import Transition
        return [Transition(self.s[i], self.a[i], float(self.r[i]), self.s2[i], bool(self.done[i]))
                for i in range(self.size)]

    @staticmethod
    def concat(parts):
        return Batch(*(np.concatenate(cols) for cols in zip(*parts)))


class ReplayBuffer:
    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.inserted = 0  # total ever inserted

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, s, a, r, s2, done):
        """Append a block of transitions (leading axis is the batch)."""
        s = np.atleast_2d(s)
        n = s.shape[0]
        if n == 0:
            return
        if n > self.capacity:
            # only the newest `capacity` rows survive
            s, a, r, s2, done = (np.asarray(x)[-self.capacity:] for x in (s, a, r, s2, done))
            self.inserted += n - self.capacity
            n = self.capacity
        idx = (self.inserted + np.arange(n)) % self.capacity
        self.s[idx] = s
        self.a[idx] = np.atleast_2d(a).reshape(n, -1)
        self.r[idx] = np.asarray(r, dtype=np.float64).reshape(n)
        self.s2[idx] = np.atleast_2d(s2)
        self.done[idx] = np.asarray(done, dtype=np.float64).reshape(n)
        self.inserted += n

    def add_batch(self, batch: Batch):
        self.add(batch.s, batch.a, batch.r, batch.s2, batch.done)

    def ordered_indices(self):
        """Storage indices from oldest to newest."""
        n = len(self)
        start = self.inserted - n
        return (start + np.arange(n)) % self.capacity

    def all(self) -> Batch:
        return self.take(self.ordered_indices())

    def take(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.take(rng.integers(0, len(self), size=n))

    def state_dict(self, prefix):
        live = self.all()
        return {
            f"{prefix}.s": live.s, f"{prefix}.a": live.a, f"{prefix}.r": live.r,
            f"{prefix}.s2": live.s2, f"{prefix}.done": live.done,
            f"{prefix}.inserted": np.array([float(self.inserted)]),
        }

    def load_state_dict(self, state, prefix):
        inserted = int(state[f"{prefix}.inserted"][0])
        self.s[:] = 0
        self.inserted = inserted - len(state[f"{prefix}.r"])
        self.add(state[f"{prefix}.s"], state[f"{prefix}.a"], state[f"{prefix}.r"],
                 state[f"{prefix}.s2"], state[f"{prefix}.done"])


def sample_batch(env_buffer: ReplayBuffer, model_buffer: Optional[ReplayBuffer], batch_size: int,
                 real_fraction: float, rng: np.random.Generator) -> Batch:
    """Mix rows from D_env and D_model.

    Each row comes from D_env with probability ``real_fraction``.
    """
    if not 0.0 <= real_fraction <= 1.0:
        raise ValueError("real_fraction must lie in [0, 1]")
    n_real = int(rng.binomial(batch_size, real_fraction)) if 0 < real_fraction < 1 else \
        (batch_size if real_fraction == 1.0 else 0)
    n_model = batch_size - n_real
    if n_real and len(env_buffer) == 0:
        raise ValueError("D_env is empty")
    if n_model and (model_buffer is None or len(model_buffer) == 0):
        raise ValueError("D_model is empty but real_fraction < 1 requires model rows")
    parts = []
    if n_real:
        parts.append(env_buffer.sample(n_real, rng))
    if n_model:
        parts.append(model_buffer.sample(n_model, rng))
    return Batch.concat(parts)
