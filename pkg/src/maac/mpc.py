"""Cross-entropy-method planning on top of the learned model and critic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import kernels


@dataclass
class CemConfig:
    plan_horizon: int = 5
    population: int = 64
    elite_fraction: float = 0.1
    iterations: int = 5
    particles: int = 4
    std_floor: float = 1e-3
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ValueError("mpc.elite_fraction must lie in (0, 1]")
        if self.population < 2:
            raise ValueError("mpc.population must be >= 2")
        if self.iterations < 0:
            raise ValueError("mpc.iterations must be >= 0")
        if self.plan_horizon < 1:
            raise ValueError("mpc.plan_horizon must be >= 1")
        if self.particles < 1:
            raise ValueError("mpc.particles must be >= 1")

    @property
    def n_elite(self) -> int:
        # small epsilon so that e.g. 1/3 of 3 gives 1, not 0
        return max(1, int(math.floor(self.elite_fraction * self.population + 1e-9)))


def select_elite(scores, n_elite) -> np.ndarray:
    """Indices of the ``n_elite`` best scores; ties go to the lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:n_elite]


def cem_optimize(init_mean, init_std, score_fn: Callable[[np.ndarray], np.ndarray], cfg: CemConfig,
                 rng: np.random.Generator, bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Maximise ``score_fn`` over flat vectors shaped like ``init_mean``.

    ``score_fn`` maps a (population, D) array to (population,) scores.
    Returns ``(mean, std, history)`` where ``history`` holds the elite scores
    of every iteration.
    """
    mean = np.asarray(init_mean, dtype=np.float64).copy()
    shape = mean.shape
    mean = mean.reshape(-1)
    std = np.broadcast_to(np.asarray(init_std, dtype=np.float64), shape).reshape(-1).copy()
    lo = hi = None
    if bounds is not None:
        lo = np.broadcast_to(bounds[0], shape).reshape(-1)
        hi = np.broadcast_to(bounds[1], shape).reshape(-1)
    history: List[np.ndarray] = []
    for _ in range(cfg.iterations):
        samples = mean + std * rng.standard_normal((cfg.population, mean.size))
        if lo is not None:
            samples = np.clip(samples, lo, hi)
        scores = np.asarray(score_fn(samples), dtype=np.float64).reshape(cfg.population)
        mean, std, elite = kernels.elite_refit(np.ascontiguousarray(samples), scores, cfg.n_elite, cfg.std_floor)
        history.append(scores[elite])
    return mean.reshape(shape), std.reshape(shape), history


def _mean_rollout(state, policy, model, horizon):
    """Policy mean/std along the mean-policy rollout of the ensemble-mean model."""
    s = np.atleast_2d(np.asarray(state, dtype=np.float64))
    means, stds = [], []
    for _ in range(horizon):
        mu, log_std = policy.heads_np(s)
        means.append(mu[0])
        stds.append(np.exp(log_std[0]))
        nxt = [model.predict_np(s, mu, np.array([k])) for k in range(model.n_members)]
        s = np.mean(nxt, axis=0)
    return np.array(means), np.array(stds)


def score_sequences(state, sequences, policy, model, qpair, env, cfg: CemConfig, rng):
    """Mean over particles of the discounted model return plus discounted terminal min-Q.

    ``sequences`` is (population, plan_horizon, action_dim). All candidates
    share the particles' member draws and model noise.
    """
    pop, horizon, _ = sequences.shape
    sd = np.atleast_1d(state).shape[-1]
    total = np.zeros(pop)
    for _ in range(cfg.particles):
        s = np.repeat(np.atleast_2d(state), pop, axis=0)
        ret = np.zeros(pop)
        disc = 1.0
        for t in range(horizon):
            a = env.clip(sequences[:, t])
            ret += disc * env.reward_np(s, a)
            member = int(rng.integers(0, model.n_members))
            eps = np.broadcast_to(rng.standard_normal(sd), (pop, sd))
            s = model.predict_np(s, a, np.full(pop, member), eps)
            disc *= cfg.gamma
        a_end = env.clip(policy.act_np(s))
        ret += disc * qpair.min_q_np(s, a_end, target=False)
        total += ret
    return total / cfg.particles


def cem_plan(state, policy, model, qpair, cfg: CemConfig, rng: np.random.Generator, env) -> np.ndarray:
    """First action of the CEM-refined plan, seeded by the policy, clipped to the bounds."""
    state = np.asarray(state, dtype=np.float64).reshape(-1)
    mean, std = _mean_rollout(state, policy, model, cfg.plan_horizon)
    if cfg.iterations == 0:
        return env.clip(mean[0])
    bounds = (np.asarray(env.spec.action_low, dtype=np.float64), np.asarray(env.spec.action_high, dtype=np.float64))

    def score(flat):
        return score_sequences(state, flat.reshape(-1, *mean.shape), policy, model, qpair, env, cfg, rng)

    final, _, _ = cem_optimize(mean, std, score, cfg, rng, bounds)
    return env.clip(final[0])
