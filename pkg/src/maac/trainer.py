"""Training loop: real rollouts, model fitting, imagined data, actor and critic updates."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from typing import List, Optional

import numpy as np

from .actor import actor_update
from .buffer import Batch, ReplayBuffer, sample_batch
from .checkpoint import load_checkpoint, rng_from_array, rng_to_array, save_checkpoint
from .config import TrainConfig, validate
from .critic import QPair, critic_update, steve_target, td_target
from .dynamics import DynamicsEnsemble, ModelTrainConfig, generate_model_rollouts, train_ensemble
from .envs import Env, make_env
from .nets import GaussianPolicy
from .optim import Adam

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("iteration", "env_steps", "eval_return_mean", "eval_return_std", "model_val_nll",
                   "actor_objective", "critic_loss", "policy_entropy", "seconds")

# named substreams of the root seed; the index is the spawn key
STREAMS = ("env", "policy", "model", "rollout", "cem", "critic", "batch", "eval")


def make_streams(seed: int):
    return {name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
            for i, name in enumerate(STREAMS)}


def collect_env_rollouts(policy, env: Env, n: int, rng: np.random.Generator, start_rng=None,
                         buffer: Optional[ReplayBuffer] = None) -> Batch:
    """``n`` full episodes with sampled (then clipped) actions.

    ``start_rng`` draws the initial states (defaults to ``rng``).
    """
    if n < 1:
        raise ValueError("collect_env_rollouts: n must be >= 1")
    T, ad = env.spec.horizon, env.spec.action_dim
    s = env.reset_batch(start_rng or rng, n)
    parts = []
    for t in range(T):
        a = env.clip(policy.act_np(s, rng.standard_normal((n, ad))))
        s2, r = env.step_batch(s, a)
        parts.append(Batch(s, a, r, s2, np.full(n, float(t + 1 >= T))))
        s = s2
    # episode-major order: all steps of episode 0 first
    out = Batch(*(np.stack(cols, axis=1).reshape(n * T, *cols[0].shape[1:]) for cols in zip(*parts)))
    if buffer is not None:
        buffer.add_batch(out)
    return out


def evaluate_policy(policy, env: Env, n: int, rng: np.random.Generator, gamma: float, planner=None) -> np.ndarray:
    """Discounted returns of ``n`` episodes with mean actions (or ``planner(state)``)."""
    s = env.reset_batch(rng, n)
    ret = np.zeros(n)
    disc = 1.0
    for _ in range(env.spec.horizon):
        if planner is None:
            a = policy.act_np(s)
        else:
            a = np.stack([planner(row) for row in s])
        s, r = env.step_batch(s, a)
        ret += disc * r
        disc *= gamma
    return ret


def policy_entropy_np(policy, states) -> float:
    _, log_std = policy.heads_np(states)
    k = log_std.shape[1]
    return float(np.mean(log_std.sum(axis=1) + 0.5 * k * (math.log(2 * math.pi) + 1.0)))


class Metrics:
    def __init__(self, rows=None):
        self.rows: List[dict] = list(rows or [])

    def append(self, row: dict):
        self.rows.append({k: row[k] for k in METRICS_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_COLUMNS)
            for r in self.rows:
                w.writerow([r["iteration"], r["env_steps"]] + [repr(float(r[k])) for k in METRICS_COLUMNS[2:]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = []
            for r in csv.DictReader(fh):
                rows.append({k: (int(r[k]) if k in ("iteration", "env_steps") else float(r[k]))
                             for k in METRICS_COLUMNS})
        return cls(rows)


class Trainer:
    """Holds every piece of mutable training state; one ``step_iteration`` per outer loop."""

    def __init__(self, cfg: TrainConfig):
        validate(cfg)
        self.cfg = cfg
        self.env = make_env(cfg.env.name)
        sd, ad = self.env.spec.state_dim, self.env.spec.action_dim
        self.rngs = make_streams(cfg.run.seed)
        t = cfg.train
        self.policy = GaussianPolicy(sd, ad, cfg.nets.policy_hidden, self.rngs["policy"])
        self.policy_optim = Adam(self.policy.params, lr=t.lr_policy)
        self.qpair = QPair(sd, ad, cfg.nets.q_hidden, self.rngs["critic"], tau=t.tau, lr=t.lr_q,
                           use_target_networks=t.use_target_networks)
        self.ensemble = DynamicsEnsemble(sd, ad, cfg.model.members, cfg.nets.model_hidden,
                                         self.rngs["model"], lr=t.lr_model)
        self.env_buffer = ReplayBuffer(t.env_capacity, sd, ad)
        self.model_buffer = ReplayBuffer(t.model_capacity, sd, ad)
        self.model_cfg = ModelTrainConfig(max_epochs=cfg.model.max_epochs, patience=cfg.model.patience,
                                          val_fraction=cfg.model.val_fraction, batch_size=cfg.model.batch_size,
                                          min_samples=cfg.model.min_samples)
        self.iteration = 0
        self.env_steps = 0
        self.elapsed = 0.0
        self.metrics = Metrics()
        self.model_trained = False

    # ------------------------------------------------------------ pieces

    @property
    def gamma(self):
        return self.cfg.maac.gamma

    def sample_batch(self) -> Batch:
        use_model = not self.cfg.ablation.real_data_only and len(self.model_buffer) > 0
        frac = self.cfg.train.real_fraction if use_model else 1.0
        return sample_batch(self.env_buffer, self.model_buffer if use_model else None,
                            self.cfg.train.batch_size, frac, self.rngs["batch"])

    def critic_targets(self, batch: Batch) -> np.ndarray:
        H = self.cfg.horizon
        if self.cfg.ablation.no_steve or H == 0:
            return td_target(batch, self.policy, self.qpair, self.gamma, self.rngs["critic"],
                             self.cfg.n_samples, self.env)
        return steve_target(batch, self.ensemble, self.policy, self.qpair, H, self.cfg.n_samples,
                            self.rngs["critic"], self.env, self.gamma)

    def step_iteration(self) -> dict:
        cfg, t = self.cfg, self.cfg.train
        start = time.perf_counter()
        collect_env_rollouts(self.policy, self.env, t.rollouts_per_iter, self.rngs["rollout"],
                             self.rngs["env"], self.env_buffer)
        self.env_steps += t.rollouts_per_iter * self.env.spec.horizon

        val_nll = float("nan")
        if len(self.env_buffer) >= cfg.model.min_samples:
            stats = train_ensemble(self.ensemble, self.env_buffer, self.model_cfg, self.rngs["model"])
            val_nll = stats.mean_best_val
            self.model_trained = True

        k = cfg.rollout_length
        if not cfg.ablation.real_data_only and k > 0 and self.model_trained:
            self.model_buffer.add_batch(generate_model_rollouts(
                self.ensemble, self.policy, self.env_buffer, k, t.model_rollouts, self.rngs["rollout"], self.env))

        if cfg.horizon > 0 and not self.model_trained:
            raise RuntimeError("the actor needs a trained model; lower model.min_samples")
        mcfg = cfg.maac_config()
        actor_vals, critic_losses = [], []
        batch = None
        for _ in range(t.g2):
            batch = self.sample_batch()
            starts = batch.s[:t.actor_batch_size]
            actor_vals.append(actor_update(self.policy, self.policy_optim, self.ensemble, self.qpair, starts,
                                           mcfg, self.rngs["policy"], self.env))
            critic_losses.append(critic_update(self.qpair, batch, self.critic_targets(batch)))

        returns = evaluate_policy(self.policy, self.env, t.eval_episodes, self.rngs["eval"], self.gamma)
        self.iteration += 1
        if cfg.run.record_wallclock:
            self.elapsed += time.perf_counter() - start
        row = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "eval_return_mean": float(returns.mean()),
            "eval_return_std": float(returns.std()),
            "model_val_nll": val_nll,
            "actor_objective": float(np.mean(actor_vals)),
            "critic_loss": float(np.mean(critic_losses)),
            "policy_entropy": policy_entropy_np(self.policy, batch.s),
            "seconds": self.elapsed if cfg.run.record_wallclock else 0.0,
        }
        self.metrics.append(row)
        log.info("iter %d  steps %d  return %.4f +- %.4f  nll %.3f  J %.4f  LQ %.4g", row["iteration"],
                 row["env_steps"], row["eval_return_mean"], row["eval_return_std"], val_nll,
                 row["actor_objective"], row["critic_loss"])
        return row

    def run(self, run_dir: Optional[str] = None) -> Metrics:
        while self.iteration < self.cfg.train.iterations:
            self.step_iteration()
            every = self.cfg.run.checkpoint_every
            if run_dir is not None:
                self.metrics.to_csv(os.path.join(run_dir, "metrics.csv"))
                if every and self.iteration % every == 0:
                    self.save(os.path.join(run_dir, f"ckpt_{self.iteration:04d}"))
        if run_dir is not None:
            self.metrics.to_csv(os.path.join(run_dir, "metrics.csv"))
            self.save(os.path.join(run_dir, "ckpt_final"))
        return self.metrics

    # ------------------------------------------------------------ checkpoints

    def state_dict(self):
        arrays = {f"policy.{k}": v for k, v in self.policy.params.items()}
        arrays.update(self.policy_optim.state_dict("policy.adam."))
        arrays.update(self.qpair.state_dict("q"))
        arrays.update(self.ensemble.state_dict("model"))
        arrays.update(self.env_buffer.state_dict("d_env"))
        arrays.update(self.model_buffer.state_dict("d_model"))
        arrays.update({f"rng.{name}": rng_to_array(g) for name, g in self.rngs.items()})
        header = {
            "config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "elapsed": self.elapsed,
            "model_trained": self.model_trained,
            "metrics": self.metrics.rows,
        }
        return header, arrays

    def save(self, path):
        header, arrays = self.state_dict()
        save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path) -> "Trainer":
        header, arrays = load_checkpoint(path)
        tr = cls(TrainConfig.from_dict(header["config"]))
        tr.policy.load({k: arrays[f"policy.{k}"] for k in tr.policy.params})
        tr.policy_optim.load_state_dict(arrays, "policy.adam.")
        tr.qpair.load_state_dict(arrays, "q")
        tr.ensemble.load_state_dict(arrays, "model")
        tr.env_buffer.load_state_dict(arrays, "d_env")
        tr.model_buffer.load_state_dict(arrays, "d_model")
        tr.rngs = {name: rng_from_array(arrays[f"rng.{name}"]) for name in STREAMS}
        tr.iteration = int(header["iteration"])
        tr.env_steps = int(header["env_steps"])
        tr.elapsed = float(header["elapsed"])
        tr.model_trained = bool(header["model_trained"])
        tr.metrics = Metrics(header["metrics"])
        return tr


def run_training(cfg: TrainConfig, run_dir: Optional[str] = None) -> Metrics:
    return Trainer(cfg).run(run_dir)
