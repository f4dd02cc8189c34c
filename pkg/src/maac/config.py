"""Experiment configuration and its plain-text file format.

Format::

    # comment
    [train]
    iterations = 30
    maac.h = 3          # dotted keys work anywhere
    [nets]
    policy_hidden = 64, 64

Keys are ``section.field``. Unknown keys, bad values and invariant
violations raise ``ConfigError`` naming the key (and the line when the value
came from a file).
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: Optional[int] = None):
        self.key, self.line = key, line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")


@dataclass
class EnvSection:
    name: str = "double_integrator"


@dataclass
class TrainSection:
    iterations: int = 30
    rollouts_per_iter: int = 1
    g2: int = 40                      # policy/critic updates per iteration
    batch_size: int = 256
    actor_batch_size: int = 64        # start states per actor update
    real_fraction: float = 0.05
    env_capacity: int = 1_000_000
    model_capacity: int = 100_000
    model_rollouts: int = 400         # n start states for D_model rollouts
    model_rollout_length: int = -1    # k; -1 means k = H
    eval_episodes: int = 10
    lr_policy: float = 3e-4
    lr_q: float = 3e-4
    lr_model: float = 1e-3
    tau: float = 0.005
    use_target_networks: bool = True


@dataclass
class MaacSection:
    h: int = 3
    n_samples: int = 4
    beta: float = 0.01
    gamma: float = 0.99
    entropy_states: str = "rollout"


@dataclass
class ModelSection:
    members: int = 5
    max_epochs: int = 50              # G1
    patience: int = 5
    val_fraction: float = 0.1
    batch_size: int = 256
    min_samples: int = 32


@dataclass
class NetsSection:
    policy_hidden: Tuple[int, ...] = (64, 64)
    q_hidden: Tuple[int, ...] = (64, 64)
    model_hidden: Tuple[int, ...] = (128, 128)


@dataclass
class AblationSection:
    h_zero: bool = False
    no_steve: bool = False
    single_sample: bool = False
    real_data_only: bool = False
    no_entropy: bool = False


@dataclass
class MpcSection:
    plan_horizon: int = 5
    population: int = 64
    elite_fraction: float = 0.1
    iterations: int = 5
    particles: int = 4


@dataclass
class RunSection:
    seed: int = 0
    record_wallclock: bool = True
    checkpoint_every: int = 0         # 0: final checkpoint only


SECTIONS = {
    "env": EnvSection, "train": TrainSection, "maac": MaacSection, "model": ModelSection,
    "nets": NetsSection, "ablation": AblationSection, "mpc": MpcSection, "run": RunSection,
}


@dataclass
class TrainConfig:
    env: EnvSection = field(default_factory=EnvSection)
    train: TrainSection = field(default_factory=TrainSection)
    maac: MaacSection = field(default_factory=MaacSection)
    model: ModelSection = field(default_factory=ModelSection)
    nets: NetsSection = field(default_factory=NetsSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    run: RunSection = field(default_factory=RunSection)

    # ---------------------------------------------------------- resolved values

    @property
    def horizon(self) -> int:
        return 0 if self.ablation.h_zero else self.maac.h

    @property
    def n_samples(self) -> int:
        return 1 if self.ablation.single_sample else self.maac.n_samples

    @property
    def beta(self) -> float:
        return 0.0 if self.ablation.no_entropy else self.maac.beta

    @property
    def rollout_length(self) -> int:
        k = self.train.model_rollout_length
        return self.horizon if k < 0 else k

    def maac_config(self):
        from .actor import MaacConfig
        return MaacConfig(H=self.horizon, n_samples=self.n_samples, beta=self.beta,
                          gamma=self.maac.gamma, entropy_states=self.maac.entropy_states)

    def cem_config(self):
        from .mpc import CemConfig
        m = self.mpc
        return CemConfig(plan_horizon=m.plan_horizon, population=m.population, elite_fraction=m.elite_fraction,
                         iterations=m.iterations, particles=m.particles, gamma=self.maac.gamma)

    # ---------------------------------------------------------- (de)serialise

    def to_dict(self) -> Dict[str, Dict[str, object]]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        cfg = cls()
        for sec, values in d.items():
            for k, v in values.items():
                set_value(cfg, f"{sec}.{k}", v)
        validate(cfg)
        return cfg

    def dump(self) -> str:
        """Effective configuration in the file format (round-trips through ``parse_text``)."""
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            for f in dataclasses.fields(getattr(self, sec)):
                v = getattr(getattr(self, sec), f.name)
                lines.append(f"{f.name} = {format_value(v)}")
            lines.append("")
        return "\n".join(lines)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, raw, default, line=None):
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"expected an integer, got {raw!r}")
            if isinstance(raw, str):
                f = float(raw.replace("_", ""))
                if not f.is_integer():
                    raise ValueError(f"expected an integer, got {raw!r}")
                return int(f)
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if isinstance(raw, (list, tuple)):
                return tuple(int(x) for x in raw)
            parts = [p for p in str(raw).replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(int(p) for p in parts)
        if isinstance(default, str):
            s = str(raw).strip()
            if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
                s = s[1:-1]
            return s
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"bad value {raw!r} ({exc})", line) from None
    raise ConfigError(key, "unsupported field type", line)


def set_value(cfg: TrainConfig, key: str, raw, line=None):
    if key.count(".") != 1:
        raise ConfigError(key, "keys must look like section.field", line)
    sec, name = key.split(".")
    if sec not in SECTIONS:
        raise ConfigError(key, f"unknown section {sec!r}", line)
    obj = getattr(cfg, sec)
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names:
        raise ConfigError(key, "unknown key", line)
    setattr(obj, name, _coerce(key, raw, getattr(type(obj)(), name), line))


def validate(cfg: TrainConfig, lines: Optional[Dict[str, int]] = None):
    """Raise ``ConfigError`` on the first violated invariant."""
    lines = lines or {}

    def need(ok, key, msg):
        if not ok:
            raise ConfigError(key, msg, lines.get(key))

    from .envs import ENVS
    need(cfg.env.name in ENVS, "env.name", f"unknown environment, choose from {sorted(ENVS)}")
    t = cfg.train
    for k in ("iterations", "rollouts_per_iter", "g2", "batch_size", "actor_batch_size", "env_capacity",
              "model_capacity", "model_rollouts", "eval_episodes"):
        need(getattr(t, k) >= 1, f"train.{k}", "must be >= 1")
    need(t.model_rollout_length >= -1, "train.model_rollout_length", "must be >= 0 (or -1 for k = H)")
    need(0.0 <= t.real_fraction <= 1.0, "train.real_fraction", "must lie in [0, 1]")
    for k in ("lr_policy", "lr_q", "lr_model"):
        need(getattr(t, k) > 0, f"train.{k}", "learning rates must be > 0")
    need(0.0 < t.tau <= 1.0, "train.tau", "must lie in (0, 1]")
    m = cfg.maac
    need(m.h >= 0, "maac.h", "must be >= 0")
    need(m.n_samples >= 1, "maac.n_samples", "must be >= 1")
    need(m.beta >= 0, "maac.beta", "must be >= 0")
    need(0.0 < m.gamma < 1.0, "maac.gamma", "must lie in (0, 1)")
    need(m.entropy_states in ("start", "rollout"), "maac.entropy_states", "must be 'start' or 'rollout'")
    md = cfg.model
    need(md.members >= 1, "model.members", "must be >= 1")
    need(md.max_epochs >= 1, "model.max_epochs", "must be >= 1")
    need(md.patience >= 0, "model.patience", "must be >= 0")
    need(0.0 < md.val_fraction < 1.0, "model.val_fraction", "must lie in (0, 1)")
    need(md.batch_size >= 1, "model.batch_size", "must be >= 1")
    need(md.min_samples >= 2, "model.min_samples", "must be >= 2")
    for k in ("policy_hidden", "q_hidden", "model_hidden"):
        need(all(h >= 1 for h in getattr(cfg.nets, k)), f"nets.{k}", "layer widths must be >= 1")
    p = cfg.mpc
    need(p.plan_horizon >= 1, "mpc.plan_horizon", "must be >= 1")
    need(p.population >= 2, "mpc.population", "must be >= 2")
    need(0.0 < p.elite_fraction <= 1.0, "mpc.elite_fraction", "must lie in (0, 1]")
    need(p.iterations >= 0, "mpc.iterations", "must be >= 0")
    need(p.particles >= 1, "mpc.particles", "must be >= 1")
    need(cfg.run.seed >= 0, "run.seed", "must be >= 0")
    need(cfg.run.checkpoint_every >= 0, "run.checkpoint_every", "must be >= 0")


def _strip_comment(line: str) -> str:
    out, quote = [], None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def parse_text(text: str, cfg: Optional[TrainConfig] = None) -> TrainConfig:
    cfg = cfg or TrainConfig()
    section = None
    lines: Dict[str, int] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(line, "malformed section header", no)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(section, "unknown section", no)
            continue
        if "=" not in line:
            raise ConfigError(line, "expected key = value", no)
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            if section is None:
                raise ConfigError(key, "key outside any section (use section.key or a [section] header)", no)
            key = f"{section}.{key}"
        if key in lines:
            raise ConfigError(key, f"duplicate key (first set on line {lines[key]})", no)
        set_value(cfg, key, value, no)
        lines[key] = no
    validate(cfg, lines)
    if cfg.ablation.h_zero and cfg.maac.h != 0:
        log.warning("ablation.h_zero = true overrides maac.h = %d with 0", cfg.maac.h)
    return cfg


def parse_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read())
