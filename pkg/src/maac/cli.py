"""``maac`` command line: train, eval, grad-error, bounds, ablate."""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .analysis import BoundInputs, GradErrorConfig, bound_constants, gradient_error_experiment, summarize, \
    tv_and_improvement_bounds
from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig, parse_config
from .mpc import cem_plan
from .trainer import STREAMS, Trainer, evaluate_policy

log = logging.getLogger("maac")

ABLATION_CELLS = ("full", "h_zero", "no_steve", "single_sample", "real_data_only", "no_entropy")


def _run_dir(arg: Optional[str], default: str) -> str:
    path = arg or os.environ.get("MAAC_RUN_DIR") or default
    os.makedirs(path, exist_ok=True)
    return path


def _load_cfg(path: Optional[str]) -> TrainConfig:
    return parse_config(path) if path else TrainConfig()


def _echo_config(cfg: TrainConfig, run_dir: str):
    with open(os.path.join(run_dir, "config.effective.cfg"), "w") as fh:
        fh.write(cfg.dump())


def cmd_train(args) -> int:
    if args.resume:
        trainer = Trainer.load(args.resume)
        cfg = trainer.cfg
        if args.iterations is not None:
            cfg.train.iterations = args.iterations
    else:
        cfg = _load_cfg(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.iterations is not None:
            cfg.train.iterations = args.iterations
        trainer = Trainer(cfg)
    run_dir = _run_dir(args.run_dir, "run")
    _echo_config(cfg, run_dir)
    metrics = trainer.run(run_dir)
    last = metrics.rows[-1]
    print(f"iterations={last['iteration']} env_steps={last['env_steps']} "
          f"eval_return={last['eval_return_mean']:.6g} +- {last['eval_return_std']:.6g}")
    print(f"metrics: {os.path.join(run_dir, 'metrics.csv')}")
    return 0


def cmd_eval(args) -> int:
    trainer = Trainer.load(args.checkpoint)
    cfg = trainer.cfg
    seed = cfg.run.seed if args.seed is None else args.seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(len(STREAMS),)))
    planner = None
    if args.mpc:
        cem = cfg.cem_config()
        cem_rng = trainer.rngs["cem"]

        def planner(state):
            return cem_plan(state, trainer.policy, trainer.ensemble, trainer.qpair, cem, cem_rng, trainer.env)

    returns = evaluate_policy(trainer.policy, trainer.env, args.episodes, rng, cfg.maac.gamma, planner)
    tag = "mpc" if args.mpc else "policy"
    print(f"{tag} return over {args.episodes} episodes: {returns.mean():.6g} +- {returns.std():.6g}")
    return 0


def cmd_grad_error(args) -> int:
    cfg = GradErrorConfig()
    if args.seeds is not None:
        cfg.seeds = tuple(range(args.seeds))
    if args.h_list:
        cfg.h_list = tuple(int(h) for h in args.h_list.split(","))
    if args.theta:
        cfg.theta = tuple(float(x) for x in args.theta.split(","))
    run_dir = _run_dir(args.run_dir, "grad_error")
    path = os.path.join(run_dir, "grad_error.csv")
    rows = gradient_error_experiment(cfg, csv_path=path)
    print(f"{'estimator':<15}{'H':>4}  {'l1 mean':>12}  {'l1 std':>12}")
    for (est, H), (m, s) in summarize(rows).items():
        print(f"{est:<15}{H:>4}  {m:>12.6g}  {s:>12.6g}")
    print(f"rows: {path}")
    return 0


def cmd_bounds(args) -> int:
    inp = BoundInputs(eps_f=args.eps_f, eps_Q=args.eps_q, H=args.h, gamma=args.gamma, L_f=args.l_f,
                      L_pi=args.l_pi, L_Q=args.l_q, L_r=args.l_r, K=args.k, alpha=args.alpha,
                      c_tilde=args.c_tilde, r_max=args.r_max)
    c1, c2, bound = bound_constants(inp)
    tv, gap = tv_and_improvement_bounds(inp)
    print(f"c1={c1:.10g} c2={c2:.10g} bound={bound:.10g}")
    print(f"tv_bound={tv:.10g} return_gap_bound={gap:.10g}")
    return 0


def cmd_ablate(args) -> int:
    base = _load_cfg(args.config)
    if args.seed is not None:
        base.run.seed = args.seed
    if args.iterations is not None:
        base.train.iterations = args.iterations
    cells = args.cells.split(",") if args.cells else list(ABLATION_CELLS)
    unknown = [c for c in cells if c not in ABLATION_CELLS]
    if unknown:
        raise ConfigError("--cells", f"unknown ablation cell(s) {unknown}; choose from {list(ABLATION_CELLS)}")
    root = _run_dir(args.run_dir, "ablate")
    print(f"{'cell':<16}{'final return':>14}  {'std':>10}")
    for cell in cells:
        cfg = copy.deepcopy(base)
        if cell != "full":
            setattr(cfg.ablation, cell, True)
        cell_dir = os.path.join(root, cell)
        os.makedirs(cell_dir, exist_ok=True)
        _echo_config(cfg, cell_dir)
        last = Trainer(cfg).run(cell_dir).rows[-1]
        print(f"{cell:<16}{last['eval_return_mean']:>14.6g}  {last['eval_return_std']:>10.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maac", description="Model-augmented actor-critic experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="config file (defaults apply when omitted)")
    t.add_argument("--run-dir", help="output directory (env MAAC_RUN_DIR, else ./run)")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="continue from a checkpoint file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--mpc", action="store_true", help="plan every action with CEM")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-error", help="gradient-error experiment on the double integrator")
    g.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")
    g.add_argument("--h-list", help="comma-separated horizons")
    g.add_argument("--theta", help="comma-separated linear gain")
    g.add_argument("--run-dir")
    g.set_defaults(func=cmd_grad_error)

    b = sub.add_parser("bounds", help="evaluate the gradient-error and improvement bounds")
    b.add_argument("--h", type=int, required=True)
    b.add_argument("--eps-f", type=float, required=True)
    b.add_argument("--eps-q", type=float, required=True)
    b.add_argument("--gamma", type=float, default=0.99)
    b.add_argument("--l-f", type=float, default=1.0)
    b.add_argument("--l-pi", type=float, default=1.0)
    b.add_argument("--l-q", type=float, default=1.0)
    b.add_argument("--l-r", type=float, default=1.0)
    b.add_argument("--k", type=float, default=1.0)
    b.add_argument("--alpha", type=float, default=1.0)
    b.add_argument("--c-tilde", type=float, default=1.0)
    b.add_argument("--r-max", type=float, default=1.0)
    b.set_defaults(func=cmd_bounds)

    a = sub.add_parser("ablate", help="run the ablation matrix, one metrics file per cell")
    a.add_argument("--config")
    a.add_argument("--run-dir")
    a.add_argument("--seed", type=int)
    a.add_argument("--iterations", type=int)
    a.add_argument("--cells", help=f"comma-separated subset of {','.join(ABLATION_CELLS)}")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
