"""Time each hot kernel with numba against its numpy twin.

    python benchmarks/bench_kernels.py [--repeat 20]

The jit versions are warmed up once before timing, so compile time is excluded.
"""

import argparse
import timeit

import numpy as np

from maac import kernels


def cases(rng):
    s2 = rng.normal(size=(4096, 2))
    s4 = rng.normal(size=(4096, 4))
    a = rng.normal(size=(4096, 1))
    starts = rng.normal(size=(20000, 2))
    theta = np.array([-1.0, -2.0])
    means, var = rng.normal(size=(4096, 4)), rng.random((4096, 4))
    samples, scores = rng.normal(size=(500, 30)), rng.normal(size=500)
    return {
        "pendulum_step": ((s2, a, 0.05, 10.0, 1.0, 1.0),),
        "cartpole_step": ((s4, a, 0.02, 9.8, 1.0, 0.1, 0.5),),
        "linear_policy_mc": ((starts, theta, 0.1, 0.99, 50, 1.0, 1.0, 0.1),),
        "inverse_variance_combine": ((means, var, 1e-6),),
        "elite_refit": ((samples, scores, 50, 0.05),),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (call_args,) in cases(rng).items():
        jit = getattr(kernels, name + "_jit")
        ref = getattr(kernels, name + "_np")
        jit(*call_args)
        t_jit = min(timeit.repeat(lambda: jit(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: ref(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26}{t_jit:>10.3f}{t_np:>10.3f}{t_np / t_jit:>8.1f}x")


if __name__ == "__main__":
    main()
