"""Time the numba and pure-numpy DP kernels on the same inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from jcast import _kernels as K


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cases(rng):
    lp = log_softmax(rng.normal(size=(150, 30)))
    target = rng.integers(1, 30, size=25)
    ext, skip = K.extend_with_blanks(target, 0)
    x = log_softmax(rng.normal(size=(150, 30)))
    r_prev = np.full((150, 2), -np.inf)
    r_prev[:, 1] = np.cumsum(x[:, 0])
    cands = np.arange(4, 24)
    a, b = rng.integers(0, 20, size=300), rng.integers(0, 20, size=300)
    return {
        "ctc_alpha_beta T=150 L=25": (K.ctc_alpha_beta_numba, K.ctc_alpha_beta_numpy, (lp, ext, skip)),
        "ctc_prefix_extend T=150 K=20": (K.ctc_prefix_extend_numba, K.ctc_prefix_extend_numpy,
                                         (x, r_prev, -1, cands, 0, True)),
        "edit_distance 300x300": (K.edit_distance_numba, K.edit_distance_numpy, (a, b)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, slow, inputs) in cases(rng).items():
        fast(*inputs)  # compile
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat))
        print(f"{name:32s} {1e3 * t_fast:10.3f} {1e3 * t_slow:10.3f} {t_slow / t_fast:7.1f}x")


if __name__ == "__main__":
    main()
