"""Compare the numba and numpy kernel paths.

    python benchmarks/bench_kernels.py [--entries 100000] [--rank 20] [--repeat 7]

Reports the median wall time of each kernel on a random problem shaped like
MovieLens-small (610 x 9724, ~1e5 observed entries), then one full Gibbs sweep
of the SVD and two-factor samplers with each path swapped in.
"""

import argparse
import time
import timeit

import numpy as np

from stiefel_mc import kernels
from stiefel_mc.manifold import uniform_stiefel_sample
from stiefel_mc.models import SVD, ABState, Hyperparams, ObservationSet, SvdState
from stiefel_mc.samplers import HmcConfig, gibbs_sweep_ab, gibbs_sweep_svd


def problem(m, n, n_obs, r, seed=0):
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(m * n, n_obs, replace=False))
    rows, cols = np.divmod(flat, n)
    obs = ObservationSet(m, n, rows, cols, rng.standard_normal(n_obs))
    return rng, obs


def median_time(fn, repeat):
    fn()  # warm-up (and JIT compilation)
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def kernel_cases(rng, obs, r):
    tr = obs.training
    X = rng.standard_normal((obs.m, r))
    B = rng.standard_normal((len(tr), r))
    w = rng.standard_normal(len(tr))
    Other = rng.standard_normal((obs.n, r))
    z = rng.standard_normal((obs.m, r))
    payload = rng.integers(0, 256, 8 * len(tr) * r, dtype=np.uint8)
    return {
        "gather_dot": lambda impl: impl.gather_dot(X, tr.rows, B),
        "scatter_rows": lambda impl: impl.scatter_rows(w, tr.rows, B, obs.m),
        "row_gaussian_sweep": lambda impl: impl.row_gaussian_sweep(tr.row_ptr, tr.cols, tr.y, Other, 1.0, 1.0, z),
        "fnv1a64 (%d kB)" % (payload.nbytes // 1024): lambda impl: impl.fnv1a64(payload, kernels.FNV_OFFSET),
    }


def sweep_cases(rng, obs, r):
    hp = Hyperparams()
    cfg = HmcConfig(epsilon=1e-3, steps=10, jitter=0)
    svd = SvdState(uniform_stiefel_sample(obs.m, r, rng), np.ones(r), uniform_stiefel_sample(obs.n, r, rng), 1.0)
    ab = ABState(rng.standard_normal((obs.m, r)), rng.standard_normal((obs.n, r)), 1.0, 1.0)
    return {
        "svd sweep (T=10)": lambda: gibbs_sweep_svd(svd, SVD, obs, hp, cfg, cfg, cfg, np.random.default_rng(1)),
        "ab-gibbs sweep": lambda: gibbs_sweep_ab(ab, obs, hp, np.random.default_rng(1)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=610)
    ap.add_argument("--n", type=int, default=9724)
    ap.add_argument("--entries", type=int, default=100_000)
    ap.add_argument("--rank", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if kernels.numba_impl is None:
        raise SystemExit("numba is not installed; nothing to compare")

    rng, obs = problem(args.m, args.n, args.entries, args.rank)
    print(f"{args.m} x {args.n}, {args.entries} entries, rank {args.rank}, median of {args.repeat}")
    print(f"{'case':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in kernel_cases(rng, obs, args.rank).items():
        t_np = median_time(lambda: fn(kernels.numpy_impl), args.repeat)
        t_nb = median_time(lambda: fn(kernels.numba_impl), args.repeat)
        print(f"{name:<28}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.1f}")

    saved = kernels._impl
    try:
        for name, fn in sweep_cases(rng, obs, args.rank).items():
            times = {}
            for label, impl in (("numpy", kernels.numpy_impl), ("numba", kernels.numba_impl)):
                kernels._impl = impl
                times[label] = median_time(fn, max(3, args.repeat // 2))
            print(f"{name:<28}{1e3 * times['numpy']:>12.1f}{1e3 * times['numba']:>12.1f}"
                  f"{times['numpy'] / times['numba']:>10.1f}")
    finally:
        kernels._impl = saved


if __name__ == "__main__":
    t0 = time.perf_counter()
    main()
    print(f"total {time.perf_counter() - t0:.1f}s")
