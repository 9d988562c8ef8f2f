"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--n 2000] [--sweeps 300]

Each kernel is checked for agreement before timing. The last block times a
short Plackett-Luce Gibbs run end to end in two subprocesses, one with
MOE_DISABLE_NUMBA=1.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mixexperts import kernels

END_TO_END = """
import time, numpy as np
from mixexperts import MCMCConfig, PlackettLuceExpert, PriorSpec, MEModelSpec, make_family, run_chain, simulate
fam = make_family("plackett-luce", n_candidates=6)
truth = MEModelSpec("a", fam, (PlackettLuceExpert(np.arange(1, 7) / 21.0), PlackettLuceExpert(np.arange(6, 0, -1) / 21.0)),
                    weights=[0.5, 0.5])
data, _ = simulate(truth, {n}, np.random.default_rng(0))
cfg = MCMCConfig("a", fam, 2, iters={sweeps}, burnin=0)
run_chain(data, PriorSpec.default(fam, data), MCMCConfig("a", fam, 2, iters=5, burnin=0), seed=0)
t = time.perf_counter()
run_chain(data, PriorSpec.default(fam, data), cfg, seed=0)
print(time.perf_counter() - t)
"""


def ballots(rng, n, M):
    out = np.full((n, M), -1, dtype=np.int64)
    for i in range(n):
        m = rng.integers(1, M + 1)
        out[i, :m] = rng.permutation(M)[:m]
    return out


def cases(n, rng):
    M, G, J, K, T = 8, 3, 16, 4, 50
    b = ballots(rng, n, M)
    p = rng.dirichlet(np.ones(M), size=G)
    series = rng.integers(K, size=(n // 10, T + 1))
    hist = series[:, :-1]
    logp = np.log(rng.dirichlet(np.ones(G), size=n))
    return {
        "sample_categorical": (logp, rng.random(n)),
        "pl_loglik": (b, p),
        "pl_stage_tails": (b, p[0]),
        "pl_avail_weighted_sum": (b, rng.random(b.shape)),
        "pl_win_counts": (b, rng.random(n)),
        "transition_counts": (series, hist, J, K),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--sweeps", type=int, default=300)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call_args in cases(args.n, rng).items():
        fast = getattr(kernels.numba_impl, name)
        slow = getattr(kernels.numpy_impl, name)
        a, b = fast(*call_args), slow(*call_args)  # also compiles
        if not np.allclose(a, b, rtol=1e-10, atol=1e-12):
            sys.exit(f"{name}: numba and numpy disagree")
        t_np = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")
    if args.skip_end_to_end:
        return
    code = END_TO_END.format(n=args.n // 4, sweeps=args.sweeps)
    times = {}
    for label, flag in (("numpy", "1"), ("numba", "0")):
        env = {**os.environ, "MOE_DISABLE_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        times[label] = float(res.stdout.strip().splitlines()[-1])
    print(f"{'gibbs run (PL, G=2)':<24}{times['numpy'] * 1e3:>10.0f}{times['numba'] * 1e3:>10.0f}"
          f"{times['numpy'] / times['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
