"""Time the compiled kernels against the numpy fallback on a 200-cluster table1a dataset.

    python benchmarks/bench_kernels.py [--clusters 200] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from margex import kernels
from margex.estimation import pair_rho
from margex.frailty import preset_scenario, simulate_dataset
from margex.model import CorrelationKind, CorrelationStructure


def workloads(clusters: int, seed: int):
    data = simulate_dataset(preset_scenario("table1a", 0.5, seed=seed, cluster_count=clusters))
    beta = np.array([1.0, -1.2])
    rho = pair_rho(data, CorrelationStructure(CorrelationKind.EXCHANGEABLE, (0.5,)))
    eta = data.X @ beta
    y = data.y.astype(float)
    rng = np.random.default_rng(seed)
    n = 200_000
    z = [rng.standard_normal(n) for _ in range(4)]
    a1 = 0.5 * (z[0] ** 2 + z[2] ** 2)
    c, u1, u2 = rng.uniform(0, 1, 50), rng.uniform(0.1, 3, 50), rng.uniform(0.1, 3, 50)

    def mc(backend):
        kernels.frailty_pair_mc(a1, *z, c, u1, u2, np.zeros(50), np.zeros(50), backend=backend)

    return {
        "gee_accumulate": lambda b: kernels.gee_accumulate(data.X, y, beta, data.offsets, rho, backend=b),
        "pair_terms": lambda b: kernels.pair_terms(eta, y, data.pairs.i, data.pairs.j, rho, 2, backend=b),
        "pattern_prob": lambda b: kernels.pattern_prob(eta, data.y, data.offsets, rho, backend=b),
        "frailty_pair_mc (1e7 evals)": mc,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--clusters", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    backends = sorted(kernels.BACKENDS)
    print(f"backends available: {', '.join(backends)} (default {kernels.BACKEND})")
    print(f"{'kernel':<30}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speed-up':>12}")
    for name, run in workloads(args.clusters, args.seed).items():
        best = {}
        for b in backends:
            run(b)  # warm-up
            best[b] = min(timeit.repeat(lambda: run(b), number=1, repeat=args.repeat)) * 1e3
        ratio = best["python"] / best["cython"] if "cython" in best else float("nan")
        print(f"{name:<30}" + "".join(f"{best[b]:>14.3f}" for b in backends) + f"{ratio:>11.1f}x")


if __name__ == "__main__":
    main()
