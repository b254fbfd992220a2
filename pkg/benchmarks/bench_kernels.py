"""Time learn_biases with the compiled and the pure-Python kernels.

    python3 benchmarks/bench_kernels.py --users 3000 --items 200
"""

import argparse
import time

import numpy as np

from trendbias import _pykernels, core
from trendbias.metrics import MetricSpec
from trendbias.optimizer import OptimizerConfig, learn_biases

try:
    from trendbias import _ckernels
except ImportError:
    _ckernels = None


def instance(n, m, per_user, rel_per, seed):
    rng = np.random.default_rng(seed)
    pop = rng.lognormal(0.0, 1.0, size=m)
    pop /= pop.sum()
    users = np.repeat(np.arange(n), per_user)
    store = core.ScoreStore.from_triples(users, rng.choice(m, size=n * per_user, p=pop),
                                         rng.random(n * per_user), n, m, capacity=per_user)
    rel = core.RelevanceSet.from_pairs(np.repeat(np.arange(n), rel_per),
                                       rng.choice(m, size=n * rel_per, p=rng.permutation(pop)),
                                       n, m)
    return store, rel


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--users", type=int, default=3000)
    ap.add_argument("--items", type=int, default=200)
    ap.add_argument("--per-user", type=int, default=50)
    ap.add_argument("--relevant", type=int, default=2)
    ap.add_argument("-k", type=int, default=10)
    ap.add_argument("--cycles", type=int, default=2)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    store, rel = instance(args.users, args.items, args.per_user, args.relevant, args.seed)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"n={args.users} m={args.items} N={args.per_user} k={args.k} "
          f"cycles={args.cycles} (best of {args.repeats})")
    base = None
    results = {}
    for kind in ("ACC", "NDCG"):
        cfg = OptimizerConfig(MetricSpec(kind, args.k), max_cycles=args.cycles)
        for name, kern in backends:
            t, res = best_of(lambda: learn_biases(store, rel, cfg, backend=kern), args.repeats)
            results[(kind, name)] = res
            if name == "python":
                base = t
            print(f"{kind:<5} {name:<7} {t:8.3f}s  x{base / t:5.1f}  "
                  f"objective {res.objective:.6f}")
        if _ckernels:
            same = np.array_equal(results[(kind, "python")].bias, results[(kind, "cython")].bias)
            print(f"{kind:<5} identical biases: {same}")


if __name__ == "__main__":
    main()
