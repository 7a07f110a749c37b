"""Time the retrieval and entropy kernels on both paths.

    python benchmarks/bench_kernels.py --rules 5000 --dim 256 --queries 2000

The numba path is skipped when numba is missing or GUIDELEARN_DISABLE_NUMBA is set.
"""

import argparse
import time

import numpy as np

from guidelearn import _kernels as K


def bench(fn, reps):
    fn()  # warm-up, includes jit compilation
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0], allow_abbrev=False)
    ap.add_argument("--rules", type=int, default=5000)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    m = rng.normal(size=(args.rules, args.dim))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    q = rng.normal(size=(args.queries, args.dim))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ids = np.arange(1, args.rules + 1, dtype=np.int64)
    probs = rng.dirichlet(np.ones(args.classes), size=args.queries * 10)

    paths = {"numpy": (K.similarities_numpy, K.top_k_numpy, K.neg_entropy_numpy)}
    if K.HAVE_NUMBA:
        paths["numba"] = (K.similarities_numba, K.top_k_numba, K.neg_entropy_numba)
    else:
        print("numba path unavailable; timing numpy only")

    print(f"{'path':6} {'retrieve/query':>16} {'entropy/row':>14}")
    for name, (sim, topk, ent) in paths.items():
        def retrieve():
            for row in q:
                topk(sim(m, row), ids, args.k, 0.0)

        r = bench(retrieve, 3) / args.queries
        e = bench(lambda: ent(probs), 10) / len(probs)
        print(f"{name:6} {r * 1e6:13.1f} us {e * 1e9:11.1f} ns")


if __name__ == "__main__":
    main()
