"""Compare the compiled and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--reps N]

Prints one row per (kernel, backend) with the median wall time of N runs,
plus the batched matrix scorer used for training-time ranking.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from liri import kernels
from liri.base import Passage
from liri.dense import build_token_index, score_matrix
from liri.encoder import EncoderConfig, encode, init_params


def _median_ms(fn, reps: int) -> float:
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000 * statistics.median(times)


def _sequences(rng, n, buckets, lo, hi):
    lens = rng.integers(lo, hi, size=n)
    ids = rng.integers(0, buckets, size=int(lens.sum())).astype(np.int64)
    return ids, np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--passages", type=int, default=500)
    parser.add_argument("--triples", type=int, default=500)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    lens = rng.integers(20, 60, size=args.passages)
    offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    packed = rng.normal(size=(int(offsets[-1]), args.dim)).astype(np.float32)
    queries = [rng.normal(size=(12, args.dim)).astype(np.float32) for _ in range(20)]
    cand = np.arange(args.passages, dtype=np.int64)

    buckets = 4096
    table = rng.normal(size=(buckets, args.dim)).astype(np.float32)
    triple_args = (
        *_sequences(rng, args.triples, buckets, 4, 16),
        *_sequences(rng, args.triples, buckets, 20, 60),
        *_sequences(rng, args.triples, buckets, 20, 60),
    )

    print(f"default backend: {kernels.BACKEND}")
    print("kernel\tbackend\tmode\tmedian_ms")
    timings: dict[tuple[str, str, str], float] = {}
    for name, impl in sorted(kernels.backends().items()):
        for mode_name, mode in kernels.SIM_MODES.items():
            t = _median_ms(lambda: [impl.maxsim_scores(q, packed, offsets, cand, mode) for q in queries], args.reps)
            timings["maxsim_scores", name, mode_name] = t

            def grad():
                impl.triple_grad(table, *triple_args, mode, 1.0 / args.triples, np.zeros((buckets, args.dim)))

            timings["triple_grad", name, mode_name] = _median_ms(grad, args.reps)
    for (kernel, name, mode_name), t in sorted(timings.items()):
        print(f"{kernel}\t{name}\t{mode_name}\t{t:.2f}")

    params = init_params(EncoderConfig(dim=args.dim), 0)
    words = [f"w{i}" for i in range(2000)]
    passages = [Passage(f"p{i}", " ".join(rng.choice(words, size=int(n)))) for i, n in enumerate(lens)]
    index = build_token_index(params, passages)
    encoded = [encode(params, list(rng.choice(words, size=12)), "query").rows for _ in range(20)]
    t = _median_ms(lambda: score_matrix(index, encoded), args.reps)
    print(f"score_matrix\tnumpy\t{params.config.similarity}\t{t:.2f}")

    if "cython" in kernels.backends():
        for kernel in ("maxsim_scores", "triple_grad"):
            for mode_name in kernels.SIM_MODES:
                speedup = timings[kernel, "python", mode_name] / timings[kernel, "cython", mode_name]
                print(f"speedup {kernel} {mode_name}: {speedup:.1f}x")


if __name__ == "__main__":
    main()
