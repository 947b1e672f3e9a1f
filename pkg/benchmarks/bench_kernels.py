"""Compare the compiled and numpy skip-gram kernels on one synthetic workload.

Usage: python3 benchmarks/bench_kernels.py [--pairs N] [--vocab V] [--dim D] [--repeats R]
"""

import argparse
import time

import numpy as np

from tracenet import _kernels
from tracenet.embed import build_huffman


def workload(pairs: int, vocab: int, dim: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    # Zipf-like counts give a realistic Huffman depth profile
    counts = sorted((1_000_000 // np.arange(1, vocab + 1)).tolist(), reverse=True)
    pts, sgn, lens = build_huffman(counts).arrays()
    probs = np.asarray(counts, dtype=float) / sum(counts)
    centers = rng.choice(vocab, size=pairs, p=probs).astype(np.int32)
    targets = rng.choice(vocab, size=pairs, p=probs).astype(np.int32)
    syn0 = (rng.random((vocab, dim)) - 0.5) / dim
    syn1 = np.zeros((vocab - 1, dim))
    return syn0, syn1, centers, targets, pts, sgn, lens


def bench(name: str, args) -> float:
    mod = _kernels.load_backend(name)
    best = float("inf")
    for r in range(args.repeats):
        syn0, syn1, centers, targets, pts, sgn, lens = workload(args.pairs, args.vocab, args.dim, r)
        t0 = time.perf_counter()
        mod.train_pairs(syn0, syn1, centers, targets, pts, sgn, lens, 0.025, 0.0025, 0, len(centers), np.zeros(args.dim))
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=200_000)
    ap.add_argument("--vocab", type=int, default=5_000)
    ap.add_argument("--dim", type=int, default=100)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    backends = _kernels.available_backends()
    print(f"pairs={args.pairs} vocab={args.vocab} dim={args.dim} default backend={_kernels.BACKEND}")
    times = {}
    for name in backends:
        times[name] = bench(name, args)
        print(f"{name:<8}{times[name]:>9.3f} s{args.pairs / times[name]:>14,.0f} pairs/s")
    if len(times) == 2:
        print(f"speedup  {times['python'] / times['cython']:.1f}x")


if __name__ == "__main__":
    main()
