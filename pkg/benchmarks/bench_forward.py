#!/usr/bin/env python3
"""Timing comparison of the forward-pass lanes (numpy vs compiled).

Runs the same batched forward through every available execution lane,
reports best-of-N wall time and throughput, and cross-checks that the
lanes agree numerically before trusting the numbers.

    python3 benchmarks/bench_forward.py
    python3 benchmarks/bench_forward.py --batch 64 --seq-len 64 --repeats 9
"""

import argparse
import time

import numpy as np

from evomoe import backend
from evomoe.model import ModelConfig, gen_random_model


def time_lane(model, tokens, lane, repeats):
    backend.set_backend(lane)
    logits = backend.forward_final_logits(model, tokens)  # warm-up + result
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        backend.forward_final_logits(model, tokens)
        best = min(best, time.perf_counter() - start)
    return best, logits


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--d-model", type=int, default=32)
    parser.add_argument("--d-ffn", type=int, default=64)
    parser.add_argument("--layers", type=int, default=4)
    parser.add_argument("--experts", type=int, default=8)
    parser.add_argument("--top-k", type=int, default=2)
    parser.add_argument("--vocab", type=int, default=256)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--seq-len", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=7, help="best-of-N timing")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    config = ModelConfig(d_model=args.d_model, d_ffn=args.d_ffn,
                         n_layers=args.layers, n_experts=args.experts,
                         top_k=args.top_k, vocab_size=args.vocab,
                         max_seq_len=args.seq_len)
    model = gen_random_model(config, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    tokens = rng.integers(0, args.vocab, size=(args.batch, args.seq_len))
    n_tokens = args.batch * args.seq_len

    lanes = backend.available_backends()
    print(f"model: d={args.d_model} f={args.d_ffn} L={args.layers} "
          f"E={args.experts} k={args.top_k}; input {args.batch}x{args.seq_len} "
          f"({n_tokens} tokens), best of {args.repeats}")
    if "compiled" not in lanes:
        print("note: compiled lane unavailable, timing numpy only")

    results = {}
    reference = None
    print(f"{'lane':<10} {'ms/forward':>12} {'tokens/s':>12}")
    for lane in lanes:
        best, logits = time_lane(model, tokens, lane, args.repeats)
        results[lane] = best
        if reference is None:
            reference = logits
        else:
            drift = float(np.max(np.abs(logits - reference)))
            if drift > 1e-9:
                raise SystemExit(f"lane {lane} disagrees with {lanes[0]}: {drift:.3e}")
        print(f"{lane:<10} {best * 1e3:>12.3f} {n_tokens / best:>12,.0f}")

    if "compiled" in results and "numpy" in results:
        print(f"speedup: compiled is {results['numpy'] / results['compiled']:.2f}x "
              "vs numpy on this shape")
    backend.set_backend("auto")


if __name__ == "__main__":
    main()
