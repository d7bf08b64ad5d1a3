"""Compare the compiled and numpy embedding-bag kernels.

    python3 benchmarks/bench_kernels.py [--docs 4000] [--repeat 20]

Prints one tab-separated row per (backend, pass) with the median time
and the speedup of the compiled kernel over the fallback.
"""

import argparse
import statistics
import time

import numpy as np

from privrep import kernels


def make_batch(n_docs, doc_len, vocab, dim, seed=0):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(doc_len // 2, doc_len * 3 // 2 + 1, n_docs)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    tokens = rng.integers(0, vocab, offsets[-1]).astype(np.int64)
    emb = rng.normal(size=(vocab, dim))
    emb[0] = 0.0
    return emb, tokens, offsets


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--docs", type=int, default=4000)
    parser.add_argument("--doc-len", type=int, default=12)
    parser.add_argument("--vocab", type=int, default=10_000)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    emb, tokens, offsets = make_batch(args.docs, args.doc_len, args.vocab, args.dim)
    grad = np.random.default_rng(1).normal(size=(args.docs, args.dim))
    results = {}
    for backend in kernels.available_backends():
        _, counts = kernels.embedding_bag_forward(emb, tokens, offsets, 0, backend=backend)
        sink = np.zeros_like(emb)
        results[backend] = {
            "forward": median_time(
                lambda: kernels.embedding_bag_forward(emb, tokens, offsets, 0, backend=backend),
                args.repeat),
            "backward": median_time(
                lambda: kernels.embedding_bag_backward(grad, tokens, offsets, counts, 0, sink,
                                                       backend=backend),
                args.repeat),
        }
    print(f"# {args.docs} docs, ~{args.doc_len} tokens each, vocab {args.vocab}, dim {args.dim}")
    print("backend\tpass\tmedian_ms\tspeedup")
    for backend, passes in results.items():
        for name, t in passes.items():
            speedup = results["python"][name] / t
            print(f"{backend}\t{name}\t{t * 1e3:.3f}\t{speedup:.2f}x")


if __name__ == "__main__":
    main()
