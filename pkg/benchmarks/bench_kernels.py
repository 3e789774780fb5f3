"""Compare the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Each kernel is run once to trigger compilation, then timed; outputs of the
two paths are checked for agreement before timing.
"""

import argparse
import time

import numpy as np

from czsl import _kernels


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def cases(scale, rng):
    n, m, h = int(2000 * scale), int(500 * scale), 64
    yield "context_scores", (rng.normal(size=(n, h)), rng.normal(size=(m, h)), rng.normal(size=h), 0.3)

    scores = rng.normal(size=(n, m))
    scores[:, ::7] = np.round(scores[:, ::7], 1)  # plenty of ties
    yield "true_ranks", (scores, rng.integers(0, m, size=n))

    groups, vocab = int(20000 * scale), 800
    sizes = rng.integers(1, 12, size=groups)
    ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    ids = rng.integers(-1, vocab, size=int(ptr[-1])).astype(np.int64)
    yield "group_cooc", (ptr, ids, vocab)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, inputs in cases(args.scale, rng):
        f_np = getattr(_kernels.numpy_impl, name)
        f_nb = getattr(_kernels.numba_impl, name)
        if not _same(f_np(*inputs), f_nb(*inputs)):
            raise SystemExit(f"{name}: numpy and numba outputs disagree")
        t_np = _best(f_np, inputs, args.repeat)
        t_nb = _best(f_nb, inputs, args.repeat)
        print(f"{name:<16}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
