"""Compare the compiled kernels with their pure-Python fallbacks.

Run from the repository root after building the extension::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is timed on fixed random inputs with both backends; the table
shows the best wall time per call and the speed-up, and asserts the two
backends agree on every input.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mitilab.kernels import _fallback

try:
    from mitilab.kernels import _core
except ImportError:  # pragma: no cover - depends on the build
    _core = None


def _cases(rng):
    yield "linear_assignment 16x16", "linear_assignment", (rng.uniform(size=(16, 16)),)
    yield "linear_assignment 4x16", "linear_assignment", (rng.uniform(size=(4, 16)),)
    yield "linear_assignment 64x64", "linear_assignment", (rng.uniform(size=(64, 64)),)
    for n, d in ((8, 32), (16, 64)):
        X = rng.normal(size=(n, d))
        yield f"min_composite_residual {n}x{d}", "min_composite_residual", (X, np.median(X, axis=0))


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-9, atol=1e-12)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _core is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<32}{'python ms':>12}{'compiled ms':>14}{'speed-up':>10}")
    for label, name, inputs in _cases(rng):
        slow = getattr(_fallback, name)
        t_py = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat))
        if _core is None:
            print(f"{label:<32}{t_py * 1e3:12.3f}{'-':>14}{'-':>10}")
            continue
        fast = getattr(_core, name)
        if not _same(slow(*inputs), fast(*inputs)):
            raise SystemExit(f"{label}: backends disagree")
        t_c = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat))
        print(f"{label:<32}{t_py * 1e3:12.3f}{t_c * 1e3:14.3f}{t_py / t_c:10.1f}x")


if __name__ == "__main__":
    main()
