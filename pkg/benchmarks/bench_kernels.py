"""Time the compiled row kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow a desk-scale forward pass: 1024 rows of 9 tokens at width 64,
and attention maps of 3 branches x 4 heads over those rows.
"""

import argparse
import timeit

import numpy as np

from maya import _kernels_py

try:
    from maya import _ckernels
except ImportError:  # compiled extension not built
    _ckernels = None


def cases(rng):
    x = rng.normal(size=(1024 * 9, 64))
    g, b = rng.normal(size=64), rng.normal(size=64)
    _, xhat, rstd = _kernels_py.layer_norm_fwd(x, g, b, 1e-5)
    logits = rng.normal(size=(3 * 1024 * 4 * 9, 9))
    probs = _kernels_py.softmax_fwd(logits, None)
    idx = rng.integers(0, 50, size=4096)
    rows = rng.normal(size=(4096, 64))
    return {
        "layer_norm_fwd": lambda m: m.layer_norm_fwd(x, g, b, 1e-5),
        "layer_norm_bwd": lambda m: m.layer_norm_bwd(x, xhat, rstd, g),
        "softmax_fwd": lambda m: m.softmax_fwd(logits, None),
        "softmax_bwd": lambda m: m.softmax_bwd(logits, probs),
        "scatter_add_rows": lambda m: m.scatter_add_rows(np.zeros((50, 64)), idx, rows),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [("python", _kernels_py)] + ([("cython", _ckernels)] if _ckernels is not None else [])
    if _ckernels is None:
        print("compiled extension not available; timing the fallback only")
    print(f"{'kernel':18s}" + "".join(f"{name:>12s}" for name, _ in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = [min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3 for _, mod in backends]
        line = f"{name:18s}" + "".join(f"{t:10.2f}ms" for t in times)
        if len(times) > 1:
            line += f"{times[0] / times[1]:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
