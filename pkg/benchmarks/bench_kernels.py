"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends must produce identical results; the script checks that before
reporting timings.
"""
import argparse
import time

import numpy as np

from mmae import kernels
from mmae.data import SynthSpec, synth_generate
from mmae.stain import to_optical_density


def _time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def lasso_case(size=128):
    ds = synth_generate(SynthSpec(count=4, image_size=size, seed=3))
    V = np.concatenate([to_optical_density(t.rgb).V for t, _ in ds.items], axis=1)
    W = SynthSpec().W
    return W.T @ W, W.T @ V, np.zeros((2, V.shape[1]))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled extension not built; only the fallback is available")
        return

    gram, wtv, h0 = lasso_case()
    cases = {
        f"nn_lasso_cd ({wtv.shape[1]} px)": lambda b: kernels.nn_lasso_cd(gram, wtv, h0, 0.1, 1000, 1e-12, backend=b),
    }
    rng = np.random.default_rng(0)
    g = rng.standard_normal((64 * 50, 64))
    idx = rng.integers(0, 65, size=len(g))
    cases[f"scatter_add_rows ({len(g)}x{g.shape[1]})"] = lambda b: kernels.scatter_add_rows(g, idx, 65, backend=b)

    print(f"{'kernel':<34}{'python ms':>11}{'cython ms':>11}{'speedup':>9}  identical")
    for name, fn in cases.items():
        tp, op = _time(lambda: fn("python"), args.repeat)
        tc, oc = _time(lambda: fn("cython"), args.repeat)
        same = np.array_equal(op, oc)
        print(f"{name:<34}{tp * 1e3:>11.2f}{tc * 1e3:>11.2f}{tp / tc:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
