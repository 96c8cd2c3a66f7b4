"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import timeit

import numpy as np

from deepnrsfm import kernels


def cases(rng):
    N, K, P = 128, 16, 20
    x3 = rng.standard_normal((N, K, 3))
    lam = np.abs(rng.standard_normal(K))
    g3 = rng.standard_normal((N, K, 3))
    dsharp = rng.standard_normal((P, 3 * K))
    u, v = rng.standard_normal((2, N, P)) * 0.3
    m = (rng.random((N, P)) > 0.3).astype(float)
    m[:, :3] = 1.0
    gD = rng.standard_normal((N, 2 * P, 9 * K))

    def bst_fwd(b):
        return lambda: kernels.bst_forward(x3, lam, backend=b)

    def bst_bwd(b):
        _, norms, _ = kernels.bst_forward(x3, lam, backend=b)
        return lambda: kernels.bst_backward(x3, lam, norms, g3, backend=b)

    def dt_fwd(b):
        return lambda: kernels.persp_dtilde_forward(dsharp, u, v, m, backend=b)

    def dt_bwd(b):
        return lambda: kernels.persp_dtilde_backward(gD, u, v, m, backend=b)

    return {"bst_forward": bst_fwd, "bst_backward": bst_bwd,
            "persp_dtilde_forward": dt_fwd, "persp_dtilde_backward": dt_bwd}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(backends)}")
    print(f"{'kernel':<24}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + f"{'speedup':>10}")
    for name, make in cases(rng).items():
        times = {}
        for b in backends:
            fn = make(b)
            fn()
            times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        ratio = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{name:<24}" + "".join(f"{times[b]:>16.3f}" for b in backends) + f"{ratio:>10.2f}")


if __name__ == "__main__":
    main()
