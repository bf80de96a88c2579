"""Timing comparison of the compiled kernels against the numpy fallback.

Run: python3 benchmarks/bench_kernels.py [--repeats N] [--inner M]

Times each kernel at the matrix sizes this package actually runs (attention
over K<=10 supports, feature grids around 100 cells, d around 8-16), plus one
end-to-end refinement pass through the tensor layer. Reports the best of N
repeats of M calls, per backend, with the speedup of compiled over fallback.
"""

import argparse
import time

import numpy as np

from fewdet import _kernels as kernels
from fewdet.attention import AttentionConfig, init_encoder_stack, isam_refine
from fewdet.tensor import LAYER_NORM_EPS, Tensor


def best_time(fn, repeats, inner):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - start) / inner)
    return best


def cases():
    rng = np.random.default_rng(0)

    def r(*shape):
        return np.ascontiguousarray(rng.normal(size=shape))

    grid, d, k = 100, 12, 5
    gamma, beta = r(d) + 2.0, r(d)
    x_small, x_grid = r(k, d), r(grid, d)
    y_small = kernels.softmax_rows(x_small)
    _, xhat, inv_std = kernels.layer_norm_forward(x_grid, gamma, beta, LAYER_NORM_EPS)

    yield "matmul 5x12 @ 12x12", lambda a=x_small, b=r(d, d): kernels.matmul(a, b)
    yield "matmul 100x12 @ 12x12", lambda a=x_grid, b=r(d, d): kernels.matmul(a, b)
    yield "matmul_nt 100x12 . 5x12", lambda a=x_grid, b=x_small: kernels.matmul_nt(a, b)
    yield "matmul_tn 100x12 . 100x12", lambda a=x_grid, b=r(grid, d): kernels.matmul_tn(a, b)
    yield "softmax_rows 100x5", lambda x=r(grid, k): kernels.softmax_rows(x)
    yield "softmax_backward 5x12", lambda y=y_small, g=r(k, d): kernels.softmax_rows_backward(y, g)
    yield (
        "layer_norm_fwd 100x12",
        lambda x=x_grid, g=gamma, b=beta: kernels.layer_norm_forward(x, g, b, LAYER_NORM_EPS),
    )
    yield (
        "layer_norm_bwd 100x12",
        lambda xh=xhat, s=inv_std, g=gamma, gy=r(grid, d): kernels.layer_norm_backward(xh, s, g, gy),
    )

    cfg = AttentionConfig(model_dim=d, heads=2, layers=1, mlp_hidden=d, dropout_rate=0.0)
    stack = init_encoder_stack(cfg, np.random.default_rng(1))
    supports = Tensor(r(k, d))
    yield "isam_refine 5x12 (1 layer)", lambda: isam_refine(supports, stack, mode="eval")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5, help="timing repeats (best kept)")
    parser.add_argument("--inner", type=int, default=200, help="calls per repeat")
    args = parser.parse_args()

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not available; timing fallback only")

    rows = []
    for name, fn in cases():
        timings = {}
        for backend in backends:
            with kernels.use_backend(backend):
                timings[backend] = best_time(fn, args.repeats, args.inner)
        rows.append((name, timings))

    width = max(len(name) for name, _ in rows)
    header = f"{'kernel':<{width}}  " + "".join(f"{b + ' (us)':>16}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, timings in rows:
        line = f"{name:<{width}}  " + "".join(f"{timings[b] * 1e6:>16.2f}" for b in backends)
        if len(backends) == 2:
            line += f"{timings['fallback'] / timings['compiled']:>10.2f}x"
        print(line)


if __name__ == "__main__":
    main()
