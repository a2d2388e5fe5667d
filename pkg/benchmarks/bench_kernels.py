#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Times the four hot kernels at the toy and mid-size block shapes, plus one
full body forward+backward, for whichever backends are available.

    python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from festa import kernels


def bench(fn, *args, repeats=200):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1e6  # us/call


def kernel_cases(rng, rows, dim):
    x = rng.standard_normal((rows, dim)).astype(np.float32)
    w = rng.standard_normal((dim, dim)).astype(np.float32)
    gain = np.ones(dim, dtype=np.float32)
    bias = np.zeros(dim, dtype=np.float32)
    return [
        ("matmul", lambda impl: impl["matmul"](x, w)),
        ("gelu", lambda impl: impl["gelu"](x)),
        ("softmax2d", lambda impl: impl["softmax2d"](x)),
        ("layernorm2d", lambda impl: impl["layernorm2d"](x, gain, bias, 1e-5)),
    ]


def body_step_case(backend_name, preset, seed=0):
    """One body forward + backward on a random block, end to end."""
    import importlib
    import os

    os.environ["FESTA_KERNELS"] = backend_name
    import festa.kernels

    importlib.reload(festa.kernels)
    import festa.tensor

    importlib.reload(festa.tensor)
    import festa.nets

    importlib.reload(festa.nets)
    import festa.tensor as T
    from festa.nets import BODY_PRESETS, TransformerBody

    cfg = BODY_PRESETS[preset]
    rng = np.random.default_rng(seed)
    body = TransformerBody(cfg, rng)
    block = rng.standard_normal((cfg.tokens + 1, cfg.dim)).astype(np.float32)

    def step():
        g = T.Graph(check_finite=False)
        out = body.forward(g, g.leaf(block))
        g.backward(T.mean_all(out))

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    backends = {}
    backends["numpy"] = kernels.load_backend("numpy")[1]
    try:
        backends["cython"] = kernels.load_backend("cython")[1]
    except ImportError:
        print("compiled core not built; benchmarking numpy only\n")

    rng = np.random.default_rng(0)
    shapes = [("toy block 17x32", 17, 32), ("mid block 257x256", 257, 256)]
    header = f"{'kernel':<22}" + "".join(f"{name + ' us':>14}" for name in backends)
    for label, rows, dim in shapes:
        print(f"-- {label}")
        print(header)
        for name, call in kernel_cases(rng, rows, dim):
            cells = [bench(call, impl, repeats=args.repeats)
                     for impl in backends.values()]
            print(f"{name:<22}" + "".join(f"{c:>14.1f}" for c in cells))
        print()

    print("-- full body forward+backward (toy preset)")
    print(header)
    cells = []
    for backend_name in backends:
        step = body_step_case(backend_name, "toy")
        cells.append(bench(step, repeats=max(args.repeats // 10, 5)))
    print(f"{'body fwd+bwd':<22}" + "".join(f"{c:>14.1f}" for c in cells))


if __name__ == "__main__":
    main()
