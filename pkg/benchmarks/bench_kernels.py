"""Compare the compiled sparse kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats 50]

Times one LeNet-300-100 training step (forward + active-weight backward)
at layer sparsities 0.99 / 0.89 / 0, on a batch of 100 MNIST-like inputs,
once per kernel backend and once with every layer forced dense.
"""
import argparse
import time

import numpy as np

from rigl import kernels
from rigl.arch import lenet_300_100
from rigl.sparsity import allocate_custom, sparsify_model
from rigl.tensor import init_model, loss_and_grad


def _step_time(model, x, y, backend, repeats):
    loss_and_grad(model, x, y, 5e-4, dense=False, backend=backend)
    start = time.perf_counter()
    for _ in range(repeats):
        loss_and_grad(model, x, y, 5e-4, dense=False, backend=backend)
    return (time.perf_counter() - start) / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=50)
    parser.add_argument("--batch", type=int, default=100)
    args = parser.parse_args()

    arch = lenet_300_100()
    model = sparsify_model(init_model(arch, 0), allocate_custom(arch, (0.99, 0.89, 0.0)), seed=0)
    rng = np.random.default_rng(0)
    # roughly MNIST-like: ~80% of pixels are exactly zero
    x = rng.random((args.batch, 784)) * (rng.random((args.batch, 784)) < 0.2)
    y = rng.integers(0, 10, args.batch)

    rows = [("dense (BLAS)", _step_time(model, x, y, "dense", args.repeats))]
    saved = kernels.active
    try:
        backends = [kernels.numpy_kernels]
        if kernels.compiled_kernels is not None:
            backends.append(kernels.compiled_kernels)
        for impl in backends:
            kernels.active = impl
            rows.append((f"sparse ({impl.name})", _step_time(model, x, y, "sparse", args.repeats)))
    finally:
        kernels.active = saved

    base = rows[0][1]
    print(f"{'path':<22}{'ms/step':>10}{'speedup':>10}")
    for name, sec in rows:
        print(f"{name:<22}{sec * 1e3:>10.3f}{base / sec:>9.2f}x")
    if kernels.compiled_kernels is None:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
