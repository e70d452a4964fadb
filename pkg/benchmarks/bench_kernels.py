"""Compare the numba and pure-numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times each kernel on shapes taken from the default network, then one full
training step on a 128x128 batch and on a 4-patch 40x40 batch. Prints a table
and checks the two backends agree numerically.
"""

import argparse
import time

import numpy as np

from evopatch.nn import build_default, kernels
from evopatch.nn.train import AdamState, adam_step


def best_of(fn, repeat):
    fn()  # warm up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    x1 = rng.random((8, 128, 128, 1), dtype=np.float32)
    x2 = rng.random((8, 63, 63, 16), dtype=np.float32)
    cols = rng.random((8, 61, 61, 144), dtype=np.float32)
    pool_in = rng.random((8, 126, 126, 16), dtype=np.float32)
    out, idx = kernels.maxpool_forward(pool_in, 2)
    dout = rng.random(out.shape, dtype=np.float32)
    return {
        "im2col 128x128x1": lambda: kernels.im2col(x1, 3, 3),
        "im2col 63x63x16": lambda: kernels.im2col(x2, 3, 3),
        "col2im 63x63x16": lambda: kernels.col2im(cols, 63, 63, 3, 3),
        "maxpool fwd 126x126x16": lambda: kernels.maxpool_forward(pool_in, 2),
        "maxpool bwd 126x126x16": lambda: kernels.maxpool_backward(dout, idx, 126, 126, 2),
    }


def train_step_case(shape, rng):
    model = build_default(shape, 3, rng_seed=0)
    x = rng.random((8, *shape), dtype=np.float32)
    y = rng.integers(0, 3, 8)
    state = AdamState()
    drop_rng = np.random.default_rng(0)

    def step():
        model.loss_and_grads(x, y, training=True, rng=drop_rng)
        adam_step(model.get_params(), model.get_grads(), state, t=1)

    return step


def agreement(rng):
    x = rng.normal(size=(2, 17, 19, 3))
    out = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        cols = kernels.im2col(x, 3, 3)
        pooled, idx = kernels.maxpool_forward(x[:, :16, :18], 2)
        out[name] = (cols, kernels.col2im(cols, 17, 19, 3, 3), pooled,
                     kernels.maxpool_backward(pooled, idx, 16, 18, 2))
    ref = out["numpy"]
    return {name: max(float(np.max(np.abs(a - b))) for a, b in zip(ref, vals)) for name, vals in out.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = kernels.available_backends()
    prev = kernels.backend()
    rows = {}
    for name in backends:
        kernels.use_backend(name)
        rng = np.random.default_rng(0)
        cases = kernel_cases(rng)
        cases["train step 128x128x1"] = train_step_case((128, 128, 1), rng)
        cases["train step 40x40x4"] = train_step_case((40, 40, 4), rng)
        for case, fn in cases.items():
            rows.setdefault(case, {})[name] = best_of(fn, args.repeat if "train" not in case else max(3, args.repeat // 4))
    kernels.use_backend(prev)

    print(f"{'case':<26}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + (f"{'speedup':>10}" if len(backends) > 1 else ""))
    for case, t in rows.items():
        line = f"{case:<26}" + "".join(f"{t[b] * 1e3:>14.2f}" for b in backends)
        if "numba" in t:
            line += f"{t['numpy'] / t['numba']:>9.1f}x"
        print(line)
    print("max |diff| vs numpy:", {k: f"{v:.1e}" for k, v in agreement(np.random.default_rng(1)).items()})
    kernels.use_backend(prev)


if __name__ == "__main__":
    main()
