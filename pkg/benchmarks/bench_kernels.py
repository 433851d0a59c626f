"""Time the numba and pure-numpy kernel paths side by side.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 64]

Each kernel is run once untimed first so numba compilation is excluded, then
the best of ``--repeat`` runs is reported. The last rows time a full forward
and backward pass of the default network, switching paths via SKIPCROSS_NUMBA.
"""
import argparse
import os
import time

import numpy as np

from skipcross import _kernels, model, ops


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(size, rng):
    x = rng.standard_normal((4, 32, size // 2 + 2, size // 2 + 2)).astype(np.float32)
    ho = wo = size // 2
    cols = rng.standard_normal((32 * 9, 4 * ho * wo)).astype(np.float32)
    alt = rng.standard_normal((size, 4 * size))
    occ = rng.uniform(size=alt.shape) < 0.3
    flat = rng.integers(0, size * size, 20000)
    depth = rng.uniform(1, 80, flat.size)
    return {
        "im2col 3x3": lambda k: k.im2col(x, 3, 3, 1, ho, wo),
        "col2im 3x3": lambda k: k.col2im(cols, 4, 32, ho + 2, wo + 2, 3, 3, 1, ho, wo),
        "adi r=2": lambda k: k.adi(alt, occ, 2),
        "knn k=3": lambda k: k.knn(occ[:, : size], 3),
        "zbuffer": lambda k: k.zbuffer(flat, depth),
    }


def network_step(size):
    net = model.build()
    rng = np.random.default_rng(0)
    rgb = rng.uniform(size=(4, 3, size, size)).astype(np.float32)
    adi = rng.uniform(size=(4, 1, size, size)).astype(np.float32)
    mask = (rng.uniform(size=(4, size, size)) > 0.5).astype(np.uint8)

    def step():
        loss = ops.softmax_cross_entropy(net(rgb, adi).logits, mask)
        loss.backward()
        net.zero_grad()

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64, help="image side for all cases")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'case':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fn in kernel_cases(args.size, rng).items():
        tb = best_of(lambda: fn(_kernels.NUMBA), args.repeat)
        tn = best_of(lambda: fn(_kernels.NUMPY), args.repeat)
        print(f"{name:<22}{1e3 * tb:>10.2f}{1e3 * tn:>10.2f}{tn / tb:>8.1f}x")

    step = network_step(args.size)
    saved = os.environ.get("SKIPCROSS_NUMBA")
    try:
        os.environ["SKIPCROSS_NUMBA"] = "1"
        tb = best_of(step, max(1, args.repeat // 2))
        os.environ["SKIPCROSS_NUMBA"] = "0"
        tn = best_of(step, max(1, args.repeat // 2))
    finally:
        if saved is None:
            os.environ.pop("SKIPCROSS_NUMBA", None)
        else:
            os.environ["SKIPCROSS_NUMBA"] = saved
    print(f"{'network fwd+bwd (N=4)':<22}{1e3 * tb:>10.2f}{1e3 * tn:>10.2f}{tn / tb:>8.1f}x")


if __name__ == "__main__":
    main()
