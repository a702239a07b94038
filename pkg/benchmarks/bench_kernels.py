"""Compiled vs numpy kernels: per-kernel timings and a full forward/backward.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 64]

Each row reports the median wall time over ``--repeat`` runs for both
backends and the max absolute difference between their outputs.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from retseg import _pykernels, kernels
from retseg.losses import total_loss
from retseg.model import RetSegConfig, init_params, retseg_forward
from retseg.retention import grid_coords
from retseg.tensor import Tape, Tensor, backward


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(rng, size):
    x = rng.standard_normal((2, 32, size, size))
    dw = rng.standard_normal((32, 1, 3, 3))
    gw = rng.standard_normal((32, 8, 3, 3))
    gy_dw = rng.standard_normal((2, 32, size // 2, size // 2))
    gy_g = rng.standard_normal((2, 32, size, size))
    coords = grid_coords(size // 4, size // 4)
    return {
        "conv dw s2 fwd": lambda k: k.conv2d_forward(x, dw, 2, 1, 32),
        "conv dw s2 bwd-in": lambda k: k.conv2d_backward_input(gy_dw, dw, x.shape, 2, 1, 32),
        "conv dw s2 bwd-w": lambda k: k.conv2d_backward_weight(x, gy_dw, dw.shape, 2, 1, 32),
        "conv g4 fwd": lambda k: k.conv2d_forward(x, gw, 1, 1, 4),
        "conv g4 bwd-in": lambda k: k.conv2d_backward_input(gy_g, gw, x.shape, 1, 1, 4),
        "conv g4 bwd-w": lambda k: k.conv2d_backward_weight(x, gy_g, gw.shape, 1, 1, 4),
        "upsample x2 fwd": lambda k: k.upsample2x_forward(x),
        "upsample x2 bwd": lambda k: k.upsample2x_backward(gy_g),
        f"decay mask N={len(coords)}": lambda k: k.decay_mask(coords, 0.96875),
    }


def model_step(size):
    cfg = RetSegConfig(image_size=size)
    params = init_params(cfg, 0)
    rng = np.random.default_rng(1)
    img = Tensor(rng.random((1, 3, size, size)))
    y = Tensor((rng.random((1, 1, size, size)) < 0.3).astype(float))

    def forward():
        return retseg_forward(img, params, cfg)

    def train_step():
        with Tape() as tape:
            loss, _ = total_loss(retseg_forward(img, params, cfg), y)
        backward(loss, tape)

    return forward, train_step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64, help="spatial size for kernel and model cases")
    args = ap.parse_args(argv)
    if "c" not in kernels.available():
        raise SystemExit("compiled kernels are not built; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'case':<26}{'c ms':>10}{'python ms':>12}{'speedup':>9}{'max |diff|':>13}")
    for name, case in kernel_cases(rng, args.size).items():
        tc = median_time(lambda: case(kernels._ckernels), args.repeat)
        tp = median_time(lambda: case(_pykernels), args.repeat)
        diff = float(np.abs(case(kernels._ckernels) - case(_pykernels)).max())
        print(f"{name:<26}{tc * 1e3:>10.3f}{tp * 1e3:>12.3f}{tp / tc:>9.2f}{diff:>13.2e}")

    forward, train_step = model_step(args.size)
    for name, fn in ((f"model forward S={args.size}", forward), (f"model fwd+bwd S={args.size}", train_step)):
        kernels.use("c")
        tc = median_time(fn, args.repeat)
        out_c = forward().data
        kernels.use("python")
        tp = median_time(fn, args.repeat)
        out_p = forward().data
        kernels.use("auto")
        print(f"{name:<26}{tc * 1e3:>10.3f}{tp * 1e3:>12.3f}{tp / tc:>9.2f}{np.abs(out_c - out_p).max():>13.2e}")


if __name__ == "__main__":
    main()
