"""Time the numpy and numba 3D convolution kernels on network-sized inputs.

    python3 benchmarks/bench_conv.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from swindiff import _accel

SHAPES = [  # (batch, extent, cin, cout)
    (4, (18, 18, 6), 1, 16),
    (4, (18, 18, 6), 16, 16),
    (4, (10, 10, 6), 32, 32),
    (64, (18, 18, 6), 16, 16),
]


def best_of(fn, repeat):
    fn()  # warm up and compile
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    kinds = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])
    print(f"{'shape':<28}{'op':<10}" + "".join(f"{k:>12}" for k in kinds))
    for b, ext, cin, cout in SHAPES:
        xp = rng.standard_normal((b, *ext, cin))
        w = rng.standard_normal((3, 3, 3, cin, cout))
        g = rng.standard_normal((b, *(e - 2 for e in ext), cout))
        ops = {
            "fwd": {"numpy": lambda: _accel.conv3d_forward_np(xp, w)},
            "bwd_in": {"numpy": lambda: _accel.conv3d_backward_input_np(g, w)},
            "bwd_w": {"numpy": lambda: _accel.conv3d_backward_weight_np(xp, g, 3)},
        }
        if _accel.NUMBA_AVAILABLE:
            ops["fwd"]["numba"] = lambda: _accel.conv3d_forward_nb(xp, w)
            ops["bwd_in"]["numba"] = lambda: _accel.conv3d_backward_input_nb(g, w)
            ops["bwd_w"]["numba"] = lambda: _accel.conv3d_backward_weight_nb(xp, g, 3)
        label = f"{b}x{ext} {cin}->{cout}"
        for op, fns in ops.items():
            row = "".join(f"{best_of(fns[k], args.repeat) * 1e3:>10.2f}ms" for k in kinds)
            print(f"{label:<28}{op:<10}{row}")


if __name__ == "__main__":
    main()
