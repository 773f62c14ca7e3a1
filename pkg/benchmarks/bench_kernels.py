"""Compare the numba and numpy kernel backends on the hot paths.

Run directly:  python benchmarks/bench_kernels.py
Force one backend for the whole package with ABYSS_BACKEND=numpy|numba.
"""

import time

import numpy as np

from abyss import kernels
from abyss.metrics import SSIM_C1, SSIM_C2, gaussian_window


def timeit(fn, *args, repeats=20):
    fn(*args)  # warm-up (and JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(backend_fns):
    cases = [
        ("conv 16x16x64x64 k3 s1", (16, 16, 64, 64), (16, 16, 3, 3), 1),
        ("conv 16x32x16x16 k3 s1", (16, 32, 16, 16), (32, 32, 3, 3), 1),
        ("conv 16x16x32x32 k3 s2", (16, 16, 32, 32), (16, 16, 3, 3), 2),
    ]
    rng = np.random.default_rng(0)
    for label, xs, ws, stride in cases:
        x = rng.random(xs, dtype=np.float32)
        w = rng.random(ws, dtype=np.float32)
        row = [label]
        for name, (fwd, _) in backend_fns.items():
            dt = timeit(fwd, x, w, stride)
            oh = (xs[2] - ws[2]) // stride + 1
            ow = (xs[3] - ws[3]) // stride + 1
            macs = xs[0] * ws[0] * oh * ow * ws[1] * ws[2] * ws[3]
            row.append(f"{name}: {dt * 1e3:7.2f} ms ({macs / dt / 1e9:5.2f} GMAC/s)")
        print("  ".join(row))


def bench_ssim(backend_fns):
    rng = np.random.default_rng(1)
    a = rng.random((64, 64))
    b = rng.random((64, 64))
    win = gaussian_window()
    for name, (_, smap) in backend_fns.items():
        dt = timeit(smap, a, b, win, SSIM_C1, SSIM_C2)
        print(f"ssim 64x64: {name}: {dt * 1e3:7.2f} ms")


def main():
    backends = {"numpy": (kernels._conv2d_valid_np, kernels._ssim_map_np)}
    if kernels.HAS_NUMBA:
        def conv_nb(x, w, stride):
            if stride == 1:
                return kernels._conv2d_valid_s1_nb(x, w)
            return kernels._conv2d_valid_s2_nb(x, w)

        backends["numba"] = (conv_nb, kernels._ssim_map_nb)
    else:
        print("numba not available; benchmarking the numpy backend only")
    print(f"active package backend: {kernels.ACTIVE_BACKEND}")
    bench_conv(backends)
    bench_ssim(backends)


if __name__ == "__main__":
    main()
