"""Timing comparison of the compiled kernel core against the numpy fallback.

Run from the repository root:

    python benchmarks/bench_kernels.py

Forward and backward timings are medians over repeated calls; shapes mirror
the backbone's first convolution and the decoder's sampling pattern.
"""

import time

import numpy as np

from slabdet import _kernels
from slabdet._kernels import reference


def median_time(fn, repeats=7):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return sorted(times)[len(times) // 2]


def conv_cases(rng):
    for name, (h, w, cin, cout, k, stride, pad) in [
        ("conv 96x96x1->16 k7 s2", (96, 96, 1, 16, 7, 2, 3)),
        ("conv 48x48x16->32 k3 s2", (48, 48, 16, 32, 3, 2, 1)),
        ("conv 24x24x32->64 k3 s1", (24, 24, 32, 64, 3, 1, 1)),
    ]:
        x = rng.standard_normal((h, w, cin))
        wt = rng.standard_normal((k, k, cin, cout))
        yield name, x, wt, stride, pad


def bilinear_cases(rng):
    for name, (h, w, c, n) in [
        ("sample 12x12x64, 320 pts", (12, 12, 64, 320)),
        ("sample 24x24x64, 1280 pts", (24, 24, 64, 1280)),
    ]:
        m = rng.standard_normal((h, w, c))
        pts = rng.uniform(-1.0, max(h, w), size=(n, 2))
        yield name, m, pts


def main():
    rng = np.random.default_rng(0)
    if not _kernels.COMPILED:
        print("compiled core unavailable; benchmark needs both backends")
        return 1

    rows = []
    for name, x, wt, stride, pad in conv_cases(rng):
        gy = reference.conv2d_forward(x, wt, stride, pad)
        rows.append((name + " fwd",
                     median_time(lambda: _kernels.conv2d_forward(x, wt, stride, pad)),
                     median_time(lambda: reference.conv2d_forward(x, wt, stride, pad))))
        rows.append((name + " bwd",
                     median_time(lambda: _kernels.conv2d_backward(x, wt, gy, stride, pad)),
                     median_time(lambda: reference.conv2d_backward(x, wt, gy, stride, pad))))
    for name, m, pts in bilinear_cases(rng):
        gout = rng.standard_normal((pts.shape[0], m.shape[2]))
        rows.append((name + " fwd",
                     median_time(lambda: _kernels.bilinear_forward(m, pts)),
                     median_time(lambda: reference.bilinear_forward(m, pts))))
        rows.append((name + " bwd",
                     median_time(lambda: _kernels.bilinear_backward(m, pts, gout)),
                     median_time(lambda: reference.bilinear_backward(m, pts, gout))))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'compiled':>10}  {'numpy':>10}  {'speedup':>8}")
    for name, fast, slow in rows:
        print(f"{name:<{width}}  {fast * 1e6:>8.1f}us  {slow * 1e6:>8.1f}us  "
              f"{slow / fast:>7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
