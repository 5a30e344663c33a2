"""Throughput comparison of the convolution backends.

Times the three hot kernels (forward, kernel gradient, input gradient) on
shapes representative of desk-scale training, for both the compiled
extension and the pure-numpy fallback, and prints a table plus the
compiled/python runtime ratio.

    python bench/bench_kernels.py [--repeats N]
"""

import argparse
import os
import sys
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from mri2ct.kernels import available_backends, get_backend

CASES = [
    # label, padded input, kernel, stride, dilation
    ("stem 1->16, 16^3", (2, 1, 18, 18, 18), (16, 1, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ("stage 16ch, 16^3", (2, 16, 18, 18, 18), (16, 16, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ("stage 32ch, 8^3", (2, 32, 10, 10, 10), (32, 32, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ("dilated d=2, 16^3", (2, 16, 20, 20, 20), (16, 16, 3, 3, 3), (1, 1, 1), (2, 2, 2)),
    ("downsample s=2", (2, 16, 18, 18, 18), (32, 16, 3, 3, 3), (2, 2, 2), (1, 1, 1)),
            ]


def flops(xs, ws, stride, dilation):
    b = xs[0]
    co, ci, kd, kh, kw = ws
    outs = [(e - d * (k - 1) - 1) // s + 1
            for e, k, s, d in zip(xs[2:], (kd, kh, kw), stride, dilation)]
    return 2 * b * co * ci * kd * kh * kw * int(np.prod(outs))


def time_fn(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    names = available_backends()
    if "cython" not in names:
        print("compiled extension not built; benchmarking the fallback only")
    backends = [(n, get_backend(n)) for n in names]
    rng = np.random.default_rng(0)

    header = f"{'case':22s} {'kernel':4s}" + "".join(
        f" {n + ' (ms)':>13s}" for n, _ in backends)
    if len(backends) == 2:
        header += f" {'cy/py':>7s}"
    print(header)
    print("-" * len(header))

    totals = {n: 0.0 for n, _ in backends}
    for label, xs, ws, stride, dilation in CASES:
        xp = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        ref = backends[0][1].conv3d_fwd(xp, w, stride, dilation)
        gy = np.ascontiguousarray(rng.standard_normal(ref.shape).astype(np.float32))
        gf = flops(xs, ws, stride, dilation)
        for kind, make in (
            ("fwd", lambda be: lambda: be.conv3d_fwd(xp, w, stride, dilation)),
            ("gw", lambda be: lambda: be.conv3d_gw(gy, xp, ws[2:], stride, dilation)),
            ("gx", lambda be: lambda: be.conv3d_gx(gy, w, xs, stride, dilation)),
        ):
            row = f"{label:22s} {kind:4s}"
            times = []
            for name, be in backends:
                t = time_fn(make(be), args.repeats)
                totals[name] += t
                times.append(t)
                row += f" {t * 1e3:10.3f}   "
            if len(times) == 2:
                row += f" {times[1] / times[0]:6.2f}x"
            row += f"   ({gf / times[0] / 1e9:.1f} GFLOP/s py)" if kind == "fwd" else ""
            print(row)

    print("-" * len(header))
    line = "total".ljust(27)
    for name, _ in backends:
        line += f" {totals[name] * 1e3:10.3f}   "
    if len(backends) == 2:
        line += f" {totals['cython'] / totals['python']:6.2f}x"
    print(line)


if __name__ == "__main__":
    main()
