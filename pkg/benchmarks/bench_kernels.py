#!/usr/bin/env python3
"""Numba vs numpy for the hot kernels, plus single-window decode latency.

Run from the repo root:  python3 benchmarks/bench_kernels.py [--quick]
The numpy path is what ``DIFFBCI_DISABLE_NUMBA=1`` selects at import time.
"""
import argparse
import time

import numpy as np

from diffbci import dsp, kernels
from diffbci._accel import HAS_NUMBA
from diffbci.diffusion import ModelConfig, NoiseSchedule, init_params
from diffbci.online import Decoder, latency_benchmark


def best_of(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)


def bench_filter(repeat):
    sos = dsp.default_chain(64).sos
    rng = np.random.default_rng(0)
    print(f"{'samples':>8}  {'numpy (ms)':>11}  {'numba (ms)':>11}  {'speedup':>8}  {'equal':>6}")
    print("-" * 52)
    for n in (50, 500, 4500):
        x = rng.standard_normal((64, n))
        state = np.zeros((sos.shape[0], 2, 64))
        y_np = kernels.sos_filter_numpy(sos, x, state.copy())
        t_np = best_of(lambda: kernels.sos_filter_numpy(sos, x, state.copy()), repeat)
        if HAS_NUMBA:
            y_nb = kernels.sos_filter_numba(sos, x, state.copy())  # compile outside the timing
            t_nb = best_of(lambda: kernels.sos_filter_numba(sos, x, state.copy()), repeat)
            same = "yes" if np.array_equal(y_np, y_nb) else "NO"
            print(f"{n:>8}  {1e3 * t_np:>11.3f}  {1e3 * t_nb:>11.3f}  {t_np / t_nb:>7.1f}x  {same:>6}")
        else:
            print(f"{n:>8}  {1e3 * t_np:>11.3f}  {'n/a':>11}  {'':>8}  {'':>6}")


def bench_conv(repeat):
    # conv stays on BLAS in both modes; this row shows what it costs
    rng = np.random.default_rng(1)
    x = np.pad(rng.standard_normal((16, 8, 1000)), ((0, 0), (0, 0), (3, 3)))
    w = rng.standard_normal((8, 8, 7))
    t = best_of(lambda: kernels.conv1d_forward(x, w, 1, 1000), repeat)
    print(f"\nconv1d forward, batch 16, 8->8 ch, k=7, L=1000: {1e3 * t:.3f} ms")


def bench_decode(n):
    dec = Decoder(init_params(ModelConfig(), 0), NoiseSchedule())
    stats = latency_benchmark(dec, n)
    print(f"\nsingle-window decode over {n} windows (backend={'numba' if HAS_NUMBA else 'numpy'})")
    print(stats.to_text(), end="")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    repeat = 3 if args.quick else 10
    print(f"numba available: {HAS_NUMBA}\n")
    bench_filter(repeat)
    bench_conv(repeat)
    bench_decode(20 if args.quick else 100)


if __name__ == "__main__":
    main()
