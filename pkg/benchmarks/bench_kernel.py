"""Benchmark the compiled stepping kernel against the numpy fallback.

Runs the same full uplink frame (excitation, ringdown, 8-flip extraction)
through both backends and reports steps per second and the speedup.  Usage:

    python benchmarks/bench_kernel.py [repeats]
"""

import sys
import time

import numpy as np

import melink.engine as engine
from melink import _kernel_py
from melink.engine import DriveConfig, run
from melink.scee import SceeBank, build_scee_schedule
from melink.timing import calibrate_period, detect_zero_crossing, en_scee_pulses
from melink.transducer import reference_model

try:
    from melink import _kernel as _kernel_c
except ImportError:
    _kernel_c = None

F0 = 331e3
T0 = 1.0 / F0
DT = T0 / 200


def build_frame():
    model = reference_model(order=3)
    drive = DriveConfig(amplitude=1.0, f_drive=F0, t_start=0.0, t_stop=24 * T0)
    bank = SceeBank()
    ref = run(model, drive, [], DT, 60 * T0, n_fly=bank.n_fly,
              c_fly_each=bank.c_each)
    _, code, _ = calibrate_period(ref, 24 * T0 + 0.05 * T0)
    zc = detect_zero_crossing(ref, 27 * T0)
    pulses = en_scee_pulses(zc, code, 15e-9, 4)
    sched = build_scee_schedule(bank, list(pulses),
                                [+1 if i % 2 == 0 else -1 for i in range(8)])
    return model, drive, bank, sched


def time_backend(kernel, model, drive, bank, sched, repeats):
    engine._kernel = kernel
    best = float("inf")
    trace = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        trace = run(model, drive, list(sched.events), DT, 60 * T0,
                    probes=("v_cp", "i_b0"), n_fly=bank.n_fly,
                    c_fly_each=bank.c_each)
        best = min(best, time.perf_counter() - t0)
    return best, trace


def main():
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 5
    model, drive, bank, sched = build_frame()
    n_steps = int(round(60 * T0 / DT))
    orig = engine._kernel

    try:
        py_time, py_trace = time_backend(_kernel_py, model, drive, bank,
                                         sched, repeats)
        print(f"python backend:  {py_time * 1e3:8.2f} ms/frame "
              f"({n_steps / py_time:,.0f} steps/s)")
        if _kernel_c is None:
            print("compiled backend: not built (pip install -e . rebuilds it)")
            return
        c_time, c_trace = time_backend(_kernel_c, model, drive, bank,
                                       sched, repeats)
        print(f"compiled backend:{c_time * 1e3:8.2f} ms/frame "
              f"({n_steps / c_time:,.0f} steps/s)")
        print(f"speedup: {py_time / c_time:.1f}x")
        worst = max(np.max(np.abs(c_trace[p] - py_trace[p]))
                    for p in ("v_cp", "i_b0"))
        print(f"max |difference| between backends: {worst:.3e}")
    finally:
        engine._kernel = orig


if __name__ == "__main__":
    main()
