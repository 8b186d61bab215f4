"""Time the compiled solver kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--count 20] [--users 3] [--antennas 4]
"""
import argparse
import json
import time

import numpy as np

from tokbeam import kernels
from tokbeam.channel import TaskSpec, Utility, generate_rayleigh
from tokbeam.solvers import mrt


def _time(fn, samples, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for s in samples:
            fn(s)
        best = min(best, time.perf_counter() - t0)
    return best / len(samples)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--users", type=int, default=3)
    ap.add_argument("--antennas", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    samples = generate_rayleigh(0, TaskSpec(Utility.SR, args.users, args.antennas), args.count)
    rng = np.random.default_rng(0)
    cands = rng.normal(size=(4096, args.users, args.antennas)) * (1 + 1j)
    jobs = {
        "wmmse": lambda m: lambda s: m.wmmse(s.h, s.noise_power, s.p_max, mrt(s)),
        "wmmse_priced": lambda m: lambda s: m.wmmse(s.h, s.noise_power, s.p_max, mrt(s), 0.5),
        "maxmin_pga": lambda m: lambda s: m.maxmin_pga(s.h, s.noise_power, s.p_max, mrt(s)),
        "utilities_batch": lambda m: lambda s: m.utilities_batch(s.h, s.noise_power, cands, 0.5),
    }
    backends = {"python": kernels.get("python")}
    try:
        backends["cython"] = kernels.get("cython")
    except ImportError:
        print("compiled kernels not built; timing the fallback only")
    rows = []
    for name, make in jobs.items():
        t = {b: _time(make(m), samples, args.repeat) for b, m in backends.items()}
        row = {"kernel": name, **{f"{b}_ms": round(v * 1e3, 3) for b, v in t.items()}}
        if "cython" in t:
            row["speedup"] = round(t["python"] / t["cython"], 1)
        rows.append(row)
        print(json.dumps(row))
    return rows


if __name__ == "__main__":
    main()
