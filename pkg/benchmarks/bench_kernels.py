"""Time the compiled kernels against their numpy/zlib twins.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Prints one line per kernel with the best-of-``repeat`` time for each backend
and the speedup.  Outputs are compared as well, so a mismatch shows up here
before it shows up in a test.
"""

import argparse
import math
import sys
import time

import numpy as np

from direct_store import kernels


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(quick):
    rng = np.random.default_rng(0)
    block = rng.integers(0, 256, (1 if quick else 8) << 20, dtype=np.uint8).tobytes()
    sums = kernels.crc32_pieces(block, 512)
    a = rng.integers(0, 256, 64 << 10, dtype=np.uint8).tobytes()
    b, c = bytearray(a), bytearray(a)
    b[100] ^= 4
    c[9000] ^= 1
    positions = np.sort(rng.choice(len(block) * 8, 50_000, replace=False)).astype(np.int64)
    keys = kernels.mix64_array(np.arange(256, dtype=np.uint64))
    trials = 20_000 if quick else 200_000
    lm = math.log1p(-1e-3)
    return {
        "crc32_pieces 512B": lambda m: m.crc32_pieces(block, 512).tolist(),
        "bad_pieces (clean)": lambda m: m.bad_pieces(block, sums, 512).tolist(),
        "majority3 64KiB": lambda m: bytes(m.majority3(a, bytes(b), bytes(c))),
        "apply_flips 50k": lambda m: bytes(_flipped(m, block, positions)),
        "geometric_flips": lambda m: m.geometric_flips(keys, 0, 1 << 16, 256 << 16, lm).tolist(),
        "mc_block 4096b R3": lambda m: m.mc_block_failures(4096, 3, lm, trials, 1),
        "mc_chunk 4096/512 R3": lambda m: m.mc_chunk_failures(4096, 512, 3, lm, trials, 1),
    }


def _flipped(mod, data, positions):
    buf = bytearray(data)
    mod.apply_flips(buf, positions)
    return buf


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--quick", action="store_true", help="smaller inputs")
    args = p.parse_args(argv)
    found = kernels.backends()
    if "cython" not in found:
        print("compiled kernels not built; only the python backend is available", file=sys.stderr)
    crc = getattr(found.get("cython"), "CRC_IMPL", "n/a")
    print(f"# default backend: {kernels.BACKEND}; compiled crc32: {crc}")
    print(f"{'kernel':24s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    mismatches = 0
    for name, fn in cases(args.quick).items():
        t_py, out_py = best_of(lambda: fn(found["python"]), args.repeat)
        if "cython" in found:
            t_cy, out_cy = best_of(lambda: fn(found["cython"]), args.repeat)
            same = out_py == out_cy
            mismatches += not same
            print(f"{name:24s} {t_py * 1e3:10.2f} {t_cy * 1e3:10.2f} {t_py / t_cy:7.1f}x"
                  + ("" if same else "  OUTPUT DIFFERS"))
        else:
            print(f"{name:24s} {t_py * 1e3:10.2f} {'-':>10s} {'-':>8s}")
    return 1 if mismatches else 0


if __name__ == "__main__":
    sys.exit(main())
