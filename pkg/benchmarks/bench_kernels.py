"""Compare the numba and numpy checker kernels on growing single-subject configs.

    python3 benchmarks/bench_kernels.py [--pages 1024 4096 16384 65536] [--reps 20]

Prints one row per size: best-of-reps milliseconds for the batched page walk
and the validity scan under each backend, and the numpy/numba ratio.
"""

import argparse
import time

import numpy as np

from skrefine import _kernels, checker, synth, toolchain


def best_ms(fn, reps):
    fn()
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--pages", type=int, nargs="+", default=[1024, 4096, 16384, 65536])
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()

    print(f"{'pages':>7} {'walk numba':>11} {'walk numpy':>11} {'scan numba':>11} {'scan numpy':>11} {'ratio':>6}")
    for n in args.pages:
        art = toolchain.generate(synth.single_subject_policy(n), cap=1 << 32)
        b, ptf = art.bpolicy, art.pts[0]
        vas, *_ = checker._pages(b, b.subjects[0])
        vas = np.ascontiguousarray(vas, dtype=np.uint64)
        base = np.uint64(ptf.pt_base)
        _, _, _, used = _kernels.walk_pages_numpy(ptf.words, ptf.pt_base, vas)

        w_nb = best_ms(lambda: _kernels.walk_pages_numba(ptf.words, base, vas), args.reps)
        w_np = best_ms(lambda: _kernels.walk_pages_numpy(ptf.words, ptf.pt_base, vas), args.reps)
        s_nb = best_ms(lambda: _kernels.unmarked_present_numba(ptf.words, used), args.reps)
        s_np = best_ms(lambda: _kernels.unmarked_present_numpy(ptf.words, used), args.reps)
        ratio = (w_np + s_np) / (w_nb + s_nb)
        print(f"{n:>7} {w_nb:>11.3f} {w_np:>11.3f} {s_nb:>11.3f} {s_np:>11.3f} {ratio:>6.1f}")


if __name__ == "__main__":
    main()
