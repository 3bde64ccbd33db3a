"""Compare the numba kernels with their numpy fallbacks.

Two parts:

* kernel micro-benchmarks (im2col, col2im, Jacobi eigenvalues) on shapes
  seen in the toy and CIFAR-sized networks, calling both implementations
  in this process and checking they agree;
* an end-to-end timing of one PGD-10 attack batch on the toy network, run
  in two subprocesses with ``ROBUSTWRN_NUMBA=1`` and ``ROBUSTWRN_NUMBA=0``.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--skip-e2e]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from robustwrn import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (triggers numba compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    for n, c, m, k, stride in [(64, 16, 16, 3, 1), (64, 32, 16, 3, 2), (128, 64, 8, 3, 1), (32, 160, 32, 3, 1)]:
        pad = k // 2
        xp = rng.standard_normal((n, c, m + 2 * pad, m + 2 * pad))
        ho = (m + 2 * pad - k) // stride + 1
        yield f"im2col  n={n} c={c} m={m} s={stride}", (
            lambda: K._im2col_numpy(xp, k, stride, ho, ho),
            (lambda: K._im2col_nb(xp, k, stride, ho, ho)) if K.HAVE_NUMBA else None,
        )
        dcols = rng.standard_normal((n * ho * ho, c * k * k))
        hp = m + 2 * pad
        yield f"col2im  n={n} c={c} m={m} s={stride}", (
            lambda: K._col2im_numpy(dcols, n, c, hp, hp, k, stride, ho, ho),
            (lambda: K._col2im_nb(dcols, n, c, hp, hp, k, stride, ho, ho)) if K.HAVE_NUMBA else None,
        )
    for size in (16, 48, 96):
        a = rng.standard_normal((size, size))
        a = a @ a.T
        yield f"jacobi  {size}x{size}", (
            lambda: K._jacobi_eigvalsh_numpy(a, 1e-14, 60),
            (lambda: K._jacobi_eigvalsh_nb(a, 1e-14, 60)) if K.HAVE_NUMBA else None,
        )


E2E_SNIPPET = """
import time, numpy as np
from robustwrn import _kernels
from robustwrn.arch import build_network, parse_config
from robustwrn.attacks import AttackConfig, pgd
net = build_network(parse_config("d1-1-1", "w1-1-2", 1, 4, (3, 16, 16)), 0, np.float32)
rng = np.random.default_rng(0)
x = rng.random((64, 3, 16, 16)).astype(np.float32)
y = rng.integers(0, 4, 64)
cfg = AttackConfig(8 / 255, 10, 2 / 255, True)
pgd(net, x[:2], y[:2], cfg, np.random.default_rng(0))
best = min((lambda t: (pgd(net, x, y, cfg, np.random.default_rng(0)), time.perf_counter() - t)[1])(time.perf_counter()) for _ in range({repeat}))
print(_kernels.backend(), best)
"""


def end_to_end(repeat):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, ROBUSTWRN_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E_SNIPPET.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)

    print(f"numba available: {K.HAVE_NUMBA}")
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, (np_fn, nb_fn) in kernel_cases(rng):
        t_np = best_of(np_fn, args.repeat)
        if nb_fn is None:
            print(f"{label:34s} {t_np * 1e3:10.2f} {'-':>10s} {'-':>8s}")
            continue
        if not np.allclose(np_fn(), nb_fn(), rtol=1e-10, atol=1e-10):
            raise SystemExit(f"{label}: numba and numpy results differ")
        t_nb = best_of(nb_fn, args.repeat)
        print(f"{label:34s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")

    if not args.skip_e2e:
        e2e = end_to_end(args.repeat)
        print("\nPGD-10 on a batch of 64 (toy network d1-1-1/w1-1-2, 16x16):")
        for name, secs in e2e.items():
            print(f"  {name:6s} {secs:.3f} s")
        if "numba" in e2e and "numpy" in e2e:
            print(f"  speedup {e2e['numpy'] / e2e['numba']:.2f}x")


if __name__ == "__main__":
    main()
