"""Time the numba and numpy Heun kernels on the shapes the presets use.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both paths are importable whenever numba is installed (the env flag only picks
the default used by the integrator), so one process can time them side by side
and compare their outputs.
"""
import argparse
import timeit

import numpy as np

from diffqc import _kernels as K

# (label, batch, real dimension 2D, n_sub)
CASES = [
    ("qubit b=256", 256, 4, 20),
    ("ghz-m3 b=256", 256, 16, 20),
    ("ghz-m5 b=256", 256, 64, 20),
    ("parametron b=64", 64, 32, 200),
]


def random_generator(rng, b, n):
    a = rng.normal(size=(b, n, n))
    return a - np.transpose(a, (0, 2, 1))  # antisymmetric, like every real generator


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if K.nb is None:
        print("numba unavailable; timing the numpy path only")
    rng = np.random.default_rng(0)
    print(f"{'case':<18}{'kernel':<8}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}{'max diff':>11}")
    for label, b, n, n_sub in CASES:
        M = random_generator(rng, b, n) * 0.5
        x = rng.normal(size=(b, n))
        g = rng.normal(size=(b, n))
        dt = 1e-3
        pairs = [
            ("fwd", lambda: K.heun_interval_numpy(M, x, n_sub, dt), lambda: K.heun_interval_numba(M, x, n_sub, dt)),
            ("vjp", lambda: K.heun_interval_vjp_numpy(M, x, g, n_sub, dt), lambda: K.heun_interval_vjp_numba(M, x, g, n_sub, dt)),
        ]
        for kind, f_np, f_nb in pairs:
            t_np = min(timeit.repeat(f_np, number=1, repeat=args.repeat)) * 1e3
            if K.nb is not None:
                f_nb()  # compile outside the timed region
                t_nb = min(timeit.repeat(f_nb, number=1, repeat=args.repeat)) * 1e3
                a, c = f_np(), f_nb()
                a, c = (a, c) if kind == "fwd" else (a[1], c[1])
                diff = float(np.abs(a - c).max())
                print(f"{label:<18}{kind:<8}{t_np:>11.2f}{t_nb:>11.2f}{t_np / t_nb:>8.1f}x{diff:>11.1e}")
            else:
                print(f"{label:<18}{kind:<8}{t_np:>11.2f}{'-':>11}{'-':>9}{'-':>11}")


if __name__ == "__main__":
    main()
