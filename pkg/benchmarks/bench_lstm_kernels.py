"""Time the compiled and pure-Python LSTM scan kernels (forward + backward).

    python3 benchmarks/bench_lstm_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from hybridocc import kernels

SHAPES = [(1, 24, 4), (16, 24, 16), (32, 24, 64), (32, 24, 128)]


def bench(fwd, bwd, B, T, H, repeat):
    rng = np.random.default_rng(0)
    xw = rng.normal(size=(B, T, 4 * H))
    U = rng.normal(size=(H, 4 * H)) / np.sqrt(H)
    dh = rng.normal(size=(B, T, H))

    def step():
        hs, cs, gates = fwd(xw, U, False)
        bwd(dh, U, hs, cs, gates, False)

    step()
    number = max(1, int(0.2 / max(timeit.timeit(step, number=1), 1e-6)))
    return min(timeit.repeat(step, number=number, repeat=repeat)) / number * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'B':>4} {'T':>4} {'H':>4}  " + "  ".join(f"{n + ' ms':>12}" for n in backends)
          + ("  speedup" if len(backends) > 1 else ""))
    for B, T, H in SHAPES:
        ms = {n: bench(f, b, B, T, H, args.repeat) for n, (f, b) in backends.items()}
        line = f"{B:>4} {T:>4} {H:>4}  " + "  ".join(f"{ms[n]:>12.3f}" for n in backends)
        if "compiled" in ms:
            line += f"  {ms['python'] / ms['compiled']:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
