"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Each row checks that both paths agree before timing them.  The numba
functions are warmed up once so compilation is not counted.
"""
import argparse
import time

import numpy as np

from fpaenet import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_case(n, c, size, k, stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, size, size)).astype(np.float32)
    w = rng.standard_normal((c, c, k, k)).astype(np.float32)
    b = np.zeros(c, np.float32)
    pad = k // 2

    def run(use_numba):
        out, cols = K.conv2d_forward(x, w, b, stride, pad, use_numba)
        return out, K.conv2d_backward(np.ones_like(out), x, w, cols, stride, pad, True, use_numba)

    return f"conv {k}x{k} s{stride} fwd+bwd  N={n} C={c} {size}x{size}", run


def nms_case(m):
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 100, (m, 2))
    wh = rng.uniform(5, 40, (m, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)

    def run(use_numba):
        return K.nms_sorted(boxes, 0.5, use_numba)

    return f"greedy nms  {m} boxes", run


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    if a is None:
        return b is None
    return np.allclose(a, b, rtol=1e-5, atol=1e-5)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    cases = [conv_case(2, 32, 32, 3, 1), conv_case(2, 32, 64, 3, 2), conv_case(2, 16, 128, 5, 1),
             conv_case(2, 32, 32, 1, 1), nms_case(300), nms_case(1000)]
    print(f"{'kernel':<44} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}")
    for name, run in cases:
        assert agree(run(False), run(True)), f"{name}: paths disagree"
        t_np = best_of(lambda: run(False), args.repeat)
        t_nb = best_of(lambda: run(True), args.repeat)
        print(f"{name:<44} {1e3 * t_np:9.2f} {1e3 * t_nb:9.2f} {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
