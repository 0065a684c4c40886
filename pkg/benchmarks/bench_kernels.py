"""Time the numba and numpy paths of each hot kernel on representative sizes.

    python benchmarks/bench_kernels.py [--repeat N]

Sizes mirror the default configuration: a batch of 8 clips at 32x64x64
gives 8 * 16*16*16 bottom latents of dimension 128 against 1024 codewords.
"""

import argparse
import time

import numpy as np

from msvq import kernels
from msvq.data import cubic_taps
from msvq.metrics import gaussian_window


def timed(fn, repeat):
    fn()  # warm-up, includes numba compilation
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(rng):
    vec = rng.normal(size=(8 * 4096, 128))
    emb = rng.normal(size=(1024, 128))
    idx = rng.integers(0, 1024, size=vec.shape[0])
    planes = rng.uniform(size=(3 * 32, 64, 64))
    window = gaussian_window(11, 1.5)
    src = rng.uniform(size=(3 * 32, 240, 320))
    ri, rw = cubic_taps(240, 64)
    ci, cw = cubic_taps(320, 64)
    return [
        ("nearest_codeword 32768x128 vs 1024", "nearest_codeword", (vec, emb)),
        ("assignment_stats 32768x128, K=1024", "assignment_stats", (vec, idx, 1024)),
        ("filter_valid 96x64x64, 11-tap", "filter_valid", (planes, window)),
        ("resample 96x240x320 -> 64x64", "resample", (src, ri, rw, ci, cw)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<40}{'numba s':>10}{'numpy s':>10}{'speedup':>9}  agree")
    for label, name, inputs in cases(rng):
        t_nb, out_nb = timed(lambda: getattr(kernels, f"{name}_numba")(*inputs), args.repeat)
        t_np, out_np = timed(lambda: getattr(kernels, f"{name}_numpy")(*inputs), args.repeat)
        parts_nb = out_nb if isinstance(out_nb, tuple) else (out_nb,)
        parts_np = out_np if isinstance(out_np, tuple) else (out_np,)
        agree = all(np.allclose(a, b, atol=1e-9) for a, b in zip(parts_nb, parts_np))
        print(f"{label:<40}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>8.2f}x  {agree}")


if __name__ == "__main__":
    main()
