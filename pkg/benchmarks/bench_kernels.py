"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes mirror a tiny-model training step (10 crops x 250 tokens) plus one
44.1 kHz -> 16 kHz resample of a 10 s clip and a 100 x 200 k-NN vote.
"""

import argparse
import json
import time

import numpy as np

from dasheng_mae import kernels
from dasheng_mae._accel import _HAVE_NUMBA
from dasheng_mae.audio import polyphase_filter


def cases(rng):
    x = rng.standard_normal((2500, 64)).astype(np.float32)
    gamma = rng.standard_normal(64).astype(np.float32)
    beta = rng.standard_normal(64).astype(np.float32)
    dy = rng.standard_normal((2500, 64)).astype(np.float32)
    h = rng.standard_normal((2500, 128)).astype(np.float32)
    att = rng.standard_normal((20 * 250, 250)).astype(np.float32)
    _, xhat, rstd = kernels.layernorm_fwd_np(x, gamma, beta, 1e-6)
    y_sm = kernels.softmax_fwd_np(att)
    bank = polyphase_filter(160, 441)
    taps = bank.shape[1]
    wav = np.pad(rng.uniform(-0.5, 0.5, 441000), taps, mode="edge")
    n_out = -(-441000 * 160 // 441)
    sims = rng.standard_normal((100, 200))
    labels = rng.integers(0, 3, 200)
    return {
        "layernorm_fwd": ("layernorm_fwd", (x, gamma, beta, 1e-6)),
        "layernorm_bwd": ("layernorm_bwd", (dy, xhat, rstd, gamma)),
        "gelu_fwd": ("gelu_fwd", (h,)),
        "gelu_bwd": ("gelu_bwd", (h, h)),
        "softmax_fwd": ("softmax_fwd", (att,)),
        "softmax_bwd": ("softmax_bwd", (y_sm, att)),
        "resample_44k1_to_16k": ("resample_poly", (wav, bank, 160, 441, n_out, taps)),
        "knn_vote": ("knn_vote", (sims, labels, 10, 3)),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(u, np.float64) - np.asarray(v, np.float64)))) for u, v in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if not _HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = []
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (base, a) in cases(np.random.default_rng(args.seed)).items():
        f_np = getattr(kernels, f"{base}_np")
        f_nb = getattr(kernels, f"{base}_nb")
        ref, out = f_np(*a), f_nb(*a)  # the second call also triggers compilation
        t_np = best_of(f_np, a, args.repeat)
        t_nb = best_of(f_nb, a, args.repeat)
        row = {
            "kernel": name,
            "numpy_ms": 1e3 * t_np,
            "numba_ms": 1e3 * t_nb,
            "speedup": t_np / t_nb,
            "max_abs_diff": max_diff(ref, out),
        }
        rows.append(row)
        print(f"{name:24s} {row['numpy_ms']:10.3f} {row['numba_ms']:10.3f} {row['speedup']:7.2f}x {row['max_abs_diff']:11.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
