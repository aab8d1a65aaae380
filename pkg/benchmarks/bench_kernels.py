"""Time each hot kernel under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeats 20]

The numba column excludes compilation: each kernel is called once before
timing. The last column is the numpy/numba time ratio.
"""

import argparse
import time

import numpy as np

from siammcvae import kernels


def cases(rng):
    # shapes as they occur in a batch-16 step of the default model
    x = rng.standard_normal((16 * 65, 384))
    ln = rng.standard_normal((16 * 65, 96))
    gain, bias = rng.standard_normal(96), rng.standard_normal(96)
    q, k, v = (rng.standard_normal((64, 256, 24)) for _ in range(3))
    g = rng.standard_normal(q.shape)
    img = rng.uniform(0, 255, (64, 64))
    w = np.exp(-0.5 * ((np.arange(11) - 5) / 1.5) ** 2)
    w /= w.sum()

    def attn_bwd():
        out, lse = kernels.chunked_attention_forward(q, k, v, 64)
        return kernels.chunked_attention_backward(q, k, v, out, lse, g, 64)

    def ln_bwd():
        _, xhat, rstd = kernels.layernorm_forward(ln, gain, bias, 1e-5)
        return kernels.layernorm_backward(ln, xhat, rstd, gain)

    return {
        "gelu_forward (1040x384)": lambda: kernels.gelu_forward(x),
        "gelu_backward (1040x384)": lambda: kernels.gelu_backward(x, x),
        "layernorm fwd (1040x96)": lambda: kernels.layernorm_forward(ln, gain, bias, 1e-5),
        "layernorm fwd+bwd (1040x96)": ln_bwd,
        "chunked attn fwd (64x256x24)": lambda: kernels.chunked_attention_forward(q, k, v, 64),
        "chunked attn fwd+bwd": attn_bwd,
        "ssim filter (64x64, 11 taps)": lambda: kernels.filter_valid(img, w),
    }


def timeit(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    rng = np.random.default_rng(0)
    table = {}
    start = kernels.BACKEND
    try:
        for b in backends:
            kernels.use_backend(b)
            for name, fn in cases(rng).items():
                table.setdefault(name, {})[b] = timeit(fn, args.repeats)
    finally:
        kernels.use_backend(start)
    print(f"{'kernel':32s}" + "".join(f"{b + ' (ms)':>14s}" for b in backends) + f"{'ratio':>9s}")
    for name, row in table.items():
        cells = "".join(f"{row[b] * 1e3:14.3f}" for b in backends)
        ratio = f"{row['numpy'] / row['numba']:9.2f}" if "numba" in row else ""
        print(f"{name:32s}{cells}{ratio}")


if __name__ == "__main__":
    main()
