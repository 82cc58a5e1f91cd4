"""Compare the compiled im2col/col2im kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Also times one conv2d forward+backward at the backbone's first-layer shape
with each backend swapped in. Reports the median of N runs in milliseconds.
"""

import argparse
import statistics
import time

import numpy as np

from polyformer import _kernels_py, kernels
from polyformer.engine import Tensor, backward, ops

try:
    from polyformer import _kernels as _compiled
except ImportError:
    _compiled = None

SHAPES = [
    ("backbone inc (4x3x64x64, k3)", (4, 3, 64, 64), 3, 1, 1),
    ("backbone up (4x24x64x64, k3)", (4, 24, 64, 64), 3, 1, 1),
    ("discriminator (8x8x64x64, k3 s2)", (8, 8, 64, 64), 3, 2, 1),
]


def timed(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def conv_step(x, w):
    xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    backward(ops.sum(ops.conv2d(xt, wt, None, stride=1, pad=1)))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = [("numpy", _kernels_py)] + ([("compiled", _compiled)] if _compiled else [])
    print(f"selected backend at import: {kernels.BACKEND}")
    rng = np.random.default_rng(0)
    header = f"{'case':<40}" + "".join(f"{name:>12}" for name, _ in backends) + ("   speedup" if _compiled else "")
    print(header)
    for label, shape, k, stride, pad in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        cols = _kernels_py.im2col(x, k, stride, pad)
        for op in ("im2col", "col2im"):
            times = []
            for _, mod in backends:
                if op == "im2col":
                    times.append(timed(lambda: mod.im2col(x, k, stride, pad), args.repeat))
                else:
                    times.append(timed(lambda: mod.col2im(cols, shape, k, stride, pad), args.repeat))
            row = f"{op + ' ' + label:<40}" + "".join(f"{t:12.2f}" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:9.1f}x"
            print(row)
    x = rng.standard_normal((4, 8, 64, 64)).astype(np.float32)
    w = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
    times = []
    saved = (kernels.im2col, kernels.col2im)
    try:
        for _, mod in backends:
            kernels.im2col, kernels.col2im = mod.im2col, mod.col2im
            times.append(timed(lambda: conv_step(x, w), args.repeat))
    finally:
        kernels.im2col, kernels.col2im = saved
    row = f"{'conv2d fwd+bwd 4x8x64x64':<40}" + "".join(f"{t:12.2f}" for t in times)
    if len(times) == 2:
        row += f"{times[0] / times[1]:9.1f}x"
    print(row)


if __name__ == "__main__":
    main()
