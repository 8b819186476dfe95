"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Kernel rows time each windowed kernel on shapes taken from the reference
CIFAR-10 model at batch 16.  The ``train_step`` rows run one forward/backward
pass of the desk-scale model in a subprocess per backend, so the backend is
chosen at import exactly as in normal use.
"""
import argparse
import csv
import os
import subprocess
import sys
import timeit

import numpy as np

from pdrcaps import kernels

STEP_SNIPPET = """
import time, numpy as np
from pdrcaps import kernels
from pdrcaps.model import build_model, small_synthetic
model = build_model(small_synthetic(image_size=32, width=32), seed=0)
rng = np.random.default_rng(0)
x = rng.uniform(size=(32, 1, 32, 32)); y = rng.integers(0, 10, size=32)
model.loss_and_grad(x, y)
best = float("inf")
for _ in range({repeat}):
    model.zero_grad(); t0 = time.perf_counter(); model.loss_and_grad(x, y)
    best = min(best, time.perf_counter() - t0)
print(kernels.BACKEND, best)
"""


def kernel_cases(batch=16):
    rng = np.random.default_rng(0)
    # stem conv input, first branch depthwise input, deepest branch depthwise input
    stem = rng.normal(size=(batch, 64, 30, 30))
    mid = rng.normal(size=(batch, 128, 16, 16))
    deep = rng.normal(size=(batch, 128, 10, 10))
    w = rng.normal(size=(128, 3, 3))
    cols = np.ascontiguousarray(rng.normal(size=(batch * 28 * 28, 64 * 9)))
    g_mid = rng.normal(size=(batch, 128, 14, 14))
    return [
        ("im2col 64x30x30 f3", "im2col", (stem, 3, 1)),
        ("col2im 64x30x30 f3", "col2im", (cols, stem.shape, 3, 1)),
        ("depthwise_forward 128x16x16", "depthwise_forward", (mid, w, 1)),
        ("depthwise_forward 128x10x10 s2", "depthwise_forward", (deep, w, 2)),
        ("depthwise_backward 128x16x16", "depthwise_backward", (mid, w, g_mid, 1)),
    ]


def time_call(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def train_step(pure, repeat):
    env = dict(os.environ, PDRCAPS_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--csv")
    p.add_argument("--skip-step", action="store_true", help="kernel rows only")
    args = p.parse_args(argv)

    if kernels.compiled_backend is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rows = []
    for label, name, case in kernel_cases(args.batch):
        t_py = time_call(getattr(kernels.python_backend, name), case, args.repeat)
        t_c = time_call(getattr(kernels.compiled_backend, name), case, args.repeat)
        rows.append((label, t_py, t_c))
    if not args.skip_step:
        _, t_py = train_step(True, args.repeat)
        backend, t_c = train_step(False, args.repeat)
        assert backend == "compiled"
        rows.append(("train_step pdr-small 32x32 batch 32", t_py, t_c))

    print(f"{'case':<38}{'python ms':>12}{'compiled ms':>13}{'speedup':>10}")
    for label, t_py, t_c in rows:
        print(f"{label:<38}{t_py * 1e3:>12.2f}{t_c * 1e3:>13.2f}{t_py / t_c:>9.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "python_s", "compiled_s", "speedup"])
            w.writerows([label, repr(a), repr(b), repr(a / b)] for label, a, b in rows)


if __name__ == "__main__":
    main()
