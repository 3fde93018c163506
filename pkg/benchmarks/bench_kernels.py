"""Compare the numba and numpy kernel paths.

Kernel timings run in-process on desk-sized shapes (batch 32, 17 tokens,
4 heads, width 48). The end-to-end number is one training batch (forward,
backward, AdamW) at t=2, timed in a subprocess per path because the path is
fixed at import by TICL_DISABLE_NUMBA.

    python benchmarks/bench_kernels.py [--repeat 50] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ticl import _kernels

STEP_SNIPPET = r"""
import time, numpy as np
from ticl.continual import ContinualLearner, TrainConfig
from ticl.autodiff import Optimizer, Tape
from ticl.encoder import PRESETS
from ticl import _kernels
rng = np.random.default_rng(0)
learner = ContinualLearner(PRESETS["desk"], seed=0)
learner.begin_step(range(5)); learner.begin_step(range(5, 10))
opt = Optimizer(learner.trainable_parameters(), TrainConfig().optimizer, total_steps=1000)
x = rng.normal(size=(32, 3, 16, 16)).astype(np.float32); y = rng.integers(5, 10, size=32)
def step():
    with Tape() as tape:
        loss = learner.compute_losses(x, y).loss_total
    opt.zero_grad(); tape.backward(loss); opt.step()
step()
times = []
for _ in range({repeat}):
    t = time.perf_counter(); step(); times.append(time.perf_counter() - t)
print(_kernels.active is _kernels.numba_impl, float(np.median(times)))
"""


def kernel_cases(rng):
    d, t, h, b = 48, 17, 4, 32
    x_ln = rng.normal(size=(b * t, d)).astype(np.float32)
    gamma, beta = np.ones(d, np.float32), np.zeros(d, np.float32)
    x_sm = rng.normal(size=(b * h * t, t)).astype(np.float32)
    x_ge = rng.normal(size=(b * t, 4 * d)).astype(np.float32)
    return {
        "layer_norm_fwd": ("layer_norm_fwd", (x_ln, gamma, beta, 1e-5)),
        "softmax_fwd": ("softmax_fwd", (x_sm,)),
        "softmax_bwd": ("softmax_bwd", (x_sm, x_sm)),
        "gelu_fwd": ("gelu_fwd", (x_ge,)),
        "gelu_bwd": ("gelu_bwd", (x_ge, x_ge)),
    }


def bench_kernels(repeat: int) -> list[dict]:
    rows = []
    cases = kernel_cases(np.random.default_rng(0))
    for label, (name, args) in cases.items():
        row = {"kernel": label, "shape": "x".join(map(str, args[0].shape))}
        for path, impl in (("numpy", _kernels.numpy_impl), ("numba", _kernels.numba_impl)):
            if impl is None:
                row[path] = float("nan")
                continue
            fn = getattr(impl, name)
            fn(*args)  # compile / warm up
            row[path] = min(timeit.repeat(lambda: fn(*args), number=5, repeat=repeat)) / 5
        rows.append(row)
    return rows


def bench_step(repeat: int) -> dict:
    out = {}
    for path, flag in (("numpy", "1"), ("numba", "0")):
        env = dict(os.environ, TICL_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.replace("{repeat}", str(repeat))],
                             env=env, capture_output=True, text=True, check=True)
        used_numba, seconds = res.stdout.split()
        out[path] = float(seconds) if (used_numba == "True") == (path == "numba") else float("nan")
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--json", help="write results here as well")
    args = ap.parse_args(argv)

    kernels = bench_kernels(args.repeat)
    print(f"{'kernel':<16}{'shape':>10}{'numpy us':>12}{'numba us':>12}{'speedup':>9}")
    for r in kernels:
        print(f"{r['kernel']:<16}{r['shape']:>10}{1e6 * r['numpy']:>12.1f}{1e6 * r['numba']:>12.1f}"
              f"{r['numpy'] / r['numba']:>8.2f}x")
    step = bench_step(max(3, args.repeat // 5))
    print(f"{'train batch':<16}{'32x3x16x16':>10}{1e3 * step['numpy']:>10.1f}ms{1e3 * step['numba']:>10.1f}ms"
          f"{step['numpy'] / step['numba']:>8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kernels, "train_step": step}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
