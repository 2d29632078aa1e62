"""Timing comparison of the numba kernels against the pure-numpy fallback.

Measures the hot row-wise kernels in-process (both backend modules side by
side) and the full training step end to end (one subprocess per backend,
because the backend binds at import). Run from the repo root:

    python benchmarks/bench_backends.py [--repeats 2000] [--batch 16]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mbcdlab.kernels import get_backend

STEP_SNIPPET = """
import os, time
import numpy as np
from mbcdlab import mbcd as A
from mbcdlab import model as M
from mbcdlab.kernels import BACKEND_NAME

mcfg = M.ModelConfig(input_dims=(16, 12, 10), hidden_dims=(20, 20, 20),
                     feature_dims=(8, 8, 8), num_classes=4, init_seed=0)
state = A.init_trainer(mcfg, A.MbcdConfig(learning_rate=1e-3), train_seed=0)
rng = np.random.default_rng(0)
batches = [([rng.normal(size=(BATCH, d)) for d in mcfg.input_dims],
            rng.integers(0, 4, size=BATCH)) for _ in range(64)]
for b in batches[:8]:
    A.train_step(state, b)  # warm the jit cache / allocator
t0 = time.perf_counter()
for _ in range(REPEATS // 64 + 1):
    for b in batches:
        A.train_step(state, b)
n = 64 * (REPEATS // 64 + 1)
dt = (time.perf_counter() - t0) / n
print(f"{BACKEND_NAME} train_step: {dt * 1e3:.3f} ms/step")
"""


def bench_kernels(repeats: int, batch: int) -> None:
    ref = get_backend("numpy")
    jit = get_backend("numba")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, 16))
    g = rng.normal(size=(batch, 16))
    labels = rng.integers(0, 16, size=batch)
    p = ref.softmax_fwd(rng.normal(size=(batch, 16)))
    q = ref.softmax_fwd(rng.normal(size=(batch, 16)))
    flat = rng.normal(size=512)
    cases = {
        "relu_fwd": lambda m: m.relu_fwd(x),
        "softmax_fwd": lambda m: m.softmax_fwd(x),
        "softmax_bwd": lambda m: m.softmax_bwd(p, g),
        "log_softmax_fwd": lambda m: m.log_softmax_fwd(x),
        "layer_norm_fwd": lambda m: m.layer_norm_fwd(x, 1e-5),
        "layer_norm_bwd": lambda m: m.layer_norm_bwd(*m.layer_norm_fwd(x, 1e-5), g),
        "cross_entropy_fwd": lambda m: m.cross_entropy_fwd(x, labels),
        "kl_fwd": lambda m: m.kl_fwd(p, q),
        "max_last_fwd": lambda m: m.max_last_fwd(x),
        "adam_update": lambda m: m.adam_update(flat, flat, flat * 0.1, np.abs(flat) * 0.1,
                                               3, 1e-3, 0.9, 0.999, 1e-8),
    }
    print(f"kernel timings, {repeats} calls each, batch {batch} (matmul stays BLAS in both):")
    print(f"{'kernel':20s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for name, fn in cases.items():
        times = {}
        for label, mod in (("numpy", ref), ("numba", jit)):
            fn(mod)  # warmup / jit compile
            t0 = time.perf_counter()
            for _ in range(repeats):
                fn(mod)
            times[label] = (time.perf_counter() - t0) / repeats
        ratio = times["numpy"] / times["numba"]
        print(f"{name:20s} {times['numpy'] * 1e6:>10.2f}us {times['numba'] * 1e6:>10.2f}us "
              f"{ratio:>8.1f}x")


def bench_train_step(repeats: int, batch: int) -> None:
    print(f"\nfull train step (subprocess per backend, {repeats} steps, batch {batch}):")
    snippet = STEP_SNIPPET.replace("BATCH", str(batch)).replace("REPEATS", str(repeats))
    for backend in ("numpy", "numba"):
        env = dict(os.environ, MBCD_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", snippet], env=env,
                             capture_output=True, text=True)
        if out.returncode != 0:
            print(out.stderr, file=sys.stderr)
            raise SystemExit(f"benchmark subprocess failed for {backend}")
        print("  " + out.stdout.strip())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=2000)
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--steps", type=int, default=256, help="steps for the end-to-end timing")
    args = parser.parse_args()
    bench_kernels(args.repeats, args.batch)
    bench_train_step(args.steps, args.batch)


if __name__ == "__main__":
    main()
