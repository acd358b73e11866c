"""Compare the compiled and numpy kernel backends.

Times the MLP forward pass, the backward pass and the Adam update on the
network shapes the package actually trains, then one end-to-end
forward-model epoch per backend (in a subprocess, since the backend is
chosen at import).

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cyclealign import kernels

SHAPES = {
    "G (8-256-64-32-4)": (8, 256, 64, 32, 4),
    "F (6-64-128-32-4)": (6, 64, 128, 32, 4),
    "H (12-32-64-128-32-3)": (12, 32, 64, 128, 32, 3),
    "D (4-32-64-128-32-1)": (4, 32, 64, 128, 32, 1),
}
BATCH = 32

EPOCH_SNIPPET = """
import time
from cyclealign import data, envs, kernels
from cyclealign import forward_model as fm
ds = data.collect(envs.damped_integrators(2), "random", 250, 20, seed=0)
t = time.perf_counter()
fm.train_forward(ds, fm.ForwardConfig(epochs=1))
print(kernels.BACKEND, time.perf_counter() - t)
"""


def _net(rng, sizes):
    Ws = [rng.normal(size=(o, i)) / np.sqrt(i) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(size=o) for o in sizes[1:]]
    return Ws, bs


def _time(fn, repeats):
    # best of five batches, reported per call in microseconds
    return min(timeit.repeat(fn, number=repeats, repeat=5)) / repeats * 1e6


def bench_layers(repeats):
    rng = np.random.default_rng(0)
    backends = {name: kernels.load_backend(name) for name in ("cython", "python")}
    print(f"{'network':<24}{'op':<10}{'cython us':>12}{'python us':>12}{'speedup':>9}")
    for label, sizes in SHAPES.items():
        Ws, bs = _net(rng, sizes)
        x = rng.normal(size=(BATCH, sizes[0]))
        g = rng.normal(size=(BATCH, sizes[-1]))
        row = {}
        for name, be in backends.items():
            acts = be.mlp_forward(x, Ws, bs, kernels.RELU, kernels.LINEAR)
            row[name] = (
                _time(lambda: be.mlp_forward(x, Ws, bs, kernels.RELU, kernels.LINEAR), repeats),
                _time(lambda: be.mlp_backward(x, Ws, acts, g, kernels.RELU, kernels.LINEAR, True, True), repeats),
            )
        for i, op in enumerate(("forward", "backward")):
            c, p = row["cython"][i], row["python"][i]
            print(f"{label:<24}{op:<10}{c:>12.1f}{p:>12.1f}{p / c:>8.2f}x")


def bench_adam(repeats):
    rng = np.random.default_rng(1)
    sizes = SHAPES["G (8-256-64-32-4)"]
    Ws, bs = _net(rng, sizes)
    for name in ("cython", "python"):
        be = kernels.load_backend(name)
        state = [(a.reshape(-1), rng.normal(size=a.size), np.zeros(a.size), np.zeros(a.size)) for a in Ws + bs]

        def step():
            for p, g, m, v in state:
                be.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1)

        print(f"adam over G's parameters, {name}: {_time(step, repeats):.1f} us")


def bench_epoch():
    for name in ("cython", "python"):
        env = dict(os.environ, CYCLEALIGN_KERNELS=name)
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True,
                             check=True)
        backend, seconds = out.stdout.split()
        print(f"forward-model epoch (5k triples), {backend}: {float(seconds):.2f} s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()
    bench_layers(args.repeats)
    bench_adam(args.repeats)
    bench_epoch()


if __name__ == "__main__":
    main()
