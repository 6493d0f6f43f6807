"""Time one training step (forward + backward) per kernel backend.

Usage: python3 benchmarks/bench_kernels.py [--batches 8,64,256,1024]
       [--repeats 5] [--layers 10]

The timed region is exactly what the trainer runs per step: a cached
batched forward pass through every layer plus the full parameter
gradient.  When the compiled extension is not built, only the numpy
rows are printed.
"""

import argparse
import time

import numpy as np

from pdunfold import _kernels
from pdunfold.backprop import network_backward
from pdunfold.linops import CirculantOp, uniform_kernel
from pdunfold.network import (FeatureDesign, LayerParams, NetworkParams,
                              build_feature_operator, network_forward)

DESIGN = "f5s2n30+f7s3n30+f10s10n30"


def build_network(layers, patch_side, seed=0):
    rng = np.random.default_rng(seed)
    op = CirculantOp(uniform_kernel(3), (patch_side, patch_side))
    design = FeatureDesign.from_string(DESIGN, patch_side)
    params = []
    for _ in range(layers):
        L, mask = build_feature_operator(design, rng)
        norm = np.linalg.norm(L, 2)
        params.append(LayerParams(0.7 / norm, 0.7 / norm, L, mask))
    return NetworkParams(params, op, design)


def time_step(net, z, x_true, repeats):
    def step():
        x_hat, caches = network_forward(net, z)
        network_backward(net, caches, z, x_true)

    step()  # warm up caches, BLAS thread pools
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        step()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batches", default="8,64,256,1024")
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--layers", type=int, default=10)
    parser.add_argument("--patch-side", type=int, default=10)
    args = parser.parse_args()

    batches = [int(b) for b in args.batches.split(",")]
    backends = _kernels.available_backends()
    if "compiled" not in backends:
        print("note: compiled extension not built, timing numpy only")

    net = build_network(args.layers, args.patch_side)
    rng = np.random.default_rng(1)
    print("%d layers, %d analysis rows, %dx%d patches, best of %d runs"
          % (args.layers, net.P, args.patch_side, args.patch_side,
             args.repeats))
    header = "%8s" % "batch" + "".join("%14s" % ("%s ms" % b) for b in backends)
    if len(backends) > 1:
        header += "%10s" % "speedup"
    print(header)

    for batch in batches:
        z = rng.uniform(0, 30, size=(batch, net.N))
        x_true = rng.uniform(0, 30, size=(batch, net.N))
        times = []
        for name in backends:
            _kernels.set_backend(name)
            times.append(time_step(net, z, x_true, args.repeats))
        _kernels.set_backend("auto")
        row = "%8d" % batch + "".join("%14.2f" % (t * 1e3) for t in times)
        if len(times) > 1:
            row += "%9.2fx" % (times[0] / times[1])
        print(row)


if __name__ == "__main__":
    main()
