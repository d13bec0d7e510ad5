"""Compare the compiled and numpy kernel backends on detector-sized shapes.

    python benchmarks/bench_kernels.py [--reps 20] [--json out.json]

Reports median milliseconds per call for im2col, col2im, maxpool forward and
backward, plus one full nano-desk training step per backend.
"""

import argparse
import json
import statistics
import time

import numpy as np

from yoloam.tensor import _kernels_py, kernels

try:
    from yoloam.tensor import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

SHAPES = [
    # (n, c, h, w, k, stride)
    (16, 16, 82, 82, 3, 1),
    (16, 32, 42, 42, 3, 1),
    (16, 32, 81, 81, 3, 2),
    (16, 64, 22, 22, 3, 1),
    (16, 32, 28, 28, 7, 1),
]


def median_ms(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_impl(impl, reps):
    rng = np.random.default_rng(0)
    out = {}
    for n, c, hp, wp, k, s in SHAPES:
        xp = rng.standard_normal((n, c, hp, wp)).astype(np.float32)
        oh, ow = (hp - k) // s + 1, (wp - k) // s + 1
        cols = impl.im2col(xp, k, k, s, s, oh, ow)
        tag = f"{n}x{c}x{hp}x{wp} k{k} s{s}"
        out[f"im2col {tag}"] = median_ms(lambda: impl.im2col(xp, k, k, s, s, oh, ow), reps)
        out[f"col2im {tag}"] = median_ms(lambda: impl.col2im(cols, c, hp, wp, k, k, s, s, oh, ow), reps)
    xp = rng.standard_normal((16, 64, 24, 24)).astype(np.float32)
    pooled, arg = impl.maxpool_forward(xp, 5, 1, 20, 20)
    out["maxpool fwd 16x64x24x24 k5"] = median_ms(lambda: impl.maxpool_forward(xp, 5, 1, 20, 20), reps)
    g = np.ones_like(pooled)
    out["maxpool bwd 16x64x24x24 k5"] = median_ms(lambda: impl.maxpool_backward(g, arg, 24, 24, 5, 1), reps)
    return out


def bench_train_step(backend, reps):
    from yoloam.data import collate, synth_shapes
    from yoloam.detector import ModelConfig, build
    from yoloam.train import SGD, TrainConfig, train_step

    kernels.use(backend)
    model = build(ModelConfig("nano-desk", num_classes=2, input_size=160), seed=0)
    opt = SGD(model.named_parameters(), 1e-3)
    images, gts = collate(synth_shapes(1, 16, 2))
    weights = TrainConfig().loss
    return median_ms(lambda: train_step(model, opt, images, gts, weights), max(2, reps // 5))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args()

    results = {"python": bench_impl(_kernels_py, args.reps)}
    if _compiled is not None:
        results["compiled"] = bench_impl(_compiled, args.reps)
    results["python"]["train step nano-desk b16"] = bench_train_step("python", args.reps)
    if _compiled is not None:
        results["compiled"]["train step nano-desk b16"] = bench_train_step("compiled", args.reps)

    print(f"{'kernel':<40} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for name, py_ms in results["python"].items():
        c_ms = results.get("compiled", {}).get(name)
        if c_ms is None:
            print(f"{name:<40} {py_ms:>10.2f} {'n/a':>12}")
        else:
            print(f"{name:<40} {py_ms:>10.2f} {c_ms:>12.2f} {py_ms / c_ms:>7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
