"""Time the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on identical inputs under both backends; outputs are
checked for equality before timings are reported.
"""

import argparse
import timeit

import numpy as np

from csqa import kernels


def cases(rng):
    xp = rng.normal(size=(16, 32, 34, 34))
    cols = kernels.BACKENDS["python"].im2col(xp, 3, 3, 1, 1)
    boxes = np.sort(rng.uniform(0, 64, size=(300, 2, 2)), axis=1).transpose(0, 2, 1).reshape(300, 4)
    boxes = boxes[:, [0, 2, 1, 3]]
    scores = rng.normal(size=300)
    return {
        "im2col 16x32x34x34 k3": lambda: kernels.im2col(xp, 3, 3, 1, 1),
        "col2im 16x32x34x34 k3": lambda: kernels.col2im(cols, 34, 34, 1, 1),
        "nms 300 boxes": lambda: kernels.nms(boxes, scores, 0.25, -1),
        "nms 300 boxes top4": lambda: kernels.nms(boxes, scores, 0.25, 4),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "compiled" not in kernels.BACKENDS:
        print("compiled extension not built; only the python backend is available")
    previous = kernels.BACKEND
    timings, outputs = {}, {}
    for name in sorted(kernels.BACKENDS):
        kernels.use_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            number = 3
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            timings[label, name] = best
            outputs[label, name] = np.asarray(fn())
    kernels.use_backend(previous)
    print(f"{'kernel':<26}{'python ms':>12}{'compiled ms':>14}{'speed-up':>10}")
    for label in cases(np.random.default_rng(0)):
        py = timings[label, "python"]
        row = f"{label:<26}{py * 1e3:>12.3f}"
        if (label, "compiled") in timings:
            c = timings[label, "compiled"]
            same = np.array_equal(outputs[label, "python"], outputs[label, "compiled"])
            row += f"{c * 1e3:>14.3f}{py / c:>9.1f}x" + ("" if same else "  MISMATCH")
        print(row)


if __name__ == "__main__":
    main()
