"""Time the conv3d kernels of every available backend on training-shaped inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from volformer import kernels

# (name, padded input [C,H,W,D], weight [O,C,k,k,k], stride)
SHAPES = [
    ("shallow 3x3x3, 1->12, 34^3", (1, 34, 34, 34), (12, 1, 3, 3, 3), (1, 1, 1)),
    ("recon 3x3x3, 12->12, 34^3", (12, 34, 34, 34), (12, 12, 3, 3, 3), (1, 1, 1)),
    ("rstb 3x3x3, 12->12, 18^3", (12, 18, 18, 18), (12, 12, 3, 3, 3), (1, 1, 1)),
    ("embed 2x2x2/2, 12->12, 32^3", (12, 32, 32, 32), (12, 12, 2, 2, 2), (2, 2, 2)),
    ("recon 3x3x3, 48->48, 18^3", (48, 18, 18, 18), (48, 48, 3, 3, 3), (1, 1, 1)),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = parser.parse_args()
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}; dtype {args.dtype}; best of {args.repeat}")
    print(f"{'case':<30} {'op':<8} " + " ".join(f"{b:>10}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, xshape, wshape, stride in SHAPES:
        xp = rng.standard_normal(xshape).astype(args.dtype)
        w = rng.standard_normal(wshape).astype(args.dtype)
        out = kernels.get_backend("python").conv3d_forward(xp, w, stride)
        g = rng.standard_normal(out.shape).astype(args.dtype)
        ops = {
            "fwd": lambda m: m.conv3d_forward(xp, w, stride),
            "bwd_in": lambda m: m.conv3d_backward_input(g, w, stride, xp.shape),
            "bwd_w": lambda m: m.conv3d_backward_weight(xp, g, wshape[2:], stride),
        }
        for op, fn in ops.items():
            secs = [best_of(lambda: fn(kernels.get_backend(b)), args.repeat) for b in backends]
            row = f"{name:<30} {op:<8} " + " ".join(f"{s * 1e3:>8.2f}ms" for s in secs)
            if len(secs) > 1:
                row += f"   {secs[0] / secs[1]:>6.2f}x"
            print(row)


if __name__ == "__main__":
    main()
