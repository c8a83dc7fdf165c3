"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints best-of-N wall time per kernel for each backend and checks that the
outputs agree bit for bit.
"""

import argparse
import timeit

import numpy as np

from freeadv.kernels import _pykernels

try:
    from freeadv.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    x = rng.random((50, 16, 26, 26)).astype(np.float32)  # second conv layer of the MNIST net, one batch
    cols = _pykernels.im2col(x, 3, 3, 1)
    feat = rng.random((50, 32, 24, 24)).astype(np.float32)
    out, arg = _pykernels.maxpool_forward(feat, 2, 2)
    g = rng.random(out.shape).astype(np.float32)
    return {
        "im2col 50x16x26x26 k3": lambda k: k.im2col(x, 3, 3, 1),
        "col2im 50x16x26x26 k3": lambda k: k.col2im(cols, x.shape, 3, 3, 1),
        "maxpool fwd 50x32x24x24 p2": lambda k: k.maxpool_forward(feat, 2, 2),
        "maxpool bwd 50x32x24x24 p2": lambda k: k.maxpool_backward(g, arg, feat.shape),
    }


def _parts(out):
    return out if isinstance(out, tuple) else (out,)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':30s}" + "".join(f"{name:>12s}" for name in backends) + "   speedup  identical")
    for label, fn in cases(np.random.default_rng(0)).items():
        times = {n: min(timeit.repeat(lambda k=k: fn(k), number=1, repeat=args.repeat)) for n, k in backends.items()}
        outs = [fn(k) for k in backends.values()]
        same = all(all(np.array_equal(a, b) for a, b in zip(_parts(o), _parts(outs[0]))) for o in outs[1:])
        speed = f"{times['python'] / times['cython']:8.2f}x" if "cython" in times else "       -"
        print(f"{label:30s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times.values()) + f"  {speed}  {same}")


if __name__ == "__main__":
    main()
