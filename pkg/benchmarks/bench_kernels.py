"""Compare the compiled and pure-numpy im2col/col2im kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Times each kernel on MNIST-net-sized tensors, plus one forward/backward pass
of a fuzzy inference layer with each backend swapped in, and checks that both
backends give bitwise identical results.
"""
import argparse
import timeit

import numpy as np

from deepfuzzy import _kernels_py, kernels
from deepfuzzy import tensor as T
from deepfuzzy.layers import fio_forward, init_params
from deepfuzzy.tensor import Tensor

try:
    from deepfuzzy import _kernels as compiled
except ImportError:
    compiled = None

CASES = [
    ("28x28, 1->s3", (128, 1, 28, 28), 3, 1),
    ("14x14, 32->s3", (128, 32, 14, 14), 3, 1),
    ("14x14, 32->s2 r2", (128, 32, 14, 14), 2, 2),
]


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def layer_step(backend, x, params):
    kernels._impl = backend
    for p in params.tensors().values():
        p.grad = None
    T.tsum(fio_forward(x, params)).backward()
    return params.rule_filters.grad.copy()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'case':<22}{'kernel':<8}{'cython ms':>11}{'python ms':>11}{'speedup':>9}  identical")
    for label, shape, k, r in CASES:
        x = rng.normal(size=shape)
        cols = compiled.im2col(x, k, k, r)
        g = rng.normal(size=cols.shape)
        rows = [
            ("im2col", lambda m: m.im2col(x, k, k, r)),
            ("col2im", lambda m: m.col2im(g, shape, k, k, r)),
        ]
        for name, call in rows:
            tc = best(lambda: call(compiled), args.repeat)
            tp = best(lambda: call(_kernels_py), args.repeat)
            same = np.array_equal(call(compiled), call(_kernels_py))
            print(f"{label:<22}{name:<8}{tc * 1e3:>11.2f}{tp * 1e3:>11.2f}{tp / tc:>9.2f}  {same}")

    x = Tensor(rng.random((128, 1, 28, 28)))
    params = init_params(32, 16, 1, 3, rng)
    saved = kernels._impl
    try:
        tc = best(lambda: layer_step(compiled, x, params), args.repeat)
        tp = best(lambda: layer_step(_kernels_py, x, params), args.repeat)
        same = np.array_equal(layer_step(compiled, x, params), layer_step(_kernels_py, x, params))
    finally:
        kernels._impl = saved
    print(f"{'FIO fwd+bwd 128x28x28':<22}{'layer':<8}{tc * 1e3:>11.2f}{tp * 1e3:>11.2f}{tp / tc:>9.2f}  {same}")


if __name__ == "__main__":
    main()
