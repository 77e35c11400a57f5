"""Time the compiled and numpy kernel backends on classifier-sized inputs.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time of each backend and the
speed-up of the compiled one.  Outputs of both backends are checked for
agreement before timing.
"""

import argparse
import statistics
import time

import numpy as np

from cnsnet.kernels import available_backends, get_backend


def _cases(rng):
    x = rng.random((16, 32, 25, 25)).astype(np.float32)
    pooled = rng.random((16, 64, 24, 24)).astype(np.float32)
    logits = rng.standard_normal((512, 80)).astype(np.float32)
    cols_shape = get_backend("python").im2col(x, 3, 3, 1, 1).shape
    cols = rng.random(cols_shape).astype(np.float32)
    return {
        "im2col 16x32x25x25 k3": lambda b: b.im2col(x, 3, 3, 1, 1),
        "col2im 16x32x25x25 k3": lambda b: b.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool fwd 16x64x24x24": lambda b: b.maxpool_forward(pooled, 2, 2),
        "maxpool bwd 16x64x24x24": lambda b: b.maxpool_backward(*_pool_grad_args(b, pooled)),
        "softmax 512x80": lambda b: b.softmax_rows(logits),
    }


def _pool_grad_args(backend, x):
    out, arg = backend.maxpool_forward(x, 2, 2)
    return np.ones_like(out), arg, x.shape


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _first(result):
    return result[0] if isinstance(result, tuple) else result


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    backends = {name: get_backend(name) for name in available_backends()}
    if "cython" not in backends:
        print("compiled kernels are not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}" + "".join(f"{name + ' ms':>12}" for name in backends) + f"{'speed-up':>10}")
    for label, fn in _cases(rng).items():
        if "cython" in backends:
            np.testing.assert_allclose(_first(fn(backends["cython"])), _first(fn(backends["python"])),
                                       rtol=1e-5, atol=1e-6)
        ms = {name: 1e3 * _median_time(lambda b=b: fn(b), args.repeat) for name, b in backends.items()}
        ratio = f"{ms['python'] / ms['cython']:.2f}x" if "cython" in ms else "-"
        print(f"{label:<26}" + "".join(f"{v:>12.3f}" for v in ms.values()) + f"{ratio:>10}")


if __name__ == "__main__":
    main()
