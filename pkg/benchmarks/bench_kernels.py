"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--size 128]

Each row reports the median wall time per call for both backends and the
speedup. The whole-model row swaps the kernel table seen by ``ops`` so the
same model runs end to end on each backend.
"""
import argparse
import contextlib
import statistics
import time

import numpy as np

from segmini import _kernels_py, kernels, lut, model
from segmini.data import from_rgb_bytes

NAMES = ("depthwise_forward", "depthwise_backward", "maxpool_forward", "maxpool_backward",
         "hsv_bins", "lut_lookup", "lut_segment")


def median_ms(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


@contextlib.contextmanager
def numpy_backend():
    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(_kernels_py, n))
    try:
        yield
    finally:
        for n, fn in saved.items():
            setattr(kernels, n, fn)


def cases(size):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 32, size, size)).astype(np.float32)
    w = rng.standard_normal((32, 3, 3)).astype(np.float32)
    g = rng.standard_normal((4, 32, size, size)).astype(np.float32)
    _, idx = _kernels_py.maxpool_forward(x)
    gp = rng.standard_normal((4, 32, size // 2, size // 2)).astype(np.float32)
    rgb = rng.integers(0, 256, (4 * size, 4 * size, 3), dtype=np.uint8)
    image = np.ascontiguousarray(from_rgb_bytes(rgb)[0])
    table = lut.build_lut(lut.parse_thresholds("class 1 field h=90:150 s=0.3:1 v=0.2:1\n")).table
    return {
        "depthwise_forward": lambda m: m.depthwise_forward(x, w, 1, 1),
        "depthwise_backward": lambda m: m.depthwise_backward(x, w, g, 1, 1),
        "maxpool_forward": lambda m: m.maxpool_forward(x),
        "maxpool_backward": lambda m: m.maxpool_backward(gp, idx, x.shape),
        "lut_segment": lambda m: m.lut_segment(image, table),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", type=int, default=128)
    a = ap.parse_args()
    if not kernels.compiled_available():
        raise SystemExit("compiled kernels are not built; reinstall with a C compiler and Cython")
    from segmini import _kernels as compiled

    print(f"{'kernel':<22}{'compiled ms':>12}{'numpy ms':>12}{'speedup':>9}")
    for name, call in cases(a.size).items():
        c = median_ms(lambda: call(compiled), a.repeat)
        p = median_ms(lambda: call(_kernels_py), a.repeat)
        print(f"{name:<22}{c:12.3f}{p:12.3f}{p / c:9.1f}")

    m = model.init_model(model.default_config(2), 0)
    x = np.random.default_rng(1).random((1, 3, a.size, a.size)).astype(np.float32)
    c = median_ms(lambda: model.forward(m, x, "infer"), a.repeat)
    with numpy_backend():
        p = median_ms(lambda: model.forward(m, x, "infer"), a.repeat)
    print(f"{'model forward':<22}{c:12.3f}{p:12.3f}{p / c:9.1f}")


if __name__ == "__main__":
    main()
