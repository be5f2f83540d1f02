"""Benchmark the numba kernels against the pure-numpy fallback.

Two views:

  per-kernel   both implementations imported directly and timed on the
               pipeline's hot shapes (conv stacks over walk-sized batches,
               fused diffusion-step arithmetic, activations)
  end-to-end   a small inpainting workload run in a subprocess per backend
               with OCCLUDIFF_BACKEND set, so the dispatch-at-import path
               is exercised exactly as users hit it

Numbers are wall-clock medians; which side wins depends on the machine and
shape (numpy's conv path rides BLAS matmuls and often beats the scalar numba
loops on large batches; the fused elementwise kernels usually go the other
way).  Run:  python3 benchmarks/bench_kernels.py [--repeats N] [--quick]
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from occludiff.kernels import conv2d_output_hw, _pad_nhwc  # noqa: E402
from occludiff.kernels import numpy_impl  # noqa: E402

try:
    from occludiff.kernels import numba_impl
except ImportError:
    numba_impl = None


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_case(name, make_args, call, repeats):
    args = make_args()
    rows = []
    for label, impl in (("numba", numba_impl), ("numpy", numpy_impl)):
        if impl is None:
            rows.append((label, None))
            continue
        call(impl, args)  # warm-up (jit compile, caches)
        rows.append((label, median_time(lambda: call(impl, args), repeats)))
    t_numba = dict(rows)["numba"]
    t_numpy = dict(rows)["numpy"]
    ratio = "" if t_numba is None else f"{t_numpy / t_numba:6.2f}x"
    tn = "   n/a" if t_numba is None else f"{t_numba * 1e3:8.2f}"
    print(f"{name:34s} numba {tn} ms   numpy {t_numpy * 1e3:8.2f} ms   numpy/numba {ratio}")


def conv_args(b, h, w, cin, cout, stride):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(b, h, w, cin)).astype(np.float32)
    wk = rng.normal(size=(3, 3, cin, cout)).astype(np.float32)
    bias = rng.normal(size=cout).astype(np.float32)
    ho, wo = conv2d_output_hw(h, w, 3, 3, stride, 1)
    xp = np.ascontiguousarray(_pad_nhwc(x, 1))
    dout = rng.normal(size=(b, ho, wo, cout)).astype(np.float32)
    return xp, wk, bias, stride, ho, wo, dout


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7, help="timed repeats per case")
    ap.add_argument("--quick", action="store_true", help="smaller shapes, skip end-to-end")
    args = ap.parse_args()

    if numba_impl is None:
        print("numba not importable; benchmarking the numpy path only\n")

    b = 48 if args.quick else 480  # walk batch: probes x experts
    print(f"per-kernel (batch {b}, median of {args.repeats}):")
    bench_case(
        f"conv2d forward 3x3 {b}x32x32x8",
        lambda: conv_args(b, 32, 32, 8, 8, 1),
        lambda impl, a: impl.conv2d_forward_padded(a[0], a[1], a[2], a[3], a[4], a[5]),
        args.repeats,
    )
    bench_case(
        f"conv2d forward 3x3/s2 {b}x32x32x8",
        lambda: conv_args(b, 32, 32, 8, 8, 2),
        lambda impl, a: impl.conv2d_forward_padded(a[0], a[1], a[2], a[3], a[4], a[5]),
        args.repeats,
    )
    bench_case(
        f"conv2d backward 3x3 {b}x32x32x8",
        lambda: conv_args(b, 32, 32, 8, 8, 1),
        lambda impl, a: impl.conv2d_backward_padded(a[0], a[1], a[6], a[3]),
        args.repeats,
    )

    rng = np.random.default_rng(1)
    imgs = rng.normal(size=(b, 32, 32, 1)).astype(np.float32)
    other = rng.normal(size=(b, 32, 32, 1)).astype(np.float32)
    mask = (rng.uniform(size=(b, 32, 32, 1)) > 0.5).astype(np.float32)
    acts = rng.normal(size=(b, 32, 32, 8)).astype(np.float32)
    sig = 1.0 / (1.0 + np.exp(-acts))
    bench_case(
        f"scale_combine {b}x32x32x1",
        lambda: (0.99, imgs, 0.14, other),
        lambda impl, a: impl.scale_combine(np.float32(a[0]), a[1], np.float32(a[2]), a[3]),
        args.repeats,
    )
    bench_case(
        f"masked_merge {b}x32x32x1",
        lambda: (mask, imgs, other),
        lambda impl, a: impl.masked_merge(a[0], a[1], a[2]),
        args.repeats,
    )
    bench_case(
        f"silu fwd+bwd {b}x32x32x8",
        lambda: (acts, sig),
        lambda impl, a: impl.silu_backward(impl.silu_forward(a[0])[0], a[0], a[1]),
        args.repeats,
    )

    if args.quick:
        return

    print("\nend-to-end (20 probes x 2 experts, 16x16, T=10, r=2):")
    driver = (
        "import time; import numpy as np\n"
        "from occludiff.config import default_config\n"
        "from occludiff.pipeline import build_session, build_bundles\n"
        "from occludiff.backend import active_backend\n"
        "cfg = default_config(); cfg.seed = 3; cfg.n_experts = 2\n"
        "cfg.data.n_identities = 5; cfg.data.images_per_identity = 5\n"
        "cfg.data.height = cfg.data.width = 16; cfg.data.gallery_fraction = 0.8\n"
        "cfg.schedule.T = 10; cfg.repaint.r = 2; cfg.repaint.j = 5\n"
        "cfg.train_denoiser.epochs = 3; cfg.train_embedder.epochs = 3\n"
        "sess = build_session(cfg)\n"
        "build_bundles(sess, sess.probe_ds.images[:2], sess.probe_ds.labels[:2], 'eval')\n"
        "t0 = time.perf_counter()\n"
        "build_bundles(sess, np.repeat(sess.probe_ds.images, 4, 0),"
        " np.repeat(sess.probe_ds.labels, 4, 0), 'eval')\n"
        "print(f'{active_backend()}: {time.perf_counter() - t0:.2f}s')\n"
    )
    backends = ["numpy"] if numba_impl is None else ["numba", "numpy"]
    for backend in backends:
        env = dict(os.environ, OCCLUDIFF_BACKEND=backend)
        env["PYTHONPATH"] = os.path.join(os.path.dirname(__file__), "..", "src")
        subprocess.run([sys.executable, "-c", driver], env=env, check=True)


if __name__ == "__main__":
    main()
