"""Compare the compiled convolution kernels against the numpy fallback.

Two views: microbenchmarks of the 3x3 kernels on the desk network's layer
shapes, and a whole-network forward/backward step.  The kernel section
times both implementations in one process; the network section re-executes
this script under each SHIFTSCAN_BACKEND value because the backend is
chosen once at import time.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

# desk network layer geometry: (cin, cout, h, w, batch, stride)
DESK_SHAPES = [
    ("stem 3->16 32x32", (3, 16, 32, 32, 128, 1)),
    ("stage1 16->16 32x32", (16, 16, 32, 32, 128, 1)),
    ("stage2 16->32 /2", (16, 32, 32, 32, 128, 2)),
    ("stage2 32->32 16x16", (32, 32, 16, 16, 128, 1)),
    ("stage3 32->64 /2", (32, 64, 16, 16, 128, 2)),
    ("stage3 64->64 8x8", (64, 64, 8, 8, 128, 1)),
]


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_kernels(repeat):
    from shiftscan.backends import numpy_backend
    try:
        from shiftscan.backends import _ckernels as ck
    except ImportError:
        ck = None
        print("compiled backend not built; kernel table shows numpy only")
    rng = np.random.default_rng(0)
    print(f"{'layer':24} {'dir':3} {'numpy ms':>9} {'compiled ms':>12} "
          f"{'speedup':>8}")
    for name, (cin, cout, h, w, n, stride) in DESK_SHAPES:
        xp = rng.standard_normal((cin, h + 2, w + 2, n)).astype(np.float32)
        wgt = rng.standard_normal((cout, cin, 3, 3)).astype(np.float32)
        bias = rng.standard_normal(cout).astype(np.float32)
        ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
        gy = rng.standard_normal((cout, ho, wo, n)).astype(np.float32)

        t_np = timeit(lambda: numpy_backend.conv3x3_fw(xp, wgt, bias, stride),
                      repeat)
        t_ck = timeit(lambda: ck.conv3x3_fw(xp, wgt, bias, stride),
                      repeat) if ck else None
        row = f"{name:24} fw  {t_np:9.2f}"
        row += f" {t_ck:12.2f} {t_np / t_ck:7.2f}x" if ck else ""
        print(row)

        t_np = timeit(lambda: numpy_backend.conv3x3_dw(xp, gy, stride),
                      repeat)
        t_ck = timeit(lambda: ck.conv3x3_dw(xp, gy, stride),
                      repeat) if ck else None
        row = f"{name:24} dw  {t_np:9.2f}"
        row += f" {t_ck:12.2f} {t_np / t_ck:7.2f}x" if ck else ""
        print(row)


def bench_net(repeat):
    from shiftscan import backends, data, nets
    ds = data.synth_dataset(0, 13, 10, 32)
    images, labels = ds.images[:128], ds.labels[:128]
    model = nets.build_model(nets.ArchSpec(), seed=0)
    fwd = lambda: nets.predict_probs(model, images)
    step = lambda: nets.loss_and_grads(model, images, labels)
    fwd()  # warm
    t_f = timeit(fwd, repeat)
    t_s = timeit(step, repeat)
    print(f"backend={backends.BACKEND:7} forward(128) {t_f:7.1f} ms   "
          f"loss+grads(128) {t_s:7.1f} ms")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--net-only", action="store_true",
                    help="internal: time the whole net with the active "
                         "backend and exit")
    args = ap.parse_args()
    if args.net_only:
        bench_net(args.repeat)
        return
    bench_kernels(args.repeat)
    print()
    for backend in ("cython", "numpy"):
        env = dict(os.environ, SHIFTSCAN_BACKEND=backend)
        r = subprocess.run([sys.executable, os.path.abspath(__file__),
                            "--net-only", "--repeat", str(args.repeat)],
                           env=env, capture_output=True, text=True)
        out = r.stdout.strip() or r.stderr.strip().splitlines()[-1]
        print(out)


if __name__ == "__main__":
    main()
