"""Compare the compiled and numpy convolution kernels.

Runs forward, weight-gradient and input-gradient kernels at a few
training-representative shapes, checks the two backends agree, and
prints a timing table.

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from intrinsic._kernels import numpy_backend

try:
    from intrinsic._kernels import conv_cy
except ImportError:
    conv_cy = None


CASES = [
    # (batch, cin, cout, size, kernel, stride)
    (4, 3, 16, 64, 3, 1),
    (4, 16, 32, 32, 3, 2),
    (4, 32, 64, 16, 3, 2),
    (4, 64, 64, 8, 3, 1),
]


def _time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def run(repeats: int) -> None:
    if conv_cy is None:
        print("compiled backend unavailable; timing numpy only")
    rng = np.random.default_rng(0)
    header = f"{'case':<28}{'op':<12}{'numpy ms':>10}"
    if conv_cy is not None:
        header += f"{'compiled ms':>13}{'speedup':>9}"
    print(header)
    for n, cin, cout, size, k, stride in CASES:
        pad = k // 2
        x = rng.standard_normal((n, cin, size, size))
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        w = rng.standard_normal((cout, cin, k, k))
        out_size = (size + 2 * pad - k) // stride + 1
        gy = rng.standard_normal((n, cout, out_size, out_size))
        label = f"{n}x{cin}->{cout} @{size} s{stride}"
        ops = {
            "forward": lambda b: b.conv2d_forward(xp, w, stride),
            "grad_w": lambda b: b.conv2d_grad_weight(gy, xp, stride, k, k),
            "grad_x": lambda b: b.conv2d_grad_input_padded(
                gy, w, stride, xp.shape[2], xp.shape[3]
            ),
        }
        for op_name, op in ops.items():
            t_np = _time(lambda: op(numpy_backend), repeats)
            row = f"{label:<28}{op_name:<12}{t_np:>10.2f}"
            if conv_cy is not None:
                ref = op(numpy_backend)
                got = op(conv_cy)
                err = np.abs(np.asarray(got) - ref).max()
                scale = max(np.abs(ref).max(), 1.0)
                if err > 1e-10 * scale:
                    raise AssertionError(
                        f"backend mismatch on {label} {op_name}: {err}"
                    )
                t_cy = _time(lambda: op(conv_cy), repeats)
                row += f"{t_cy:>13.2f}{t_np / t_cy:>9.2f}"
            print(row)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repetitions per case (best is kept)")
    args = parser.parse_args()
    run(args.repeats)


if __name__ == "__main__":
    main()
