"""Time the numba kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the desk reference run (batch 16, d=32, 4x5 token grid) plus the
patch-embedding conv and a full-sized attention map.
"""

import argparse
import time

import numpy as np

from ftacl import _kernels
from ftacl.encoder import build_fta_mask
from ftacl.tokenizer import TokenGrid


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    patch_x = rng.standard_normal((16, 1, 46, 56))
    patch_w = rng.standard_normal((32, 1, 16, 16))
    patch_g = rng.standard_normal((16, 32, 4, 5))
    ad_x = rng.standard_normal((16, 16, 4, 5))
    ad_w = rng.standard_normal((16, 16, 3, 3))
    ad_g = rng.standard_normal((16, 16, 4, 5))
    desk_mask = build_fta_mask(TokenGrid(4, 5)).allow
    desk_s = rng.standard_normal((16, 1, 21, 21))
    full_mask = build_fta_mask(TokenGrid(12, 9)).allow
    full_s = rng.standard_normal((1, 12, 109, 109))
    full_y = _kernels.masked_softmax_fwd(full_s, full_mask)
    return {
        "conv2d fwd patch-embed 16x1x46x56 k16 s10": lambda: _kernels.conv2d_fwd(patch_x, patch_w, 10, 0),
        "conv2d bwd patch-embed": lambda: _kernels.conv2d_bwd(patch_x, patch_w, patch_g, 10, 0),
        "conv2d fwd adapter 16x16x4x5 k3 p1": lambda: _kernels.conv2d_fwd(ad_x, ad_w, 1, 1),
        "conv2d bwd adapter": lambda: _kernels.conv2d_bwd(ad_x, ad_w, ad_g, 1, 1),
        "masked softmax fwd desk 16x21x21": lambda: _kernels.masked_softmax_fwd(desk_s, desk_mask),
        "masked softmax fwd full 12x109x109": lambda: _kernels.masked_softmax_fwd(full_s, full_mask),
        "masked softmax bwd full": lambda: _kernels.masked_softmax_bwd(full_y, full_s),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    prev = _kernels.USE_NUMBA
    rng = np.random.default_rng(0)
    table = cases(rng)
    print(f"{'kernel':<44} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    try:
        for name, fn in table.items():
            _kernels.set_backend(True)
            ref = fn()
            t_nb = best_of(fn, args.repeat)
            _kernels.set_backend(False)
            out = fn()
            t_np = best_of(fn, args.repeat)
            for a, b in zip(ref if isinstance(ref, tuple) else (ref,), out if isinstance(out, tuple) else (out,)):
                np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)
            print(f"{name:<44} {1e3 * t_nb:>10.3f} {1e3 * t_np:>10.3f} {t_np / t_nb:>7.2f}x")
    finally:
        _kernels.USE_NUMBA = prev


if __name__ == "__main__":
    main()
