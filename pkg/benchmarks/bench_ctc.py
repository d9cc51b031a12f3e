"""Time the CTC forward-backward kernel: compiled extension vs numpy fallback.

    python3 benchmarks/bench_ctc.py [--repeat N]

Shapes cover a desk-scale utterance (T=20 encoder frames, ~70 classes), a
long one, and a wide-vocabulary case. Both backends are also checked for
agreement on every input.
"""

import argparse
import timeit

import numpy as np

from ctxst import _ctc_py

try:
    from ctxst import _ctc_ext
except ImportError:  # extension not built
    _ctc_ext = None

SHAPES = [(20, 70, 5), (80, 70, 20), (200, 500, 60)]


def inputs(T, C, L, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T, C))
    lp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    labels = rng.integers(1, C, size=L).astype(np.int64)
    return np.ascontiguousarray(lp), labels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ctc_ext is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
    print(f"{'T':>5} {'C':>5} {'L':>4} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for T, C, L in SHAPES:
        lp, labels = inputs(T, C, L)
        n = max(1, int(200 / T))
        py = min(timeit.repeat(lambda: _ctc_py.forward_backward(lp, labels), number=n, repeat=args.repeat)) / n
        if _ctc_ext is None:
            print(f"{T:>5} {C:>5} {L:>4} {py * 1e3:>10.3f} {'-':>10} {'-':>8}")
            continue
        cy = min(timeit.repeat(lambda: _ctc_ext.forward_backward(lp, labels), number=n, repeat=args.repeat)) / n
        a, b = _ctc_py.forward_backward(lp, labels), _ctc_ext.forward_backward(lp, labels)
        assert abs(a[0] - b[0]) < 1e-9 and np.allclose(a[1], b[1], atol=1e-9)
        print(f"{T:>5} {C:>5} {L:>4} {py * 1e3:>10.3f} {cy * 1e3:>10.3f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()
