"""Compare the compiled and numpy kernels on 512x512 probability maps.

    python benchmarks/bench_kernels.py [--repeats 20]
"""
import argparse
import time

import numpy as np

from dalkseg import kernels
from dalkseg.postprocess import _transitions_from_labels, log_cost, transitions_to_labels


def timeit(fn, repeats):
    fn()
    best = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return 1000 * float(np.median(best))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--size", type=int, default=512)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    probs = rng.dirichlet([0.5, 0.5, 0.5], size=(args.size, args.size))
    cost = log_cost(probs)
    backends = kernels.backends()
    ref = backends["python"].decode_transitions(cost)
    labels = np.ascontiguousarray(transitions_to_labels(*ref, args.size))
    r1, r2 = _transitions_from_labels(labels)

    print(f"{'backend':<10} {'decode_ms':>10} {'confidence_ms':>14}")
    rows = {}
    for name, mod in backends.items():
        out = mod.decode_transitions(cost)
        assert np.array_equal(out[0], ref[0]) and np.array_equal(out[1], ref[1]), name
        d = timeit(lambda: mod.decode_transitions(cost), args.repeats)
        c = timeit(lambda: mod.band_confidence(probs, labels, r1, r2, 8), args.repeats)
        rows[name] = (d, c)
        print(f"{name:<10} {d:>10.3f} {c:>14.3f}")
    if "cython" in rows:
        d0, c0 = rows["python"]
        d1, c1 = rows["cython"]
        print(f"speedup    {d0 / d1:>9.1f}x {c0 / c1:>13.1f}x")
    else:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
