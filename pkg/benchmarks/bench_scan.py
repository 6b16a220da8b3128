"""Compare the numba and numpy permutation-scan kernels.

Usage: python benchmarks/bench_scan.py [n_train] [n_test] [iters]

Times a batch of full (untruncated) permutation scans on a synthetic rbf
benchmark with both backends, checks that the resulting score tables agree,
and reports the speedup.  ``KERNVAL_BACKEND`` is ignored here; both paths
run explicitly.
"""

import sys
import time

import numpy as np

from kernval import ValuationContext, make_benchmark
from kernval.regression import JITTER_FLOOR
from kernval.scan import HAS_NUMBA, scan_permutation_numba, scan_permutation_numpy
from kernval.shapley import permutation_for


def run(scan, ktt, kqt, onehot, truth, perms):
    scale = float(np.mean(np.diag(ktt)))
    floor = JITTER_FLOOR * scale
    total = np.zeros(ktt.shape[0])
    for perm in perms:
        traj, trunc, status = scan(ktt, kqt, onehot, truth, perm, 0.5, 0.0, 0.0, 0.0, floor)
        assert status == 0
        total[perm[:trunc]] += np.diff(traj)
    return total / len(perms)


def main(argv):
    n = int(argv[1]) if len(argv) > 1 else 300
    m = int(argv[2]) if len(argv) > 2 else 150
    iters = int(argv[3]) if len(argv) > 3 else 50

    train, test, store = make_benchmark(n, m, seed=0)
    ctx = ValuationContext(train, test, store)
    block = store.shared_block()
    ktt, kqt = block[:n], block[n:]
    onehot = ctx.one_hot().matrix
    truth = np.asarray(test.labels, dtype=np.int64)
    perms = [permutation_for(0, t, n) for t in range(iters)]

    t0 = time.perf_counter()
    scores_np = run(scan_permutation_numpy, ktt, kqt, onehot, truth, perms)
    t_numpy = time.perf_counter() - t0
    print(f"numpy : {iters} scans of n={n}, q={m} in {t_numpy:.3f}s")

    if not HAS_NUMBA:
        print("numba : unavailable (install numba to compare)")
        return 0

    run(scan_permutation_numba, ktt, kqt, onehot, truth, perms[:1])  # compile
    t0 = time.perf_counter()
    scores_nb = run(scan_permutation_numba, ktt, kqt, onehot, truth, perms)
    t_numba = time.perf_counter() - t0
    print(f"numba : {iters} scans of n={n}, q={m} in {t_numba:.3f}s (warm)")

    diff = float(np.max(np.abs(scores_np - scores_nb)))
    print(f"max |score difference| = {diff:.3e}")
    assert diff < 1e-10, "backends disagree"
    print(f"speedup: {t_numpy / t_numba:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
