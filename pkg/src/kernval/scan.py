"""Hot inner loop: one permutation's utility trajectory via incremental inversion.

Given the shared train-train block, the query cross block, one-hot labels,
and a permutation, the scan appends one training point at a time, extends
the Cholesky factor of the growing subset matrix (new diagonal entry =
sqrt of the Schur complement), and accumulates the query scores with a
rank-one update per step:

    scores = K_qS K_SS^-1 Y = (K_qS L^-T)(L^-1 Y) = G Z,

so step p adds outer(G[:, p], Z[p]).  Truncation stops the scan once the
utility is within ``tol`` of the full-data utility.

Two equivalent implementations exist: a numba ``@njit`` kernel and a pure
numpy fallback.  Selection order: the ``KERNVAL_BACKEND`` environment
variable (``numba`` or ``numpy``) wins; otherwise numba is used whenever it
imports.  ``benchmarks/bench_scan.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.linalg as sla

BACKEND_ENV = "KERNVAL_BACKEND"

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

# Status codes returned by the kernels (failing step index is status - OFFSET).
OK = 0
_FAIL_OFFSET = 1


def _scan_impl(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor):
    """Reference trajectory scan; the njit twin below mirrors it loop-for-loop.

    Returns (trajectory, truncation_position, status).  status > 0 means the
    Schur complement collapsed at step status-1 and the trajectory is invalid.
    """
    n = perm.shape[0]
    q, n_classes = kqt.shape[0], onehot.shape[1]
    lo = np.zeros((n, n))  # growing lower Cholesky factor
    g = np.zeros((q, n))  # K_qS L^-T
    z = np.zeros((n, n_classes))  # L^-1 Y_S
    scores = np.zeros((q, n_classes))
    traj = np.zeros(n + 1)
    traj[0] = u0
    trunc = n
    for p in range(n):
        j = perm[p]
        d = ktt[j, j] + eps_abs
        if p == 0:
            if d <= floor:
                return traj, 0, _FAIL_OFFSET
            lam = np.sqrt(d)
            g[:, 0] = kqt[:, j] / lam
            z[0] = onehot[j] / lam
            lo[0, 0] = lam
        else:
            b = ktt[perm[:p], j]
            row = sla.solve_triangular(
                lo[:p, :p], b, lower=True, check_finite=False
            )
            schur = d - float(row @ row)
            if schur <= floor:
                return traj, 0, p + _FAIL_OFFSET
            lam = np.sqrt(schur)
            lo[p, :p] = row
            lo[p, p] = lam
            g[:, p] = (kqt[:, j] - g[:, :p] @ row) / lam
            z[p] = (onehot[j] - row @ z[:p]) / lam
        scores += np.outer(g[:, p], z[p])
        pred = np.argmax(scores, axis=1)
        u = float(np.mean(pred == truth))
        traj[p + 1] = u
        if tol > 0.0 and abs(u - u_full) < tol:
            trunc = p + 1
            break
    return traj[: trunc + 1], trunc, OK


def _make_njit_scan():
    @numba.njit(cache=True, nogil=True)
    def scan(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor):
        n = perm.shape[0]
        q = kqt.shape[0]
        n_classes = onehot.shape[1]
        lo = np.zeros((n, n))
        g = np.zeros((q, n))
        z = np.zeros((n, n_classes))
        scores = np.zeros((q, n_classes))
        row = np.zeros(n)
        traj = np.zeros(n + 1)
        traj[0] = u0
        trunc = n
        for p in range(n):
            j = perm[p]
            d = ktt[j, j] + eps_abs
            if p == 0:
                if d <= floor:
                    return traj, 0, _FAIL_OFFSET
                lam = np.sqrt(d)
                for qi in range(q):
                    g[qi, 0] = kqt[qi, j] / lam
                for c in range(n_classes):
                    z[0, c] = onehot[j, c] / lam
                lo[0, 0] = lam
            else:
                rr = 0.0
                for l in range(p):
                    acc = ktt[perm[l], j]
                    for t in range(l):
                        acc -= lo[l, t] * row[t]
                    val = acc / lo[l, l]
                    row[l] = val
                    rr += val * val
                schur = d - rr
                if schur <= floor:
                    return traj, 0, p + _FAIL_OFFSET
                lam = np.sqrt(schur)
                for l in range(p):
                    lo[p, l] = row[l]
                lo[p, p] = lam
                for qi in range(q):
                    acc = kqt[qi, j]
                    for l in range(p):
                        acc -= g[qi, l] * row[l]
                    g[qi, p] = acc / lam
                for c in range(n_classes):
                    acc = onehot[j, c]
                    for l in range(p):
                        acc -= row[l] * z[l, c]
                    z[p, c] = acc / lam
            correct = 0
            for qi in range(q):
                best = 0
                best_score = -np.inf
                for c in range(n_classes):
                    scores[qi, c] += g[qi, p] * z[p, c]
                    if scores[qi, c] > best_score:
                        best_score = scores[qi, c]
                        best = c
                if best == truth[qi]:
                    correct += 1
            u = correct / q
            traj[p + 1] = u
            if tol > 0.0 and abs(u - u_full) < tol:
                trunc = p + 1
                break
        return traj[: trunc + 1], trunc, OK

    return scan


_NJIT_SCAN = None


def scan_permutation_numpy(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor):
    return _scan_impl(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor)


def scan_permutation_numba(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor):
    global _NJIT_SCAN
    if _NJIT_SCAN is None:
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        _NJIT_SCAN = _make_njit_scan()
    return _NJIT_SCAN(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor)


def active_backend() -> str:
    choice = os.environ.get(BACKEND_ENV, "").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        return "numba"
    if choice not in ("", "auto"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', not {choice!r}")
    return "numba" if HAS_NUMBA else "numpy"


def scan_permutation(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor):
    if active_backend() == "numba":
        return scan_permutation_numba(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor)
    return scan_permutation_numpy(ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_abs, floor)
