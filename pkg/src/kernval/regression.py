"""Kernel regression over precomputed kernel slices.

This is the retraining surrogate: fitting a model on subset S means solving
``K[S,S]^-1 Y_S`` and predicting queries through ``K[q,S]``.  A blockwise
incremental inverse (`RegressionState.extend`) grows that solve one point at
a time so a whole permutation costs O(n^2) per step instead of O(n^3).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dpocon

from .datasets import LabeledDataset, OneHotLabels
from .errors import DataError, SingularKernelError
from .kernelstore import IndexSlice, KernelStore, Layout, slice_kernel

# Schur complements at or below JITTER_FLOOR * mean-diagonal are treated as
# singular; legitimate SPD growth sequences with condition <= 1e8 stay far
# above this.
JITTER_FLOOR = 1e-13


@dataclass(frozen=True)
class EmptyModelPolicy:
    """What the model trained on the empty subset predicts.

    ``constant`` always predicts ``class_index``; ``uniform`` scores utility
    1/C regardless of the queries.
    """

    kind: str = "constant"
    class_index: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform"):
            raise DataError(f"unknown empty-model policy {self.kind!r}")
        if self.class_index < 0:
            raise DataError("class_index must be >= 0")

    def utility(self, truth: np.ndarray, n_classes: int) -> float:
        if self.kind == "uniform":
            return 1.0 / n_classes
        return float(np.mean(np.asarray(truth) == self.class_index))

    def describe(self) -> str:
        return "uniform" if self.kind == "uniform" else f"constant:{self.class_index}"


@dataclass(frozen=True)
class JitterPolicy:
    """Escalating diagonal jitter for ill-conditioned kernel sub-blocks.

    Solves try exact first; on factorization failure or a condition estimate
    above ``cond_limit`` they add eps * mean(diagonal) to the diagonal, with
    eps walking the ladder until one level succeeds.
    """

    ladder: tuple[float, ...] = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
    cond_limit: float = 1e12


DEFAULT_JITTER = JitterPolicy()
DEFAULT_EMPTY = EmptyModelPolicy()


def _try_spd_solve(k: np.ndarray, rhs: np.ndarray, cond_limit: float):
    """One factorization attempt; returns (solution, cond_estimate) or (None, cond)."""
    try:
        c, low = sla.cho_factor(k, lower=True, check_finite=False)
    except sla.LinAlgError:
        return None, np.inf
    anorm = float(np.abs(k).sum(axis=0).max())
    rcond, info = dpocon(c, anorm, uplo=b"L")
    cond = np.inf if (info != 0 or rcond == 0.0) else 1.0 / float(rcond)
    if cond > cond_limit:
        return None, cond
    return sla.cho_solve((c, low), rhs, check_finite=False), cond


def spd_solve(k: np.ndarray, rhs: np.ndarray, jitter: JitterPolicy = DEFAULT_JITTER):
    """Solve K x = rhs for SPD K under the jitter policy.

    Returns (x, applied_eps).  Raises SingularKernelError carrying the last
    condition estimate once the ladder is exhausted.
    """
    k = np.asarray(k, dtype=np.float64)
    scale = float(np.mean(np.diag(k))) if k.size else 0.0
    last_cond = np.inf
    for eps in jitter.ladder:
        kk = k if eps == 0.0 else k + (eps * scale) * np.eye(k.shape[0])
        x, cond = _try_spd_solve(kk, rhs, jitter.cond_limit)
        last_cond = cond
        if x is not None:
            return x, eps
    raise SingularKernelError(
        f"kernel block singular after max jitter {jitter.ladder[-1]:g} "
        f"(condition estimate {last_cond:.3e})",
        condition_estimate=last_cond,
        applied_jitter=jitter.ladder[-1],
    )


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-query class scores plus argmax hard labels (lowest index wins ties)."""

    scores: np.ndarray  # (q, C)
    applied_jitter: float = 0.0

    def __post_init__(self):
        s = np.ascontiguousarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] < 1:
            raise DataError("scores must be (q, C)")
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    @property
    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)


def _subset_onehot(labels: OneHotLabels, s: IndexSlice) -> np.ndarray:
    return labels.matrix[s.indices]


def fit_predict(
    store: KernelStore,
    s,
    labels: OneHotLabels | LabeledDataset,
    queries,
    jitter: JitterPolicy = DEFAULT_JITTER,
) -> PredictionMatrix:
    """Scores[q, c] = K[q, S] . K[S,S]^-1 . Y_S^(c) under the store's layout."""
    s = s if isinstance(s, IndexSlice) else IndexSlice(s)
    queries = queries if isinstance(queries, IndexSlice) else IndexSlice(queries)
    if len(s) == 0:
        raise DataError("subset S must be nonempty (empty subsets go through EmptyModelPolicy)")
    if isinstance(labels, LabeledDataset):
        labels = labels.one_hot()
    if labels.matrix.shape[0] != store.n_train:
        raise DataError("one-hot labels must cover the full training set")
    if labels.n_classes != store.n_classes:
        raise DataError(
            f"labels carry {labels.n_classes} classes, store {store.n_classes}"
        )
    y = _subset_onehot(labels, s)

    if store.layout == Layout.SHARED0:
        kss = slice_kernel(store, s, s)
        kqs = slice_kernel(store, queries, s)
        w, eps = spd_solve(kss, y, jitter)
        return PredictionMatrix(kqs @ w, applied_jitter=eps)

    if store.layout == Layout.PER_CLASS1:
        out = np.empty((len(queries), store.n_classes))
        eps_max = 0.0
        for c in range(store.n_classes):
            kss = slice_kernel(store, s, s, cls=c)
            kqs = slice_kernel(store, queries, s, cls=c)
            w, eps = spd_solve(kss, y[:, c], jitter)
            out[:, c] = kqs @ w
            eps_max = max(eps_max, eps)
        return PredictionMatrix(out, applied_jitter=eps_max)

    kss = slice_kernel(store, s, s, cls=None)
    kqs = slice_kernel(store, queries, s, cls=None)
    w, eps = spd_solve(kss, y.ravel(), jitter)
    c = store.n_classes
    scores = (kqs @ w).reshape(len(queries), c)
    return PredictionMatrix(scores, applied_jitter=eps)


def utility(predictions: PredictionMatrix, truth) -> float:
    """Mean accuracy of the hard labels against the true query labels."""
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if truth.size == 0:
        raise DataError("utility needs at least one query")
    hard = predictions.hard_labels
    if hard.size != truth.size:
        raise DataError(f"{hard.size} predictions vs {truth.size} truths")
    return float(np.mean(hard == truth))


def subset_utility(
    store: KernelStore,
    labels: OneHotLabels,
    s: Sequence[int] | IndexSlice,
    queries,
    truth,
    empty_policy: EmptyModelPolicy = DEFAULT_EMPTY,
    jitter: JitterPolicy = DEFAULT_JITTER,
) -> float:
    """Test accuracy of the subset's kernel-regression model (the utility)."""
    s = s if isinstance(s, IndexSlice) else IndexSlice(s)
    if len(s) == 0:
        return empty_policy.utility(truth, store.n_classes)
    return utility(fit_predict(store, s, labels, queries, jitter), truth)


# ---------------------------------------------------------------------------
# Incremental (blockwise) inversion
#
# The tracked representation is the lower Cholesky factor of K[S,S]: appending
# a point computes the new off-diagonal row by one triangular solve and the
# new diagonal entry as the square root of the Schur complement.  Plain
# rank-one updates of the explicit inverse drift like cond^2 * eps and miss
# the 1e-8 agreement contract near cond 1e8; the factored form stays within it.


@dataclass(frozen=True)
class RegressionState:
    """Inverse of K[S,S] maintained in factored form as S grows in append order.

    ``factor`` holds one (k, k) lower-triangular Cholesky factor for SHARED0,
    a (C, k, k) stack for PER_CLASS1, and one (kC, kC) factor for FULL2.
    ``eps_abs`` is the absolute jitter baked into every diagonal entry of the
    tracked matrix.
    """

    store: KernelStore
    subset: tuple[int, ...]
    factor: np.ndarray
    eps_abs: float = 0.0

    def inverse(self) -> np.ndarray:
        """Explicit inverse of the tracked (jittered) K[S,S], per layout."""
        if self.store.layout == Layout.PER_CLASS1:
            return np.stack([_factor_inverse(f) for f in self.factor])
        return _factor_inverse(self.factor)

    def residual(self) -> float:
        """Relative Frobenius error of inverse * K[S,S] vs identity, on demand."""
        s = IndexSlice(self.subset)
        if self.store.layout == Layout.PER_CLASS1:
            items = [(c, _factor_inverse(self.factor[c])) for c in range(self.store.n_classes)]
        elif self.store.layout == Layout.FULL2:
            items = [(None, _factor_inverse(self.factor))]
        else:
            items = [(0, _factor_inverse(self.factor))]
        worst = 0.0
        for c, inv in items:
            kss = self._jittered(slice_kernel(self.store, s, s, cls=c))
            eye = np.eye(kss.shape[0])
            worst = max(worst, float(np.linalg.norm(inv @ kss - eye) / np.linalg.norm(eye)))
        return worst

    def _jittered(self, k: np.ndarray) -> np.ndarray:
        if self.eps_abs:
            k = k + self.eps_abs * np.eye(k.shape[0])
        return k


def _factor_inverse(factor: np.ndarray) -> np.ndarray:
    return sla.cho_solve((factor, True), np.eye(factor.shape[0]), check_finite=False)


def _factor_solve(factor: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return sla.cho_solve((factor, True), rhs, check_finite=False)


def _jitter_scale(store: KernelStore) -> float:
    n = store.n_train
    if store.layout == Layout.SHARED0:
        diag = np.diag(store.block[:n, :n])
    elif store.layout == Layout.PER_CLASS1:
        diag = np.concatenate([np.diag(store.block[c, :n, :n]) for c in range(store.n_classes)])
    else:
        diag = np.diag(store.block[: n * store.n_classes, : n * store.n_classes])
    return float(np.mean(diag))


def _singular(value, eps_rel) -> SingularKernelError:
    return SingularKernelError(
        f"Schur complement not invertible (value {value:.3e}, jitter {eps_rel:g})",
        condition_estimate=np.inf,
        applied_jitter=eps_rel,
    )


def _chol_small(d: np.ndarray, floor: float, eps_rel: float) -> np.ndarray:
    try:
        factor = np.linalg.cholesky(d)
    except np.linalg.LinAlgError:
        raise _singular(float(np.min(np.diag(d))), eps_rel) from None
    if float(np.min(np.diag(factor)) ** 2) <= floor:
        raise _singular(float(np.min(np.diag(factor)) ** 2), eps_rel)
    return factor


def make_state(store: KernelStore, first_index: int, eps_rel: float = 0.0) -> RegressionState:
    """State for the singleton subset {first_index}."""
    eps_abs = eps_rel * _jitter_scale(store)
    floor = JITTER_FLOOR * max(_jitter_scale(store), np.finfo(float).tiny)
    s = IndexSlice([first_index])
    if store.layout == Layout.PER_CLASS1:
        factor = np.empty((store.n_classes, 1, 1))
        for c in range(store.n_classes):
            d = slice_kernel(store, s, s, cls=c)[0, 0] + eps_abs
            if d <= floor:
                raise _singular(d, eps_rel)
            factor[c, 0, 0] = np.sqrt(d)
    elif store.layout == Layout.FULL2:
        d = slice_kernel(store, s, s, cls=None) + eps_abs * np.eye(store.n_classes)
        factor = _chol_small(d, floor, eps_rel)
    else:
        d = slice_kernel(store, s, s)[0, 0] + eps_abs
        if d <= floor:
            raise _singular(d, eps_rel)
        factor = np.array([[np.sqrt(d)]])
    return RegressionState(store, (first_index,), factor, eps_abs)


def _extend_factor(factor: np.ndarray, b: np.ndarray, d: float, floor: float, eps_rel: float):
    k = factor.shape[0]
    row = sla.solve_triangular(factor, b, lower=True, check_finite=False)
    schur = d - float(row @ row)
    if schur <= floor:
        raise _singular(schur, eps_rel)
    out = np.zeros((k + 1, k + 1))
    out[:k, :k] = factor
    out[k, :k] = row
    out[k, k] = np.sqrt(schur)
    return out


def extend(state: RegressionState, new_index: int) -> RegressionState:
    """Grow the tracked factorization by one training point.

    The appended row comes from a triangular solve against the previous
    factor and the new diagonal entry from the Schur complement
    d - b^T K[S,S]^-1 b; a non-positive Schur complement raises
    SingularKernelError.
    """
    if new_index in state.subset:
        raise DataError(f"index {new_index} already in subset")
    store = state.store
    floor = JITTER_FLOOR * max(_jitter_scale(store), np.finfo(float).tiny)
    eps_rel = state.eps_abs / max(_jitter_scale(store), np.finfo(float).tiny)
    s_old = IndexSlice(state.subset)
    s_new = IndexSlice([new_index])

    if store.layout == Layout.SHARED0:
        b = slice_kernel(store, s_old, s_new)[:, 0]
        d = slice_kernel(store, s_new, s_new)[0, 0] + state.eps_abs
        factor = _extend_factor(state.factor, b, d, floor, eps_rel)
    elif store.layout == Layout.PER_CLASS1:
        k = len(state.subset)
        factor = np.empty((store.n_classes, k + 1, k + 1))
        for c in range(store.n_classes):
            b = slice_kernel(store, s_old, s_new, cls=c)[:, 0]
            d = slice_kernel(store, s_new, s_new, cls=c)[0, 0] + state.eps_abs
            factor[c] = _extend_factor(state.factor[c], b, d, floor, eps_rel)
    else:
        c = store.n_classes
        b = slice_kernel(store, s_old, s_new, cls=None)  # (kC, C)
        d = slice_kernel(store, s_new, s_new, cls=None) + state.eps_abs * np.eye(c)
        rows = sla.solve_triangular(state.factor, b, lower=True, check_finite=False)
        schur = d - rows.T @ rows
        tail = _chol_small((schur + schur.T) / 2, floor, eps_rel)
        k = state.factor.shape[0]
        factor = np.zeros((k + c, k + c))
        factor[:k, :k] = state.factor
        factor[k:, :k] = rows.T
        factor[k:, k:] = tail
    return RegressionState(store, state.subset + (int(new_index),), factor, state.eps_abs)


def state_predict(state: RegressionState, labels: OneHotLabels, queries) -> PredictionMatrix:
    """Predictions for ``queries`` using the state's tracked factorization."""
    store = state.store
    queries = queries if isinstance(queries, IndexSlice) else IndexSlice(queries)
    s = IndexSlice(state.subset)
    y = _subset_onehot(labels, s)
    if store.layout == Layout.SHARED0:
        kqs = slice_kernel(store, queries, s)
        return PredictionMatrix(kqs @ _factor_solve(state.factor, y))
    if store.layout == Layout.PER_CLASS1:
        out = np.empty((len(queries), store.n_classes))
        for c in range(store.n_classes):
            kqs = slice_kernel(store, queries, s, cls=c)
            out[:, c] = kqs @ _factor_solve(state.factor[c], y[:, c])
        return PredictionMatrix(out)
    kqs = slice_kernel(store, queries, s, cls=None)
    scores = (kqs @ _factor_solve(state.factor, y.ravel())).reshape(
        len(queries), store.n_classes
    )
    return PredictionMatrix(scores)
