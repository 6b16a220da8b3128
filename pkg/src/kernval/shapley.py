"""Instance scores: exact Shapley, Monte-Carlo and truncated Monte-Carlo
permutation sampling, leave-one-out, and marginal-contribution profiles.

Every method prices training points by the same utility: test accuracy of
the kernel-regression model fitted on a subset (``regression.subset_utility``).
Monte-Carlo runs draw one permutation per iteration, walk it with the
incremental-inverse scan, and average the per-position utility gains.

Reproducibility contract: permutations come from PCG64 generators spawned
from the master seed via numpy's SeedSequence (spawn_key = iteration index)
and are shuffled with explicit Fisher-Yates, so equal seeds give equal
score tables on every platform and at any worker count.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from math import comb
from typing import Sequence

import numpy as np

from .datasets import (
    DistributionSpec,
    Example,
    LabeledDataset,
    OneHotLabels,
    sample_complement,
    sample_dataset,
    synth_kernel,
)
from .errors import DataError, SingularKernelError
from .kernelstore import IndexSlice, KernelStore, Layout
from .regression import (
    DEFAULT_EMPTY,
    DEFAULT_JITTER,
    JITTER_FLOOR,
    EmptyModelPolicy,
    JitterPolicy,
    extend,
    make_state,
    spd_solve,
    state_predict,
    subset_utility,
    utility,
)
from . import scan as scan_mod

DEFAULT_ITERS = 200
DEFAULT_TOLERANCE = 0.05
ENUMERATION_CAP = 12

TARGET_ALL = "all"


@dataclass(frozen=True)
class ValuationContext:
    """Everything a scoring run needs: data, kernel, and numeric policies."""

    train: LabeledDataset
    test: LabeledDataset
    store: KernelStore
    empty_policy: EmptyModelPolicy = DEFAULT_EMPTY
    jitter: JitterPolicy = DEFAULT_JITTER

    def __post_init__(self):
        if self.train.n != self.store.n_train:
            raise DataError(f"{self.train.n} training labels vs {self.store.n_train} kernel rows")
        # The labelled test set may cover a prefix of the kernel's test rows;
        # trailing rows can serve as a held-out pool for selection runs.
        if self.test.n > self.store.n_test:
            raise DataError(f"{self.test.n} test labels vs {self.store.n_test} kernel test rows")
        for ds, what in ((self.train, "train"), (self.test, "test")):
            if ds.labels.max() >= self.store.n_classes:
                raise DataError(f"{what} label {int(ds.labels.max())} >= kernel n_classes")

    @property
    def n(self) -> int:
        return self.train.n

    def one_hot(self) -> OneHotLabels:
        return OneHotLabels.from_labels(self.train.labels, self.store.n_classes)

    def resolve_target(self, target: str):
        """Target = 'all' (whole labelled test set) or one test id; same code path."""
        n = self.store.n_train
        if target == TARGET_ALL:
            rows = np.arange(n, n + self.test.n, dtype=np.int64)
            truth = self.test.labels
        else:
            try:
                pos = self.test.ids.index(target)
            except ValueError:
                raise DataError(f"target {target!r} is not a test id") from None
            rows = np.array([n + pos], dtype=np.int64)
            truth = self.test.labels[pos : pos + 1]
        return IndexSlice(rows), np.asarray(truth, dtype=np.int64)

    def subset_utility(self, subset, target: str = TARGET_ALL) -> float:
        rows, truth = self.resolve_target(target)
        return subset_utility(
            self.store, self.one_hot(), subset, rows, truth, self.empty_policy, self.jitter
        )


@dataclass(frozen=True)
class ScoreTable:
    """One score per training point plus the run's provenance."""

    ids: tuple[str, ...]
    scores: np.ndarray
    method: str
    iters: int
    seed: int | None
    target: str

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if scores.size != len(self.ids):
            raise DataError("one score per training point required")
        if not np.isfinite(scores).all():
            raise DataError("scores must be finite")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "ids", tuple(self.ids))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "id", "score", "method", "iters", "seed", "target"])
            seed = "" if self.seed is None else self.seed
            for i, (ident, score) in enumerate(zip(self.ids, self.scores.tolist())):
                writer.writerow([i, ident, repr(score), self.method, self.iters, seed, self.target])

    @classmethod
    def read_csv(cls, path) -> "ScoreTable":
        ids, scores = [], []
        method, iters, seed, target = "unknown", 0, None, TARGET_ALL
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header][:3] != ["index", "id", "score"]:
                raise DataError(f"{path}: not a score table")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 7:
                    raise DataError(f"{path}: line {lineno}: expected 7 fields")
                ids.append(row[1])
                try:
                    scores.append(float(row[2]))
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: bad score {row[2]!r}") from None
                method, iters = row[3], int(row[4]) if row[4] else 0
                seed = int(row[5]) if row[5] else None
                target = row[6]
        if not ids:
            raise DataError(f"{path}: no score rows")
        return cls(tuple(ids), np.array(scores), method, iters, seed, target)


@dataclass(frozen=True)
class PermutationRun:
    """One Monte-Carlo permutation with its utility trajectory."""

    permutation: np.ndarray
    trajectory: np.ndarray
    truncation: int

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        traj = np.asarray(self.trajectory, dtype=np.float64)
        if traj.size != self.truncation + 1:
            raise DataError("trajectory length must equal truncation position + 1")
        if traj.size and (traj.min() < 0.0 or traj.max() > 1.0):
            raise DataError("utilities must lie in [0, 1]")
        perm.flags.writeable = False
        traj.flags.writeable = False
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "trajectory", traj)

    def marginals(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        diffs = np.diff(self.trajectory)
        out[self.permutation[: self.truncation]] = diffs
        return out


@dataclass(frozen=True)
class MarginalProfile:
    """Estimated expected marginal contribution and its variance per subset size.

    ``bounds`` carries the plug-in sign-flip bounds whenever the profile
    covers every size 0..n-1 (see ``robustness.theorem_bounds``).
    """

    point_id: str
    n: int
    sizes: tuple[int, ...]
    tau: np.ndarray
    delta: np.ndarray
    counts: np.ndarray
    bounds: object | None = None

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=np.float64)
        delta = np.asarray(self.delta, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if not (tau.size == delta.size == counts.size == len(self.sizes)):
            raise DataError("profile arrays must align with sizes")
        if (delta < 0).any():
            raise DataError("variance estimates must be >= 0")
        if (counts < 2).any():
            raise DataError("need >= 2 samples per size to report a variance")
        for arr in (tau, delta, counts):
            arr.flags.writeable = False
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "sizes", tuple(int(k) for k in self.sizes))


# ---------------------------------------------------------------------------
# Permutation RNG (part of the reproducibility contract)


def _generator(seed: int, t: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(t),))
    return np.random.Generator(np.random.PCG64(seq))


def fisher_yates(rng: np.random.Generator, n: int) -> np.ndarray:
    perm = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def permutation_for(seed: int, t: int, n: int) -> np.ndarray:
    """Permutation of iteration ``t`` under master ``seed`` (PCG64 + Fisher-Yates)."""
    return fisher_yates(_generator(seed, t), n)


# ---------------------------------------------------------------------------
# Monte-Carlo permutation runs


def _scan_shared0(ctx: ValuationContext, rows, truth, perm, u0, u_full, tol):
    """Scan one permutation on the SHARED0 fast path, escalating jitter on failure."""
    block = ctx.store.shared_block()
    n = ctx.store.n_train
    ktt = block[:n]
    kqt = block[rows.indices]
    onehot = ctx.one_hot().matrix
    scale = float(np.mean(np.diag(ktt)))
    floor = JITTER_FLOOR * max(scale, np.finfo(float).tiny)
    status = 0
    for eps_rel in ctx.jitter.ladder:
        traj, trunc, status = scan_mod.scan_permutation(
            ktt, kqt, onehot, truth, perm, u0, u_full, tol, eps_rel * scale, floor
        )
        if status == scan_mod.OK:
            return traj, trunc, eps_rel
    fail_step = status - 1
    prefix = perm[: fail_step + 1]
    bad = ktt[np.ix_(prefix, prefix)]
    cond = float(np.linalg.cond(bad)) if bad.size else np.inf
    raise SingularKernelError(
        f"permutation scan singular at step {fail_step} even at max jitter",
        condition_estimate=cond,
        applied_jitter=ctx.jitter.ladder[-1],
    )


def _scan_generic(ctx: ValuationContext, rows, truth, perm, u0, u_full, tol):
    """Layout-agnostic scan via RegressionState; used for PER_CLASS1/FULL2."""
    onehot = ctx.one_hot()
    n = perm.size
    last_err = None
    for eps_rel in ctx.jitter.ladder:
        traj = np.zeros(n + 1)
        traj[0] = u0
        trunc = n
        try:
            state = None
            for p, j in enumerate(perm.tolist()):
                state = make_state(ctx.store, j, eps_rel) if state is None else extend(state, j)
                u = utility(state_predict(state, onehot, rows), truth)
                traj[p + 1] = u
                if tol > 0.0 and abs(u - u_full) < tol:
                    trunc = p + 1
                    break
            return traj[: trunc + 1], trunc, eps_rel
        except SingularKernelError as err:
            last_err = err
    raise SingularKernelError(
        f"permutation scan singular even at max jitter: {last_err}",
        condition_estimate=last_err.condition_estimate,
        applied_jitter=ctx.jitter.ladder[-1],
    )


def _mc_tables(
    ctx: ValuationContext,
    target: str,
    iters: int,
    tolerance: float,
    seed: int,
    workers: int = 1,
):
    if iters < 1:
        raise DataError("iters must be >= 1")
    if tolerance < 0:
        raise DataError("tolerance must be >= 0")
    rows, truth = ctx.resolve_target(target)
    n = ctx.n
    u0 = ctx.empty_policy.utility(truth, ctx.store.n_classes)
    u_full = ctx.subset_utility(range(n), target) if tolerance > 0 else 0.0
    scan = _scan_shared0 if ctx.store.layout == Layout.SHARED0 else _scan_generic

    def run_one(t: int):
        perm = permutation_for(seed, t, n)
        traj, trunc, eps = scan(ctx, rows, truth, perm, u0, u_full, tolerance)
        return PermutationRun(perm, traj, trunc), eps

    results: list[tuple[PermutationRun, float]] = [None] * iters  # type: ignore[list-item]
    try:
        if workers <= 1:
            for t in range(iters):
                results[t] = run_one(t)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for t, res in enumerate(pool.map(run_one, range(iters))):
                    results[t] = res
    except SingularKernelError as err:
        # abort, but flag what completed so callers can report the partial run
        done = [r for r in results if r is not None]
        if done:
            partial = np.add.reduce([run.marginals(n) for run, _ in done]) / len(done)
        else:
            partial = np.zeros(n)
        err.partial = {"completed_permutations": len(done), "scores": partial}
        raise

    total = np.zeros(n)
    runs = []
    max_eps = 0.0
    for run, eps in results:  # fixed reduction order keyed by permutation index
        total += run.marginals(n)
        runs.append(run)
        max_eps = max(max_eps, eps)
    scores = total / iters
    method = "tmc" if tolerance > 0 else "mc"
    table = ScoreTable(ctx.train.ids, scores, method, iters, seed, target)
    return table, runs, max_eps


def freeshap(
    ctx: ValuationContext,
    target: str = TARGET_ALL,
    iters: int = DEFAULT_ITERS,
    seed: int = 0,
    workers: int = 1,
):
    """Monte-Carlo permutation Shapley over the precomputed kernel (no truncation)."""
    table, runs, _ = _mc_tables(ctx, target, iters, 0.0, seed, workers)
    return table, runs


def tmc_freeshap(
    ctx: ValuationContext,
    target: str = TARGET_ALL,
    iters: int = DEFAULT_ITERS,
    tolerance: float = DEFAULT_TOLERANCE,
    seed: int = 0,
    workers: int = 1,
):
    """Truncated Monte-Carlo: a permutation stops once |u_p - U(N)| < tolerance.

    Tolerance 0 never truncates and reproduces ``freeshap`` exactly (including
    the 'mc' method tag) under the same seed.
    """
    table, runs, _ = _mc_tables(ctx, target, iters, tolerance, seed, workers)
    return table, runs


# ---------------------------------------------------------------------------
# Exact enumeration


def shapley_from_subset_utilities(values: Sequence, n: int):
    """Shapley scores from a utility table indexed by subset bitmask.

    Works in exact ``fractions.Fraction`` arithmetic whenever the table
    contains Fractions/ints, so the efficiency identity holds bitwise for
    rational utilities.
    """
    if len(values) != 1 << n:
        raise DataError(f"utility table needs {1 << n} entries, got {len(values)}")
    exact = all(isinstance(v, (Fraction, int)) for v in values)
    if exact:
        weights = [Fraction(1, n * comb(n - 1, k)) for k in range(n)]
        phi = [Fraction(0)] * n
    else:
        weights = [1.0 / (n * comb(n - 1, k)) for k in range(n)]
        phi = [0.0] * n
    for mask in range(1 << n):
        k = bin(mask).count("1")
        if k == n:
            continue
        u_s = values[mask]
        w = weights[k]
        for i in range(n):
            bit = 1 << i
            if mask & bit:
                continue
            phi[i] += w * (values[mask | bit] - u_s)
    return phi


def exact_shapley(
    ctx: ValuationContext, target: str = TARGET_ALL, cap: int = ENUMERATION_CAP
) -> ScoreTable:
    """Exact Shapley by full subset enumeration (refuses n above the cap)."""
    n = ctx.n
    if n > cap:
        raise DataError(
            f"exact enumeration needs 2^{n} utility solves; cap is n <= {cap}"
        )
    values = [0.0] * (1 << n)
    for mask in range(1 << n):
        subset = [i for i in range(n) if mask & (1 << i)]
        values[mask] = ctx.subset_utility(subset, target)
    phi = shapley_from_subset_utilities(values, n)
    return ScoreTable(ctx.train.ids, np.array([float(p) for p in phi]), "exact", 0, None, target)


# ---------------------------------------------------------------------------
# Leave-one-out


def loo(ctx: ValuationContext, target: str = TARGET_ALL) -> ScoreTable:
    """g(z_i) = U(N) - U(N \\ {i}), exact (no sampling)."""
    n = ctx.n
    if n < 2:
        raise DataError("LOO needs n >= 2")
    rows, truth = ctx.resolve_target(target)

    if ctx.store.layout == Layout.SHARED0:
        block = ctx.store.shared_block()
        ktt = block[:n]
        kq = block[rows.indices]
        y = ctx.one_hot().matrix
        minv, _ = spd_solve(ktt, np.eye(n), ctx.jitter)
        alpha = minv @ y
        pred_full = kq @ alpha
        u_full = float(np.mean(np.argmax(pred_full, axis=1) == truth))
        b = kq @ minv
        scores = np.empty(n)
        diag = np.diag(minv)
        for i in range(n):
            # Rank-one downdate of the fitted coefficients when point i leaves.
            pred_i = pred_full - np.outer(b[:, i], alpha[i] / diag[i])
            u_i = float(np.mean(np.argmax(pred_i, axis=1) == truth))
            scores[i] = u_full - u_i
    else:
        u_full = ctx.subset_utility(range(n), target)
        scores = np.empty(n)
        for i in range(n):
            rest = [j for j in range(n) if j != i]
            scores[i] = u_full - ctx.subset_utility(rest, target)

    return ScoreTable(ctx.train.ids, scores, "loo", 0, None, target)


def marginal_contribution(ctx: ValuationContext, i: int, subset, target: str = TARGET_ALL) -> float:
    """U(S + {i}) - U(S); S must exclude i (empty S uses the empty-model policy)."""
    subset = list(subset)
    if i in subset:
        raise DataError(f"index {i} already in S")
    return ctx.subset_utility(subset + [i], target) - ctx.subset_utility(subset, target)


# ---------------------------------------------------------------------------
# Marginal-contribution profiles (robustness raw material)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def estimate_marginal_profile(
    point: Example,
    dist: DistributionSpec,
    sizes: Sequence[int],
    samples_per_k: int,
    seed: int,
    n_total: int | None = None,
    test: LabeledDataset | None = None,
    test_size: int = 64,
    kernel_kind: str = "rbf",
    bandwidth: float | None = None,
    empty_policy: EmptyModelPolicy = DEFAULT_EMPTY,
    jitter: JitterPolicy = DEFAULT_JITTER,
) -> MarginalProfile:
    """Sample mean/variance of the point's marginal contribution per subset size.

    Each sample draws a fresh complement around the fixed point and a uniform
    size-k subset of it, then differences the two kernel-regression utilities.
    The test set stays fixed across samples.
    """
    if samples_per_k < 2:
        raise DataError("need samples_per_k >= 2 for a variance estimate")
    sizes = [int(k) for k in sizes]
    n = (max(sizes) + 1) if n_total is None else int(n_total)
    if any(k < 0 or k > n - 1 for k in sizes):
        raise DataError(f"sizes must lie in [0, {n - 1}]")
    if test is None:
        test = sample_dataset(dist.clean(), test_size, _derived_seed(seed, 2), id_prefix="pt")

    tau = np.empty(len(sizes))
    delta = np.empty(len(sizes))
    counts = np.full(len(sizes), samples_per_k, dtype=np.int64)
    for ki, k in enumerate(sizes):
        draws = np.empty(samples_per_k)
        for s in range(samples_per_k):
            comp_seed = _derived_seed(seed, 11, k, s)
            dataset = sample_complement(dist, point, n - 1, comp_seed)
            store = synth_kernel(dataset, test, kind=kernel_kind, bandwidth=bandwidth)
            ctx = ValuationContext(dataset, test, store, empty_policy, jitter)
            rng = _generator(_derived_seed(seed, 13, k, s), 0)
            others = fisher_yates(rng, n - 1)[:k] + 1
            draws[s] = marginal_contribution(ctx, 0, others.tolist())
        tau[ki] = draws.mean()
        delta[ki] = draws.var(ddof=1)
    profile = MarginalProfile(point.id, n, tuple(sizes), tau, delta, counts)
    if tuple(sizes) == tuple(range(n)):
        from .robustness import theorem_bounds  # deferred: robustness imports this module

        profile = MarginalProfile(
            point.id, n, tuple(sizes), tau, delta, counts, theorem_bounds(profile)
        )
    return profile
