"""Sign-robustness of instance scores under dataset resampling.

The empirical protocol drops each target point into R resampled companion
datasets, scores it in each, and flags the point whenever the score signs
disagree with their own majority.  Plug-in variance/expectation bounds and
mean/std diagnostics give the analytical counterpart.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datasets import DistributionSpec, Example, LabeledDataset, sample_dataset, synth_kernel
from .errors import DataError
from .regression import DEFAULT_EMPTY, DEFAULT_JITTER, EmptyModelPolicy, JitterPolicy
from .shapley import (
    DEFAULT_ITERS,
    DEFAULT_TOLERANCE,
    MarginalProfile,
    ValuationContext,
    _derived_seed,
    loo,
    tmc_freeshap,
)

PROTOCOL_METHODS = ("shapley", "loo")


def sign(x: float) -> int:
    """sgn(x): -1 for negatives, +1 otherwise (sgn(0) = +1)."""
    return -1 if x < 0 else 1


@dataclass(frozen=True)
class SignProtocolResult:
    """Per-point scores/signs across resamples plus the aggregate flag rate."""

    method: str
    point_ids: tuple[str, ...]
    scores: np.ndarray  # (pool, R)
    seed: int
    n_others: int
    empty_policy: str

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] != len(self.point_ids):
            raise DataError("scores must be (pool, R)")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)

    @property
    def resamples(self) -> int:
        return int(self.scores.shape[1])

    @property
    def signs(self) -> np.ndarray:
        return np.where(self.scores < 0, -1, 1)

    @property
    def majority(self) -> np.ndarray:
        return np.where(self.signs.sum(axis=1) < 0, -1, 1)

    @property
    def flagged(self) -> np.ndarray:
        return (self.signs != self.majority[:, None]).any(axis=1)

    @property
    def rate(self) -> float:
        return float(np.mean(self.flagged))

    def write_csv(self, path) -> None:
        r = self.resamples
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["point_id"] + [f"sign_{k + 1}" for k in range(r)] + ["majority", "flagged"])
            signs, majority, flagged = self.signs, self.majority, self.flagged
            for i, ident in enumerate(self.point_ids):
                writer.writerow(
                    [ident] + signs[i].tolist() + [int(majority[i]), int(flagged[i])]
                )
            writer.writerow(["aggregate_rate"] + [""] * r + ["", repr(self.rate)])

    def summary(self) -> dict:
        return {
            "method": self.method,
            "pool": len(self.point_ids),
            "resamples": self.resamples,
            "seed": self.seed,
            "n_others": self.n_others,
            "empty_policy": self.empty_policy,
            "non_robust_rate": self.rate,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def robustness_protocol(
    dist: DistributionSpec,
    pool: list[Example],
    resamples: int,
    n_others: int,
    method: str,
    seed: int,
    test: LabeledDataset | None = None,
    test_size: int = 300,
    iters: int = DEFAULT_ITERS,
    tolerance: float = DEFAULT_TOLERANCE,
    kernel_kind: str = "rbf",
    bandwidth: float | None = None,
    empty_policy: EmptyModelPolicy = DEFAULT_EMPTY,
    jitter: JitterPolicy = DEFAULT_JITTER,
    workers: int = 1,
) -> SignProtocolResult:
    """Score every pool point inside R shared resampled training sets.

    The r-th companion sample depends only on (dist, n_others, seed, r), so
    every pool point and every method sees the same R complements.  Shapley
    scores use truncated Monte-Carlo with the given iters/tolerance; LOO is
    exact.  The test set is fixed across complements (clean labels).
    """
    if resamples < 3 or resamples % 2 == 0:
        raise DataError("resamples must be odd and >= 3 for a well-defined majority")
    if not pool:
        raise DataError("pool must be nonempty")
    if method not in PROTOCOL_METHODS:
        raise DataError(f"method must be one of {PROTOCOL_METHODS}")
    if test is None:
        test = sample_dataset(dist.clean(), test_size, _derived_seed(seed, 2), id_prefix="pt")

    complements = [
        sample_dataset(dist, n_others, _derived_seed(seed, 1, r), id_prefix=f"cmp{r}")
        for r in range(resamples)
    ]

    def score_pair(task):
        i, r = task
        point = pool[i]
        others = complements[r]
        dataset = LabeledDataset(
            (point.id,) + others.ids,
            np.concatenate([[point.label], others.labels]),
            dist.n_classes,
            np.vstack([np.asarray(point.features, dtype=np.float64)[None, :], others.features]),
        )
        store = synth_kernel(dataset, test, kind=kernel_kind, bandwidth=bandwidth)
        ctx = ValuationContext(dataset, test, store, empty_policy, jitter)
        if method == "loo":
            # Exact two-solve LOO for the target point alone (it sits at index 0).
            n = ctx.n
            return ctx.subset_utility(range(n)) - ctx.subset_utility(range(1, n))
        table, _ = tmc_freeshap(
            ctx, iters=iters, tolerance=tolerance, seed=_derived_seed(seed, 3, i, r)
        )
        return table.scores[0]

    tasks = [(i, r) for i in range(len(pool)) for r in range(resamples)]
    scores = np.empty((len(pool), resamples))
    if workers <= 1:
        values = [score_pair(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as poolexec:
            values = list(poolexec.map(score_pair, tasks))
    for (i, r), v in zip(tasks, values):  # deterministic placement keyed by pair index
        scores[i, r] = v

    return SignProtocolResult(
        method, tuple(p.id for p in pool), scores, seed, n_others, empty_policy.describe()
    )


def sample_pool(dist: DistributionSpec, size: int, seed: int) -> list[Example]:
    """Uniformly sampled target points (the protocol's pool), seeded."""
    ds = sample_dataset(dist, size, _derived_seed(seed, 4), id_prefix="tgt")
    return [ds.example(i) for i in range(ds.n)]


# ---------------------------------------------------------------------------
# Mean/std diagnostics


@dataclass(frozen=True)
class RemarkReport:
    """Per-point |mean| and std of the resampled scores, per method.

    Descriptive only: the expectation/variance comparison is a statistical
    acceptance criterion, not an invariant, so no pass/fail claim is made.
    """

    point_ids: tuple[str, ...]
    per_method: dict  # method -> {"abs_mean": array, "std": array}

    def pool_average(self, method: str) -> dict:
        entry = self.per_method[method]
        return {
            "abs_mean": float(np.mean(entry["abs_mean"])),
            "std": float(np.mean(entry["std"])),
        }

    def to_dict(self) -> dict:
        return {
            "points": list(self.point_ids),
            "per_method": {
                m: {k: v.tolist() for k, v in entry.items()}
                for m, entry in self.per_method.items()
            },
            "pool_average": {m: self.pool_average(m) for m in self.per_method},
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def remark_diagnostics(score_samples: dict) -> RemarkReport:
    """Mean/std summary of per-point score samples, e.g. from the protocol.

    ``score_samples`` maps method name to a SignProtocolResult or a
    (pool, R) array; stds are population (ddof=0).
    """
    ids = None
    per_method = {}
    for method, data in score_samples.items():
        if isinstance(data, SignProtocolResult):
            pids, arr = data.point_ids, data.scores
        else:
            arr = np.asarray(data, dtype=np.float64)
            pids = tuple(str(i) for i in range(arr.shape[0]))
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise DataError("need >= 2 score samples per point per method")
        if ids is None:
            ids = pids
        elif len(pids) != len(ids):
            raise DataError("methods cover different pools")
        per_method[method] = {
            "abs_mean": np.abs(arr.mean(axis=1)),
            "std": arr.std(axis=1, ddof=0),
        }
    if not per_method:
        raise DataError("no score samples given")
    return RemarkReport(ids, per_method)


# ---------------------------------------------------------------------------
# Plug-in bounds


@dataclass(frozen=True)
class BoundsReport:
    bound_shap: float
    bound_loo: float
    shap_infinite: bool
    loo_infinite: bool


def theorem_bounds(profile: MarginalProfile) -> BoundsReport:
    """Plug-in sign-flip bounds: mean(delta)/mean(tau)^2 and delta_last/tau_last^2.

    Requires the profile to cover every size 0..n-1.  A zero denominator makes
    the corresponding bound infinite (and flagged), mirroring the analytical
    edge case where the leave-one-out bound blows up.
    """
    if tuple(profile.sizes) != tuple(range(profile.n)):
        missing = sorted(set(range(profile.n)) - set(profile.sizes))
        raise DataError(f"profile must cover all sizes 0..{profile.n - 1}; missing {missing}")
    mean_tau = float(profile.tau.mean())
    mean_delta = float(profile.delta.mean())
    tau_last = float(profile.tau[-1])
    delta_last = float(profile.delta[-1])
    shap_inf = mean_tau == 0.0
    loo_inf = tau_last == 0.0
    bound_shap = np.inf if shap_inf else mean_delta / mean_tau**2
    bound_loo = np.inf if loo_inf else delta_last / tau_last**2
    return BoundsReport(float(bound_shap), float(bound_loo), shap_inf, loo_inf)


def corollary_hypotheses_hold(profile: MarginalProfile) -> bool:
    """Numeric check of the bound-comparison hypotheses on an estimated profile:
    one consistent sign, |tau| non-increasing, mean(delta) <= delta_last,
    and a nonzero final tau."""
    tau, delta = profile.tau, profile.delta
    if tau[-1] == 0.0:
        return False
    same_sign = (tau >= 0).all() or (tau < 0).all()
    diminishing = bool((np.diff(np.abs(tau)) <= 0).all())
    var_growth = float(delta.mean()) <= float(delta[-1])
    return bool(same_sign and diminishing and var_growth)
