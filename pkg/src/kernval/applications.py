"""Downstream evaluations of score tables: removal curves, selection curves,
mislabeled-data detection, and score-table correlations.

Retraining always means refitting the kernel regression on the surviving
subset; score ties are broken by ascending training index everywhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import ceil, floor
from typing import Callable

import numpy as np
from scipy import stats

from .datasets import LabeledDataset
from .errors import DataError
from .kernelstore import KernelStore
from .shapley import ScoreTable, TARGET_ALL, ValuationContext, fisher_yates, _generator, _derived_seed

DETECTION_GRID_STEP = 0.05


@dataclass(frozen=True)
class Curve:
    """A step curve over removal/selection levels."""

    levels: tuple[int, ...]
    fractions: tuple[float, ...]
    values: tuple[float, ...]

    def auc(self) -> float:
        return float(np.trapezoid(self.values, self.fractions))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", "fraction", "accuracy"])
            for level, frac, val in zip(self.levels, self.fractions, self.values):
                writer.writerow([level, repr(frac), repr(val)])


@dataclass(frozen=True)
class DetectionCurve:
    """Fraction of planted flips found within the first q fraction inspected."""

    inspected: tuple[float, ...]
    found: tuple[float, ...]

    def auc(self) -> float:
        return float(np.trapezoid(self.found, self.inspected))

    def baseline_auc(self) -> float:
        return float(np.trapezoid(self.inspected, self.inspected))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["inspected_fraction", "found_fraction", "baseline"])
            for q, f in zip(self.inspected, self.found):
                writer.writerow([repr(q), repr(f), repr(q)])


def _ranked_indices(scores: np.ndarray, descending: bool) -> np.ndarray:
    # lexsort: last key dominates; index ascends within tied scores.
    key = -scores if descending else scores
    return np.lexsort((np.arange(scores.size), key))


def _match_table(table: ScoreTable, dataset: LabeledDataset) -> np.ndarray:
    if table.ids != dataset.ids:
        raise DataError("score table ids do not match the training dataset")
    return table.scores


def removal_curve(
    scores: ScoreTable,
    direction: str,
    step: float,
    ctx: ValuationContext,
    target: str = TARGET_ALL,
) -> Curve:
    """Accuracy after cumulatively dropping the best/worst-scored fraction.

    Level L removes round(L * step * n) points in score order (high-first or
    low-first); level 0 is the full-data accuracy.  The curve stops before a
    level that would empty the training set.
    """
    if not (0.0 < step <= 0.5):
        raise DataError(f"step must lie in (0, 0.5], got {step}")
    if direction not in ("high-first", "low-first"):
        raise DataError(f"direction must be high-first or low-first, got {direction!r}")
    values = _match_table(scores, ctx.train)
    order = _ranked_indices(values, descending=(direction == "high-first"))
    n = ctx.n
    levels, fractions, accs = [], [], []
    for level in range(ceil(1.0 / step) + 1):
        n_remove = int(floor(level * step * n + 0.5))
        if n_remove >= n:
            break
        keep = np.setdiff1d(np.arange(n), order[:n_remove])
        levels.append(level)
        fractions.append(level * step)
        accs.append(ctx.subset_utility(keep.tolist(), target))
    return Curve(tuple(levels), tuple(fractions), tuple(accs))


def selection_curve(
    scores: ScoreTable,
    heldout: LabeledDataset,
    steps,
    ctx: ValuationContext,
) -> Curve:
    """Held-out accuracy gain of training on the top-scored fraction.

    By convention the held-out examples are the last ``len(heldout)`` test
    rows of the kernel; the scores' target must lie in the remaining test
    rows, keeping the two disjoint.  Values are accuracy minus the
    empty-model baseline on the held-out set.
    """
    m, h = ctx.store.n_test, heldout.n
    if h > m:
        raise DataError(f"held-out set ({h} rows) missing from kernel test rows ({m})")
    if ctx.test.n + h > m:
        raise DataError(
            f"held-out rows overlap the scores' target test rows "
            f"({ctx.test.n} scoring + {h} held-out > {m} kernel test rows)"
        )
    if heldout.labels.max() >= ctx.store.n_classes:
        raise DataError("held-out label outside kernel classes")
    first_heldout = ctx.store.n_train + (m - h)
    rows = np.arange(first_heldout, ctx.store.n_train + m, dtype=np.int64)
    if set(heldout.ids) & set(ctx.test.ids):
        raise DataError("held-out ids overlap the scores' target test rows")

    values = _match_table(scores, ctx.train)
    order = _ranked_indices(values, descending=True)
    truth = heldout.labels
    baseline = ctx.empty_policy.utility(truth, ctx.store.n_classes)
    onehot = ctx.one_hot()

    from .regression import subset_utility  # local alias keeps import surface small

    levels, fractions, diffs = [], [], []
    n = ctx.n
    for level, frac in enumerate(steps):
        if not (0.0 <= frac <= 1.0):
            raise DataError(f"selection fraction {frac} outside [0, 1]")
        k = int(floor(frac * n + 0.5))
        subset = order[:k].tolist()
        acc = subset_utility(
            ctx.store, onehot, subset, rows, truth, ctx.empty_policy, ctx.jitter
        )
        levels.append(level)
        fractions.append(float(frac))
        diffs.append(acc - baseline)
    return Curve(tuple(levels), tuple(fractions), tuple(diffs))


def flip_labels(dataset: LabeledDataset, flip_fraction: float, seed: int):
    """Flip a seeded random subset of labels; returns (new dataset, flipped idx)."""
    if not (0.0 < flip_fraction < 0.5):
        raise DataError(f"flip fraction must lie in (0, 0.5), got {flip_fraction}")
    n, c = dataset.n, dataset.n_classes
    count = int(floor(flip_fraction * n + 0.5))
    rng = _generator(_derived_seed(seed, 21), 0)
    chosen = np.sort(fisher_yates(rng, n)[:count])
    labels = dataset.labels.copy()
    shift = rng.integers(1, c, size=count)
    labels[chosen] = (labels[chosen] + shift) % c
    return dataset.with_labels(labels), chosen


def mislabel_detection(
    dataset: LabeledDataset,
    flip_fraction: float,
    store: KernelStore | Callable[[], KernelStore],
    scorer: Callable[[LabeledDataset, KernelStore], ScoreTable],
    seed: int,
    grid_step: float = DETECTION_GRID_STEP,
):
    """Plant label flips, rescore, and measure how early inspection finds them.

    The kernel is reused as-is (features do not move when labels flip).
    Returns (DetectionCurve, flipped indices, ScoreTable); the curve reports
    the found fraction at inspected fractions 0, grid_step, ..., 1 when
    points are reviewed in ascending score order.
    """
    store = store() if callable(store) else store
    poisoned, flipped = flip_labels(dataset, flip_fraction, seed)
    table = scorer(poisoned, store)
    values = _match_table(table, poisoned)
    order = _ranked_indices(values, descending=False)
    n = poisoned.n
    flipped_set = np.zeros(n, dtype=bool)
    flipped_set[flipped] = True
    hits = np.cumsum(flipped_set[order])

    qs, found = [], []
    steps = int(round(1.0 / grid_step))
    for gi in range(steps + 1):
        q = gi * grid_step
        inspected = min(n, int(floor(q * n + 0.5)))
        qs.append(float(q))
        found.append(float(hits[inspected - 1] / flipped.size) if inspected else 0.0)
    return DetectionCurve(tuple(qs), tuple(found)), flipped, table


def correlate(a: ScoreTable, b: ScoreTable) -> tuple[float, float]:
    """(Pearson, Spearman) between two score tables over the same index set."""
    if a.ids != b.ids:
        raise DataError("score tables cover different index sets")
    if len(a.ids) < 3:
        raise DataError("need at least 3 points to correlate")
    xs, ys = a.scores, b.scores
    if np.ptp(xs) == 0.0 or np.ptp(ys) == 0.0:
        raise DataError("correlation undefined for a constant score table")
    pearson = float(np.corrcoef(xs, ys)[0, 1])
    rx = stats.rankdata(xs, method="average")
    ry = stats.rankdata(ys, method="average")
    spearman = float(np.corrcoef(rx, ry)[0, 1])
    return pearson, spearman
