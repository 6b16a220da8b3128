"""Datasets, label encodings, synthetic generators, and synthetic kernels.

Everything here is immutable after construction so parallel workers can share
instances freely.  Synthetic Gaussian-mixture data plus linear/rbf kernels
give the valuation engine a fully self-contained test substrate; kernel files
produced by a real extractor are a drop-in replacement through the identical
``KernelStore`` contract.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError
from .kernelstore import KernelStore, Layout

LABELS_HEADER = ("id", "label")


class Example(NamedTuple):
    id: str
    label: int
    features: np.ndarray | None


@dataclass(frozen=True)
class LabeledDataset:
    """Indexed examples with integer class labels and optional feature vectors.

    Example order is the canonical index order 0..n-1.
    """

    ids: tuple[str, ...]
    labels: np.ndarray
    n_classes: int
    features: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        if len(self.ids) != labels.size:
            raise DataError("ids/labels length mismatch")
        if labels.size == 0:
            raise DataError("empty dataset")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate example ids")
        if self.n_classes < 2:
            raise DataError(f"n_classes must be >= 2, got {self.n_classes}")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            bad = int(labels.max() if labels.max() >= self.n_classes else labels.min())
            raise DataError(f"label {bad} outside [0, {self.n_classes})")
        if self.features is not None:
            feats = np.ascontiguousarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != labels.size or feats.shape[1] < 1:
                raise DataError(f"features shape {feats.shape} invalid for n={labels.size}")
            feats.flags.writeable = False
            object.__setattr__(self, "features", feats)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    def example(self, i: int) -> Example:
        feats = None if self.features is None else self.features[i]
        return Example(self.ids[i], int(self.labels[i]), feats)

    def one_hot(self) -> "OneHotLabels":
        return OneHotLabels.from_labels(self.labels, self.n_classes)

    def with_labels(self, labels) -> "LabeledDataset":
        return replace(self, labels=np.asarray(labels, dtype=np.int64))

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(list(indices), dtype=np.int64)
        feats = None if self.features is None else self.features[idx]
        return LabeledDataset(
            tuple(self.ids[i] for i in idx), self.labels[idx], self.n_classes, feats
        )


@dataclass(frozen=True)
class OneHotLabels:
    """{0,1} encoding, flattened class-major within point: flat[i*C + c] = 1[y_i = c]."""

    matrix: np.ndarray  # (n, C)

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DataError("one-hot matrix must be 2-d")
        ok = ((m == 0) | (m == 1)).all() and (m.sum(axis=1) == 1).all()
        if not ok:
            raise DataError("each point block must contain exactly one 1")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "OneHotLabels":
        labels = np.asarray(labels, dtype=np.int64)
        m = np.zeros((labels.size, n_classes))
        m[np.arange(labels.size), labels] = 1.0
        return cls(m)

    @property
    def flat(self) -> np.ndarray:
        return self.matrix.ravel()

    @property
    def n_classes(self) -> int:
        return int(self.matrix.shape[1])


def load_dataset(path, n_classes: int | None = None) -> LabeledDataset:
    """Read a labels CSV (UTF-8, header ``id,label``, row order = index order).

    C is inferred as 1 + max label unless ``n_classes`` overrides it; labels at
    or above a declared C are rejected.
    """
    ids: list[str] = []
    labels: list[int] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != LABELS_HEADER:
            raise DataError(f"{path}: expected header 'id,label', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
            ident, raw = row[0].strip(), row[1].strip()
            try:
                label = int(raw)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: label {raw!r} is not an integer") from None
            if label < 0:
                raise DataError(f"{path}: line {lineno}: negative label {label}")
            if n_classes is not None and label >= n_classes:
                raise DataError(
                    f"{path}: line {lineno}: label {label} >= declared n_classes {n_classes}"
                )
            ids.append(ident)
            labels.append(label)
    if not ids:
        raise DataError(f"{path}: no data rows")
    c = n_classes if n_classes is not None else max(labels) + 1
    c = max(c, 2)
    return LabeledDataset(tuple(ids), np.array(labels), c)


def write_labels_csv(dataset: LabeledDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABELS_HEADER)
        for ident, label in zip(dataset.ids, dataset.labels.tolist()):
            writer.writerow([ident, label])


# ---------------------------------------------------------------------------
# Synthetic generators


@dataclass(frozen=True)
class DistributionSpec:
    """Gaussian mixture per class, optionally overlaid with label flips.

    ``kind`` is ``gaussian-mixture`` (flip_prob must be 0) or ``label-noise``
    (each drawn label is replaced by a uniformly random other class with
    probability ``flip_prob``).  Features are mean[class] + cov_scale * z with
    z standard normal.
    """

    kind: str = "label-noise"
    means: np.ndarray = None  # (C, d)
    cov_scale: float = 1.0
    flip_prob: float = 0.1
    n_classes: int = 2
    dim: int = 10

    def __post_init__(self):
        if self.kind not in ("gaussian-mixture", "label-noise"):
            raise DataError(f"unknown generator kind {self.kind!r}")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise DataError(f"flip_prob {self.flip_prob} outside [0, 1]")
        if self.kind == "gaussian-mixture" and self.flip_prob != 0.0:
            raise DataError("gaussian-mixture kind does not take label flips")
        if self.cov_scale <= 0:
            raise DataError(f"cov_scale must be > 0, got {self.cov_scale}")
        if self.means is None:
            means = np.zeros((self.n_classes, self.dim))
            means[:, 0] = np.linspace(1.0, -1.0, self.n_classes)
            object.__setattr__(self, "means", means)
        else:
            means = np.ascontiguousarray(self.means, dtype=np.float64)
            if means.ndim != 2:
                raise DataError("means must be a (C, d) matrix")
            object.__setattr__(self, "means", means)
            object.__setattr__(self, "n_classes", means.shape[0])
            object.__setattr__(self, "dim", means.shape[1])
        if self.n_classes < 2 or self.dim < 1:
            raise DataError("need C >= 2 and d >= 1")
        self.means.flags.writeable = False

    def clean(self) -> "DistributionSpec":
        return replace(self, kind="gaussian-mixture", flip_prob=0.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "means": self.means.tolist(),
            "cov_scale": self.cov_scale,
            "flip_prob": self.flip_prob,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DistributionSpec":
        known = {"kind", "means", "cov_scale", "flip_prob", "n_classes", "dim"}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown distribution keys {sorted(unknown)}")
        kwargs = dict(data)
        if "means" in kwargs and kwargs["means"] is not None:
            kwargs["means"] = np.asarray(kwargs["means"], dtype=np.float64)
        return cls(**kwargs)


def default_distribution() -> DistributionSpec:
    """Two Gaussian classes at +-e1, unit scale, d=10, 10% label flips."""
    return DistributionSpec()


def benchmark_distribution() -> DistributionSpec:
    """Wider-margin twin of the default (+-2 e1): the surrogate model is
    strong on it, which is what the removal/detection/fidelity benchmarks
    assume."""
    means = np.zeros((2, 10))
    means[0, 0] = 2.0
    means[1, 0] = -2.0
    return DistributionSpec(means=means)


def _rng(*entropy) -> np.random.Generator:
    seq = np.random.SeedSequence([int(e) for e in entropy])
    return np.random.Generator(np.random.PCG64(seq))


def sample_dataset(dist: DistributionSpec, n: int, seed: int, id_prefix: str = "smp") -> LabeledDataset:
    """Draw n i.i.d. examples; a pure function of (dist, n, seed, id_prefix)."""
    if n < 1:
        raise DataError("n must be >= 1")
    rng = _rng(seed)
    true = rng.integers(0, dist.n_classes, size=n)
    feats = dist.means[true] + dist.cov_scale * rng.standard_normal((n, dist.dim))
    labels = true.copy()
    if dist.flip_prob > 0.0:
        flip = rng.random(n) < dist.flip_prob
        shift = rng.integers(1, dist.n_classes, size=n)
        labels[flip] = (labels[flip] + shift[flip]) % dist.n_classes
    ids = tuple(f"{id_prefix}-{i:05d}" for i in range(n))
    return LabeledDataset(ids, labels, dist.n_classes, feats)


def sample_complement(
    dist: DistributionSpec, fixed_point: Example, n_others: int, seed: int
) -> LabeledDataset:
    """The fixed point at index 0 plus ``n_others`` fresh i.i.d. draws.

    Identical seed gives an identical dataset; the draws do not depend on the
    fixed point, so one seed yields the same companion sample for every
    target point.
    """
    if n_others < 0:
        raise DataError("n_others must be >= 0")
    if fixed_point.features is None:
        raise DataError("fixed point must carry features")
    feats = np.asarray(fixed_point.features, dtype=np.float64).reshape(1, -1)
    if feats.shape[1] != dist.dim:
        raise DataError(f"fixed point dim {feats.shape[1]} != dist dim {dist.dim}")
    if n_others == 0:
        return LabeledDataset((fixed_point.id,), [fixed_point.label], dist.n_classes, feats)
    others = sample_dataset(dist, n_others, seed, id_prefix=f"cmp{seed}")
    if fixed_point.id in others.ids:
        raise DataError(f"fixed point id {fixed_point.id!r} collides with sampled ids")
    return LabeledDataset(
        (fixed_point.id,) + others.ids,
        np.concatenate([[fixed_point.label], others.labels]),
        dist.n_classes,
        np.vstack([feats, others.features]),
    )


# ---------------------------------------------------------------------------
# Synthetic kernels


def _symmetrize_upper(k: np.ndarray) -> np.ndarray:
    # Copy the upper triangle onto the lower one so K[i,j] == K[j,i] exactly.
    upper = np.triu(k, 1)
    return upper + upper.T + np.diag(np.diag(k))


def synth_kernel(
    dataset_train: LabeledDataset,
    dataset_test: LabeledDataset,
    kind: str = "rbf",
    bandwidth: float | None = None,
) -> KernelStore:
    """Layout-0 store with k(x,x') = <x,x'> (linear) or exp(-|x-x'|^2 / 2bw^2) (rbf)."""
    if dataset_train.features is None or dataset_test.features is None:
        raise DataError("both datasets must carry features")
    xt, xq = dataset_train.features, dataset_test.features
    if xt.shape[1] != xq.shape[1]:
        raise DataError(f"feature dims differ: {xt.shape[1]} vs {xq.shape[1]}")
    if dataset_train.n_classes != dataset_test.n_classes:
        raise DataError("train/test class counts differ")
    n, m = xt.shape[0], xq.shape[0]
    x_all = np.vstack([xt, xq])

    if kind == "linear":
        k = x_all @ xt.T
    elif kind == "rbf":
        # Unit bandwidth matches the synthetic generators' unit covariance
        # scale and keeps the train-train block well conditioned; pass an
        # explicit bandwidth for differently scaled features.
        if bandwidth is None:
            bandwidth = 1.0
        if bandwidth <= 0:
            raise DataError(f"bandwidth must be > 0, got {bandwidth}")
        sq = (
            np.sum(x_all**2, axis=1)[:, None]
            + np.sum(xt**2, axis=1)[None, :]
            - 2.0 * (x_all @ xt.T)
        )
        np.maximum(sq, 0.0, out=sq)
        k = np.exp(-sq / (2.0 * bandwidth**2))
        k[np.arange(n), np.arange(n)] = 1.0
    else:
        raise DataError(f"unknown kernel kind {kind!r}")

    k[:n, :n] = _symmetrize_upper(k[:n, :n])
    return KernelStore(n, m, dataset_train.n_classes, Layout.SHARED0, k)


def make_benchmark(
    n_train: int,
    n_test: int,
    seed: int,
    dist: DistributionSpec | None = None,
    kind: str = "rbf",
    bandwidth: float | None = None,
) -> tuple[LabeledDataset, LabeledDataset, KernelStore]:
    """Canonical synthetic benchmark: train from ``dist``, clean-labelled test."""
    dist = dist if dist is not None else benchmark_distribution()
    train = sample_dataset(dist, n_train, seed, id_prefix="tr")
    test = sample_dataset(dist.clean(), n_test, seed + 1, id_prefix="te")
    store = synth_kernel(train, test, kind=kind, bandwidth=bandwidth)
    return train, test, store
