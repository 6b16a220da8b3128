"""Precomputed kernel matrices: layouts, slicing, and the binary file format.

A store holds K(X_{train+test}, X_train) in one of three layouts:

* layout 0 (``SHARED0``): one ``(n+m, n)`` block shared by every class;
* layout 1 (``PER_CLASS1``): ``C`` blocks of shape ``(n+m, n)``, one per class;
* layout 2 (``FULL2``): one ``((n+m)*C, n*C)`` block indexed ``point*C + class``
  (class-major within point).

Rows ``0..n-1`` are training rows, rows ``n..n+m-1`` are test rows.

File format (bit-exact): 8 ASCII magic bytes ``ENTKFMT1``, then little-endian
u32 version (=1), u32 n_train, u32 n_test, u32 n_classes, u8 layout, 3 zero pad
bytes, then the block(s) as row-major little-endian float64 (layout 1 stores
class blocks consecutively).
"""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass, field
import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    NonFiniteEntryError,
    TrailingBytesError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"ENTKFMT1"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIB3x")

# Train-train asymmetry beyond this is reported (load keeps going: floating
# point extractors may legitimately break exact symmetry).
SYMMETRY_ATOL = 1e-9


class KernelSymmetryWarning(UserWarning):
    pass


class Layout(enum.IntEnum):
    SHARED0 = 0
    PER_CLASS1 = 1
    FULL2 = 2


def _expected_shape(layout: Layout, n: int, m: int, c: int) -> tuple[int, ...]:
    if layout == Layout.SHARED0:
        return (n + m, n)
    if layout == Layout.PER_CLASS1:
        return (c, n + m, n)
    return ((n + m) * c, n * c)


@dataclass(frozen=True)
class KernelStore:
    """Immutable container for a precomputed kernel matrix."""

    n_train: int
    n_test: int
    n_classes: int
    layout: Layout
    block: np.ndarray

    def __post_init__(self):
        n, m, c = self.n_train, self.n_test, self.n_classes
        if n < 1 or m < 0 or c < 1:
            raise DataError(f"bad kernel dims n={n} m={m} C={c}")
        layout = Layout(self.layout)
        object.__setattr__(self, "layout", layout)
        block = np.ascontiguousarray(self.block, dtype=np.float64)
        want = _expected_shape(layout, n, m, c)
        if block.shape != want:
            raise DataError(
                f"kernel block shape {block.shape} != {want} for layout {int(layout)}"
            )
        if not np.isfinite(block).all():
            raise NonFiniteEntryError("kernel contains NaN/Inf entries")
        block.flags.writeable = False
        object.__setattr__(self, "block", block)
        self._warn_if_asymmetric()

    def _train_train_views(self):
        n, c = self.n_train, self.n_classes
        if self.layout == Layout.SHARED0:
            return [self.block[:n, :n]]
        if self.layout == Layout.PER_CLASS1:
            return [self.block[k, :n, :n] for k in range(c)]
        return [self.block[: n * c, : n * c]]

    def _warn_if_asymmetric(self):
        for view in self._train_train_views():
            err = float(np.max(np.abs(view - view.T))) if view.size else 0.0
            if err > SYMMETRY_ATOL:
                warnings.warn(
                    f"train-train block asymmetric (max |K-K^T| = {err:.3e})",
                    KernelSymmetryWarning,
                    stacklevel=3,
                )

    @property
    def n_rows(self) -> int:
        return self.n_train + self.n_test

    def train_rows(self) -> "IndexSlice":
        return IndexSlice(range(self.n_train))

    def test_rows(self) -> "IndexSlice":
        return IndexSlice(range(self.n_train, self.n_train + self.n_test))

    def shared_block(self) -> np.ndarray:
        """The single (n+m, n) block of a SHARED0 store."""
        if self.layout != Layout.SHARED0:
            raise DataError(f"store has layout {int(self.layout)}, not SHARED0")
        return self.block


@dataclass(frozen=True)
class IndexSlice:
    """An ordered, duplicate-free list of row or column indices."""

    indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __post_init__(self):
        idx = np.asarray(
            list(self.indices) if not isinstance(self.indices, np.ndarray) else self.indices,
            dtype=np.int64,
        ).ravel()
        if idx.size and len(np.unique(idx)) != idx.size:
            raise DataError("duplicate indices in slice")
        if idx.size and idx.min() < 0:
            raise DataError("negative index in slice")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return int(self.indices.size)

    def __iter__(self):
        return iter(self.indices.tolist())


def _check_range(idx: np.ndarray, limit: int, what: str):
    if idx.size and int(idx.max()) >= limit:
        raise DataError(f"{what} index {int(idx.max())} out of range (< {limit})")


def _as_slice(x) -> IndexSlice:
    return x if isinstance(x, IndexSlice) else IndexSlice(x)


def slice_kernel(store: KernelStore, rows, cols, cls: int | None = None) -> np.ndarray:
    """Dense submatrix K[rows, cols] with rows/cols in the given order.

    ``rows`` are global row indices (train or test), ``cols`` are training
    indices.  For PER_CLASS1 the requested class block is used (``cls`` is
    required); for SHARED0 the single block serves every class.  For FULL2,
    an integer ``cls`` picks the per-point entries of that class while
    ``cls=None`` returns the expanded (len(rows)*C, len(cols)*C) block.
    """
    rows, cols = _as_slice(rows), _as_slice(cols)
    _check_range(rows.indices, store.n_rows, "row")
    _check_range(cols.indices, store.n_train, "column")
    if cls is not None and not (0 <= cls < store.n_classes):
        raise DataError(f"class {cls} out of range (< {store.n_classes})")

    if store.layout == Layout.SHARED0:
        return store.block[np.ix_(rows.indices, cols.indices)].copy()
    if store.layout == Layout.PER_CLASS1:
        if cls is None:
            raise DataError("PER_CLASS1 slicing requires an explicit class")
        return store.block[cls][np.ix_(rows.indices, cols.indices)].copy()

    c = store.n_classes
    if cls is not None:
        r = rows.indices * c + cls
        k = cols.indices * c + cls
        return store.block[np.ix_(r, k)].copy()
    r = (rows.indices[:, None] * c + np.arange(c)).ravel()
    k = (cols.indices[:, None] * c + np.arange(c)).ravel()
    return store.block[np.ix_(r, k)].copy()


def write_kernel(store: KernelStore, path) -> None:
    header = _HEADER.pack(
        MAGIC, VERSION, store.n_train, store.n_test, store.n_classes, int(store.layout)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(store.block, dtype="<f8").tobytes())


def read_kernel(path) -> KernelStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"file shorter than {_HEADER.size}-byte header")
    magic, version, n, m, c, layout_code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    try:
        layout = Layout(layout_code)
    except ValueError:
        raise DataError(f"unknown layout code {layout_code}") from None
    shape = _expected_shape(layout, n, m, c)
    want = int(np.prod(shape)) * 8
    payload = raw[_HEADER.size:]
    if len(payload) < want:
        raise TruncatedPayloadError(f"payload {len(payload)} B < declared {want} B")
    if len(payload) > want:
        raise TrailingBytesError(f"payload {len(payload)} B > declared {want} B")
    block = np.frombuffer(payload, dtype="<f8").reshape(shape)
    return KernelStore(n, m, c, layout, block)
