import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernval.errors import (
    BadMagicError,
    DataError,
    NonFiniteEntryError,
    TrailingBytesError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from kernval.kernelstore import (
    IndexSlice,
    KernelStore,
    KernelSymmetryWarning,
    Layout,
    read_kernel,
    slice_kernel,
    write_kernel,
)


def shared_store(n=4, m=2, c=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n + m, 3))
    block = x @ x[:n].T  # symmetric train-train part
    return KernelStore(n, m, c, Layout.SHARED0, block)


def test_round_trip_small_shared0_is_bit_identical(tmp_path):
    block = np.array([[1.0, 0.25], [0.25, 2.0], [0.5, -0.125]])
    store = KernelStore(2, 1, 2, Layout.SHARED0, block)
    path = tmp_path / "k.entk"
    write_kernel(store, path)
    loaded = read_kernel(path)
    assert loaded.n_train == 2 and loaded.n_test == 1 and loaded.n_classes == 2
    assert loaded.layout == Layout.SHARED0
    assert loaded.block.tobytes() == store.block.tobytes()


@pytest.mark.parametrize("layout", list(Layout))
def test_round_trip_all_layouts(tmp_path, layout):
    rng = np.random.default_rng(7)
    n, m, c = 3, 2, 2
    if layout == Layout.SHARED0:
        block = rng.standard_normal((n + m, n))
        block[:n] = (block[:n] + block[:n].T) / 2
    elif layout == Layout.PER_CLASS1:
        block = rng.standard_normal((c, n + m, n))
        for k in range(c):
            block[k, :n] = (block[k, :n] + block[k, :n].T) / 2
    else:
        block = rng.standard_normal(((n + m) * c, n * c))
        tt = block[: n * c]
        block[: n * c] = (tt + tt.T) / 2
    store = KernelStore(n, m, c, layout, block)
    path = tmp_path / "k.entk"
    write_kernel(store, path)
    loaded = read_kernel(path)
    assert loaded.layout == layout
    assert loaded.block.tobytes() == store.block.tobytes()


def test_bad_magic(tmp_path):
    store = shared_store()
    path = tmp_path / "k.entk"
    write_kernel(store, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_kernel(path)


def test_version_mismatch(tmp_path):
    store = shared_store()
    path = tmp_path / "k.entk"
    write_kernel(store, path)
    raw = bytearray(path.read_bytes())
    raw[8] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_kernel(path)


def test_truncated_payload(tmp_path):
    store = shared_store()
    path = tmp_path / "k.entk"
    write_kernel(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-9])
    with pytest.raises(TruncatedPayloadError):
        read_kernel(path)


def test_trailing_bytes(tmp_path):
    store = shared_store()
    path = tmp_path / "k.entk"
    write_kernel(store, path)
    path.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(TrailingBytesError):
        read_kernel(path)


def test_non_finite_entry(tmp_path):
    store = shared_store()
    path = tmp_path / "k.entk"
    write_kernel(store, path)
    raw = bytearray(path.read_bytes())
    raw[28:36] = np.array([np.nan]).tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(NonFiniteEntryError):
        read_kernel(path)


def test_asymmetric_train_block_warns_not_raises():
    block = np.array([[1.0, 0.5], [0.25, 1.0], [0.1, 0.2]])
    with pytest.warns(KernelSymmetryWarning):
        store = KernelStore(2, 1, 2, Layout.SHARED0, block)
    assert store.n_train == 2


def test_index_slice_rejects_duplicates_and_negatives():
    with pytest.raises(DataError):
        IndexSlice([1, 1])
    with pytest.raises(DataError):
        IndexSlice([-1, 2])


def test_slice_definitional_blocks():
    store = shared_store(n=4, m=3)
    test_rows = store.test_rows()
    s = IndexSlice([0, 2])
    got = slice_kernel(store, test_rows, s)
    assert got.shape == (3, 2)
    np.testing.assert_array_equal(got, store.block[4:, [0, 2]])

    full = slice_kernel(store, store.train_rows(), store.train_rows())
    np.testing.assert_array_equal(full, store.block[:4, :4])


def test_slice_row_order_contract():
    store = shared_store(n=4, m=1)
    a = slice_kernel(store, IndexSlice([2, 0]), IndexSlice([0, 1]))
    b = slice_kernel(store, IndexSlice([0, 2]), IndexSlice([0, 1]))
    np.testing.assert_array_equal(a[::-1], b)


def test_slice_out_of_range():
    store = shared_store(n=4, m=2)
    with pytest.raises(DataError):
        slice_kernel(store, IndexSlice([6]), IndexSlice([0]))
    with pytest.raises(DataError):
        slice_kernel(store, IndexSlice([0]), IndexSlice([4]))  # test row as column


def test_per_class_requires_class():
    rng = np.random.default_rng(0)
    block = rng.standard_normal((2, 5, 3))
    for k in range(2):
        block[k, :3] = (block[k, :3] + block[k, :3].T) / 2
    store = KernelStore(3, 2, 2, Layout.PER_CLASS1, block)
    with pytest.raises(DataError):
        slice_kernel(store, IndexSlice([0]), IndexSlice([0]))
    got = slice_kernel(store, IndexSlice([0, 4]), IndexSlice([1]), cls=1)
    np.testing.assert_array_equal(got, block[1][[0, 4]][:, [1]])


def test_full2_class_and_expanded_slices():
    n, m, c = 3, 1, 2
    k0 = np.arange((n + m) * n, dtype=float).reshape(n + m, n)
    k0[:n] = (k0[:n] + k0[:n].T) / 2
    full = np.kron(k0, np.eye(c))
    store = KernelStore(n, m, c, Layout.FULL2, full)
    got = slice_kernel(store, IndexSlice([0, 3]), IndexSlice([1]), cls=1)
    np.testing.assert_array_equal(got, k0[[0, 3]][:, [1]])
    expanded = slice_kernel(store, IndexSlice([1]), IndexSlice([0, 2]), cls=None)
    np.testing.assert_array_equal(expanded, np.kron(k0[[1]][:, [0, 2]], np.eye(c)))


def test_symmetric_slice_stays_symmetric_and_composes():
    store = shared_store(n=6, m=0)
    s = IndexSlice([4, 1, 3])
    sub = slice_kernel(store, s, s)
    np.testing.assert_array_equal(sub, sub.T)

    # slicing S' from slice(S, S) == slice(S', S') directly
    inner_positions = [2, 0]  # -> original indices [3, 4]
    nested = sub[np.ix_(inner_positions, inner_positions)]
    direct = slice_kernel(store, IndexSlice([3, 4]), IndexSlice([3, 4]))
    np.testing.assert_array_equal(nested, direct)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 5),
    m=st.integers(0, 3),
    c=st.integers(2, 3),
    layout=st.sampled_from(list(Layout)),
    seed=st.integers(0, 2**31),
)
def test_round_trip_property(tmp_path_factory, n, m, c, layout, seed):
    rng = np.random.default_rng(seed)
    if layout == Layout.SHARED0:
        block = rng.standard_normal((n + m, n))
        block[:n] = (block[:n] + block[:n].T) / 2
    elif layout == Layout.PER_CLASS1:
        block = rng.standard_normal((c, n + m, n))
        for k in range(c):
            block[k, :n] = (block[k, :n] + block[k, :n].T) / 2
    else:
        block = rng.standard_normal(((n + m) * c, n * c))
        tt = block[: n * c]
        block[: n * c] = (tt + tt.T) / 2
    store = KernelStore(n, m, c, layout, block)
    path = tmp_path_factory.mktemp("rt") / "k.entk"
    write_kernel(store, path)
    loaded = read_kernel(path)
    assert loaded.block.tobytes() == store.block.tobytes()
    assert (loaded.n_train, loaded.n_test, loaded.n_classes, loaded.layout) == (
        n, m, c, layout,
    )
