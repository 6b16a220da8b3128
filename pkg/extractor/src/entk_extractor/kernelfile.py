"""Writer for the shared kernel file format.

The consumer contract (magic, header, payload layout) is fixed by the
valuation engine; this module reimplements the byte layout rather than
importing the engine, so the only coupling between the two packages is the
file itself.

Format: 8 ASCII magic bytes ``ENTKFMT1``; little-endian u32 version (=1),
u32 n_train, u32 n_test, u32 n_classes, u8 layout, 3 zero pad bytes; then
row-major little-endian float64 payload (layout 1 stores the class blocks
consecutively).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ENTKFMT1"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIB3x")


def write_kernel_file(path, n_train: int, n_test: int, n_classes: int,
                      layout: int, block: np.ndarray) -> None:
    block = np.ascontiguousarray(block, dtype="<f8")
    if layout == 0:
        expected = (n_train + n_test, n_train)
    elif layout == 1:
        expected = (n_classes, n_train + n_test, n_train)
    else:
        raise ValueError(f"unsupported layout {layout}")
    if block.shape != expected:
        raise ValueError(f"block shape {block.shape} != {expected}")
    if not np.isfinite(block).all():
        raise ValueError("kernel contains non-finite entries")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n_train, n_test, n_classes, layout))
        fh.write(block.tobytes())
