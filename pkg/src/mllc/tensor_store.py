"""Matrix containers, validation, seeded RNG and strict NPY v1.0 I/O.

Matrices are plain C-ordered ``float64`` / ``int64`` numpy arrays. The
``check_*`` helpers enforce the invariants each role carries (finite
features, row-stochastic probabilities, label ranges) and return the array
as a read-only view so downstream code cannot mutate shared inputs.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib import format as npy_format

IGNORE = -1
PROB_ATOL = 1e-9

_SUPPORTED_DTYPES = {np.dtype("<f8"), np.dtype("<i8")}


class NpyFormatError(ValueError):
    """File is not a well-formed NPY v1.0 file."""


class NpyUnsupportedError(ValueError):
    """Well-formed NPY file using a dtype, order or rank we do not read."""


class ValidationError(ValueError):
    """Matrix violates an invariant of its role; ``row`` names the first offender."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


@dataclass(frozen=True)
class GridShape:
    H: int
    W: int
    C: int
    m: int

    def __post_init__(self):
        for name in ("H", "W", "C", "m"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"GridShape.{name} must be positive, got {getattr(self, name)}")

    @property
    def n(self) -> int:
        return self.H * self.W


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    view = a.view()
    view.flags.writeable = False
    return view


def _first_bad_row(mask: np.ndarray) -> int:
    rows = np.flatnonzero(mask)
    return int(rows[0]) if rows.size else -1


def check_features(x, grid: GridShape | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"feature matrix must be 2-D, got shape {x.shape}")
    bad = ~np.isfinite(x).all(axis=1)
    if bad.any():
        raise ValidationError("non-finite feature entry", _first_bad_row(bad))
    if grid is not None and x.shape[0] != grid.n:
        raise ValidationError(f"feature rows {x.shape[0]} != H*W = {grid.n}")
    return _frozen(x)


def check_probs(p, num_classes: int | None = None, atol: float = PROB_ATOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValidationError(f"probability matrix must be 2-D, got shape {p.shape}")
    if num_classes is not None and p.shape[1] != num_classes:
        raise ValidationError(f"expected {num_classes} classes, got {p.shape[1]}")
    bad = ~np.isfinite(p).all(axis=1) | (p < 0).any(axis=1) | (p > 1).any(axis=1)
    if bad.any():
        raise ValidationError("probability entry outside [0, 1]", _first_bad_row(bad))
    bad = np.abs(p.sum(axis=1) - 1.0) > atol
    if bad.any():
        raise ValidationError("probability row does not sum to 1", _first_bad_row(bad))
    return _frozen(p)


def check_labels(y, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValidationError(f"label map must be 1-D, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValidationError(f"label map must be integer, got {y.dtype}")
    y = y.astype(np.int64)
    bad = (y < 0) & (y != IGNORE)
    if num_classes is not None:
        bad |= y >= num_classes
    if bad.any():
        raise ValidationError("label out of range", _first_bad_row(bad))
    return _frozen(y)


_CHECKS = {"features": check_features, "probs": check_probs, "labels": check_labels}


def load_npy(path, kind: str | None = None) -> np.ndarray:
    """Read a rank-1/2 ``<f8``/``<i8`` C-order NPY v1.0 file.

    ``kind`` ("features", "probs" or "labels") additionally validates the
    role invariants and raises :class:`ValidationError` naming the row.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        try:
            version = npy_format.read_magic(fh)
        except ValueError as exc:
            raise NpyFormatError(f"{path}: {exc}") from None
        if version != (1, 0):
            raise NpyUnsupportedError(f"{path}: NPY version {version} not supported (need 1.0)")
        try:
            shape, fortran_order, dtype = npy_format.read_array_header_1_0(fh)
        except ValueError as exc:
            raise NpyFormatError(f"{path}: {exc}") from None
        if dtype not in _SUPPORTED_DTYPES:
            raise NpyUnsupportedError(f"{path}: dtype {dtype.str} not supported")
        if fortran_order:
            raise NpyUnsupportedError(f"{path}: Fortran-order arrays not supported")
        if len(shape) not in (1, 2):
            raise NpyUnsupportedError(f"{path}: rank {len(shape)} not supported")
        count = int(np.prod(shape))
        raw = fh.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise NpyFormatError(f"{path}: truncated data ({len(raw)} of {count * dtype.itemsize} bytes)")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if kind is not None:
        return _CHECKS[kind](arr)
    return arr


def save_npy(matrix, path) -> None:
    arr = np.asarray(matrix)
    if np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype("<f8")
        if not np.isfinite(arr).all():
            raise ValidationError("refusing to save non-finite matrix")
    elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        arr = arr.astype("<i8")
    else:
        raise NpyUnsupportedError(f"dtype {arr.dtype} not supported")
    if arr.ndim not in (1, 2):
        raise NpyUnsupportedError(f"rank {arr.ndim} not supported")
    arr = np.ascontiguousarray(arr)
    path = os.fspath(path)
    try:
        with open(path, "wb") as fh:
            npy_format.write_array(fh, arr, version=(1, 0), allow_pickle=False)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write NPY file {path}: {exc.strerror}") from exc


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; reproducible across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def fork_rng(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Independent child streams for parallel work."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(count)]
