"""Input validation helpers shared by the data types and the estimator API."""

import numpy as np

from .exceptions import DataError, DomainError, SizeError

__all__ = ["as_float_matrix", "as_float_vector", "check_treatment_labels",
           "check_unit_index", "check_finite"]


def as_float_matrix(a, name, min_rows=1, min_cols=1):
    """Coerce to a 2-d float64 array and reject non-finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be a 2-d array, got ndim={arr.ndim}")
    if arr.shape[0] < min_rows or arr.shape[1] < min_cols:
        raise SizeError(
            f"{name} must be at least {min_rows}x{min_cols}, got {arr.shape[0]}x{arr.shape[1]}"
        )
    check_finite(arr, name)
    return arr


def as_float_vector(a, name, length=None):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{name} must be a 1-d array, got ndim={arr.ndim}")
    if length is not None and arr.shape[0] != length:
        raise SizeError(f"{name} must have length {length}, got {arr.shape[0]}")
    check_finite(arr, name)
    return arr


def check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(arr)))[0]
        raise DataError(f"{name} contains a non-finite entry at index {tuple(bad)}")


def check_treatment_labels(s, name="s", n_levels=None):
    """Validate treatment labels: integers in {0, ..., J}.

    Returns the labels as an int array and the number of levels J + 1
    (``n_levels`` when declared, else inferred as max(s) + 1).
    """
    arr = np.asarray(s)
    if arr.ndim != 1:
        raise DataError(f"{name} must be a 1-d array, got ndim={arr.ndim}")
    as_int = np.asarray(np.rint(np.asarray(arr, dtype=np.float64)), dtype=np.int64)
    if not np.array_equal(np.asarray(arr, dtype=np.float64), as_int):
        raise DomainError(f"{name} must contain integer treatment labels")
    if as_int.min(initial=0) < 0:
        raise DomainError(f"{name} contains a negative treatment label")
    if n_levels is not None and as_int.max(initial=0) >= n_levels:
        raise DomainError(
            f"{name} contains label {as_int.max()} outside the declared "
            f"{{0, ..., {n_levels - 1}}}"
        )
    inferred = int(as_int.max(initial=0)) + 1
    return as_int, (int(n_levels) if n_levels is not None else inferred)


def check_unit_index(i, n, name="unit"):
    if not 0 <= int(i) < n:
        raise SizeError(f"{name} index {i} out of range for n={n}")
    return int(i)
