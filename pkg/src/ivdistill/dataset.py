"""Data ingestion and instrument-keyed subsample views.

A :class:`Dataset` holds the observational data (outcome, binary treatment,
covariate matrix, discrete instrument, positive weights).  Instrument codes
are recoded to ``0..K-1`` in ascending numeric order of the original codes;
the ordering matters downstream where neighbouring instrument values are
paired.  Weights are first class: counts, shares and test statistics all use
weight sums, which supports cell-aggregated data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


class DataValidationError(ValueError):
    """Raised when input data violates the dataset contract."""


@dataclass(frozen=True)
class Dataset:
    """Validated observational data.

    Attributes
    ----------
    y : ndarray, shape (n,)
        Real outcome.
    d : ndarray, shape (n,)
        Binary treatment in {0, 1}.
    x : ndarray, shape (n, k)
        Covariate matrix (numeric design columns, no intercept).
    z : ndarray, shape (n,)
        Instrument recoded to 0..K-1 (ascending original codes).
    weight : ndarray, shape (n,)
        Positive observation weights (1 for individual-level data).
    z_levels : ndarray, shape (K,)
        Original instrument codes, ascending; ``z_levels[z[i]]`` recovers
        the original code of row i.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    z: np.ndarray
    weight: np.ndarray
    z_levels: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k_x(self) -> int:
        return self.x.shape[1]

    @property
    def n_levels(self) -> int:
        return self.z_levels.shape[0]

    def total_weight(self) -> float:
        return float(self.weight.sum())


def make_dataset(y, d, x, z, weight=None) -> Dataset:
    """Validate raw arrays and build an immutable :class:`Dataset`.

    Raises :class:`DataValidationError` on shape mismatches, non-binary
    treatment, non-positive weights or non-finite values.  A single
    instrument level, or a level lacking treated or untreated observations,
    is a warning rather than an error: downstream tests reject such data.
    """
    y = np.asarray(y, dtype=float).ravel()
    d_raw = np.asarray(d).ravel()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != y.shape[0] and x.shape[1] == y.shape[0]:
        x = x.T
    z_raw = np.asarray(z).ravel()
    n = y.shape[0]
    if n < 2:
        raise DataValidationError(f"need at least 2 observations, got {n}")
    if d_raw.shape[0] != n or z_raw.shape[0] != n or x.shape[0] != n:
        raise DataValidationError("y, d, x, z must have matching lengths")
    if weight is None:
        w = np.ones(n)
    else:
        w = np.asarray(weight, dtype=float).ravel()
        if w.shape[0] != n:
            raise DataValidationError("weight length mismatch")
    for name, arr in (("y", y), ("x", x), ("weight", w)):
        if not np.all(np.isfinite(arr)):
            rows = np.unique(np.nonzero(~np.isfinite(np.atleast_2d(arr.T)))[-1])
            raise DataValidationError(f"non-finite values in {name} at rows {rows[:10].tolist()}")
    d_num = np.asarray(d_raw, dtype=float)
    if not np.all(np.isfinite(d_num)) or not np.all(np.isin(d_num, (0.0, 1.0))):
        bad = np.nonzero(~np.isin(d_num, (0.0, 1.0)))[0]
        raise DataValidationError(f"treatment must be binary 0/1; offending rows {bad[:10].tolist()}")
    d_arr = d_num.astype(np.int8)
    if np.any(w <= 0):
        bad = np.nonzero(w <= 0)[0]
        raise DataValidationError(f"weights must be positive; offending rows {bad[:10].tolist()}")
    z_num = np.asarray(z_raw, dtype=float)
    if not np.all(np.isfinite(z_num)) or np.any(z_num != np.round(z_num)):
        bad = np.nonzero(~np.isfinite(z_num) | (z_num != np.round(z_num)))[0]
        raise DataValidationError(f"instrument must be integer-coded; offending rows {bad[:10].tolist()}")
    if np.any(z_num < 0):
        bad = np.nonzero(z_num < 0)[0]
        raise DataValidationError(f"instrument codes must be nonnegative; offending rows {bad[:10].tolist()}")
    levels, z_arr = np.unique(z_num.astype(np.int64), return_inverse=True)

    if levels.shape[0] < 2:
        warnings.warn("instrument has a single level; validity tests will reject this data")
    else:
        for lev_idx, lev in enumerate(levels):
            sub_d = d_arr[z_arr == lev_idx]
            if sub_d.size and (sub_d.min() == sub_d.max()):
                warnings.warn(
                    f"instrument level {lev} has no "
                    f"{'untreated' if sub_d[0] == 1 else 'treated'} observations"
                )

    for arr in (y, d_arr, x, z_arr, w, levels):
        arr.setflags(write=False)
    return Dataset(y=y, d=d_arr, x=x, z=z_arr.astype(np.int64), weight=w, z_levels=levels)


def load_csv(path, schema: dict) -> Dataset:
    """Load a CSV into a :class:`Dataset` using a column-name mapping.

    Parameters
    ----------
    path : str or Path
        CSV file with a header row (UTF-8, '.' decimal point).
    schema : dict
        Keys ``y``, ``d``, ``z`` map to column names, ``x`` to a list of
        column names, and optional ``weight`` to a weight column.

    Rows with missing values in any mapped column are dropped (listwise
    deletion) and reported with their 1-based data row numbers.
    """
    required = {"y", "d", "z", "x"}
    missing_keys = required - set(schema)
    if missing_keys:
        raise DataValidationError(f"schema missing keys: {sorted(missing_keys)}")
    x_cols = list(schema["x"])
    cols = [schema["y"], schema["d"], schema["z"], *x_cols]
    if schema.get("weight"):
        cols.append(schema["weight"])
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataValidationError(f"failed to parse {path}: {exc}") from exc
    absent = [c for c in cols if c not in frame.columns]
    if absent:
        raise DataValidationError(f"columns not found in {path}: {absent}")
    sub = frame[cols].apply(pd.to_numeric, errors="coerce")
    keep = sub.notna().all(axis=1)
    if not keep.all():
        dropped = (np.nonzero(~keep.to_numpy())[0] + 1).tolist()
        warnings.warn(f"dropped {len(dropped)} rows with missing values (data rows {dropped[:20]})")
        sub = sub[keep]
    if len(sub) < 2:
        raise DataValidationError("fewer than 2 complete rows after listwise deletion")
    return make_dataset(
        y=sub[schema["y"]].to_numpy(),
        d=sub[schema["d"]].to_numpy(),
        x=sub[x_cols].to_numpy(),
        z=sub[schema["z"]].to_numpy(),
        weight=sub[schema["weight"]].to_numpy() if schema.get("weight") else None,
    )


@dataclass(frozen=True)
class SubsampleView:
    """Read-only view of one instrument level.

    ``n1`` is the weighted count of this level, ``n0`` the weighted count of
    the rest of the sample, and ``lam_hat = n1 / (n0 + n1)`` the weighted
    share of the level.
    """

    parent: Dataset = field(repr=False)
    level: int
    indices: np.ndarray
    n1: float
    n0: float

    @property
    def lam_hat(self) -> float:
        return self.n1 / (self.n0 + self.n1)


def split_by_instrument(ds: Dataset) -> list[SubsampleView]:
    """Partition the dataset into one view per instrument level."""
    total = ds.total_weight()
    views = []
    for lev_idx in range(ds.n_levels):
        idx = np.nonzero(ds.z == lev_idx)[0]
        w_own = float(ds.weight[idx].sum())
        idx.setflags(write=False)
        views.append(SubsampleView(parent=ds, level=lev_idx, indices=idx, n1=w_own, n0=total - w_own))
    return views
