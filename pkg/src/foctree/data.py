"""Dataset container, CSV ingestion, standardization, and the interaction design.

The regression design for a row with covariates x (length d) and binary
treatment t is the length-(2d+2) vector [1, t, x_1..x_d, t*x_1..t*x_d].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _frozen_array(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Immutable (covariates, treatment, outcome) sample.

    x is n-by-d, t is a 0/1 vector of length n, y a real vector of length n.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        x = _frozen_array(self.x)
        t = _frozen_array(self.t)
        y = _frozen_array(self.y)
        if x.ndim != 2:
            raise ValueError(f"x must be 2-dimensional, got shape {x.shape}")
        n, d = x.shape
        if n < 1 or d < 1:
            raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        if t.shape != (n,) or y.shape != (n,):
            raise ValueError(
                f"shape mismatch: x is {x.shape}, t is {t.shape}, y is {y.shape}"
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ValueError("all entries of x, t, y must be finite")
        bad = np.nonzero((t != 0.0) & (t != 1.0))[0]
        if bad.size:
            raise ValueError(f"treatment must be 0/1; row {bad[0]} has t={t[bad[0]]}")
        names = tuple(str(s) for s in self.feature_names)
        if len(names) != d:
            raise ValueError(f"expected {d} feature names, got {len(names)}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def take(self, rows) -> "Dataset":
        """Row subset / resample (rows may repeat)."""
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.x[rows], self.t[rows], self.y[rows], self.feature_names)


@dataclass(frozen=True)
class DesignRow:
    """One row of the interaction design, laid out [1, t, x, t*x]."""

    z: np.ndarray

    def __post_init__(self):
        z = _frozen_array(self.z)
        if z.ndim != 1 or z.size < 4 or z.size % 2 != 0:
            raise ValueError(f"design row must have length 2d+2 >= 4, got {z.shape}")
        d = (z.size - 2) // 2
        if z[0] != 1.0:
            raise ValueError("design row must start with the constant 1")
        if z[1] not in (0.0, 1.0):
            raise ValueError(f"design row treatment entry must be 0/1, got {z[1]}")
        if not np.allclose(z[2 + d :], z[1] * z[2 : 2 + d], rtol=0, atol=0):
            raise ValueError("interaction block must equal t times the covariate block")
        object.__setattr__(self, "z", z)


def n_coefficients(d: int) -> int:
    """Number of regression coefficients for d covariates: 2d + 2."""
    return 2 * d + 2


def design_matrix(ds: Dataset) -> np.ndarray:
    """Full n-by-(2d+2) interaction design [1, t, x, t*x]."""
    n = ds.n
    ones = np.ones((n, 1))
    t = ds.t.reshape(n, 1)
    return np.hstack([ones, t, ds.x, t * ds.x])


def design_row(ds: Dataset, i: int) -> DesignRow:
    """Design vector of row i."""
    if not 0 <= i < ds.n:
        raise IndexError(f"row index {i} out of range for n={ds.n}")
    xi = ds.x[i]
    ti = ds.t[i]
    return DesignRow(np.concatenate([[1.0, ti], xi, ti * xi]))


def load_csv(path, outcome: str, treatment: str, covariates=None) -> Dataset:
    """Read a comma-delimited UTF-8 file with a header row into a Dataset.

    Column roles are given explicitly; when `covariates` is None every column
    other than the outcome and treatment is used, in header order. Treatment
    values must parse to exactly 0 or 1; any other value is an error naming
    the offending data row (1-based, excluding the header).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in (outcome, treatment):
            if col not in header:
                raise ValueError(f"{path}: column {col!r} not found in header {header}")
        if covariates is None:
            covariates = [h for h in header if h not in (outcome, treatment)]
        else:
            covariates = list(covariates)
            for col in covariates:
                if col not in header:
                    raise ValueError(f"{path}: covariate column {col!r} not in header")
        if not covariates:
            raise ValueError(f"{path}: empty covariate selection")
        idx_y = header.index(outcome)
        idx_t = header.index(treatment)
        idx_x = [header.index(c) for c in covariates]

        ys, ts, xs = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ValueError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}"
                )

            def cell(j, col):
                s = row[j].strip()
                if s == "":
                    raise ValueError(f"{path}: row {row_no}: missing value in column {col!r}")
                try:
                    return float(s)
                except ValueError:
                    raise ValueError(
                        f"{path}: row {row_no}: cannot parse {s!r} in column {col!r}"
                    ) from None

            tv = cell(idx_t, treatment)
            if tv not in (0.0, 1.0):
                raise ValueError(
                    f"{path}: row {row_no}: treatment value {row[idx_t].strip()!r} is not 0 or 1"
                )
            ys.append(cell(idx_y, outcome))
            ts.append(tv)
            xs.append([cell(j, c) for j, c in zip(idx_x, covariates)])
    if not ys:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(xs), np.array(ts), np.array(ys), tuple(covariates))


def save_csv(ds: Dataset, path, outcome: str = "y", treatment: str = "t") -> None:
    """Write a Dataset back to CSV with full float precision."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([outcome, treatment, *ds.feature_names])
        for i in range(ds.n):
            writer.writerow(
                [repr(float(ds.y[i])), repr(float(ds.t[i])), *(repr(float(v)) for v in ds.x[i])]
            )


@dataclass(frozen=True)
class Standardizer:
    """Per-column location/scale remembered so standardization can be undone."""

    means: np.ndarray
    sds: np.ndarray
    y_mean: float | None = None
    y_sd: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "means", _frozen_array(self.means))
        object.__setattr__(self, "sds", _frozen_array(self.sds))

    def invert(self, ds: Dataset) -> Dataset:
        x = ds.x * self.sds + self.means
        y = ds.y
        if self.y_sd is not None:
            y = y * self.y_sd + self.y_mean
        return Dataset(x, ds.t, y, ds.feature_names)


def standardize(ds: Dataset, include_outcome: bool = True) -> tuple[Dataset, Standardizer]:
    """Center and scale every covariate (and optionally the outcome) to unit
    sample standard deviation (n-1 denominator). The treatment column is
    never touched. A constant covariate is an error naming the column.
    """
    if ds.n < 2:
        raise ValueError("standardize needs at least 2 rows")
    means = ds.x.mean(axis=0)
    sds = ds.x.std(axis=0, ddof=1)
    zero = np.nonzero(sds <= 0.0)[0]
    if zero.size:
        raise ValueError(
            f"covariate {ds.feature_names[zero[0]]!r} has zero variance; cannot standardize"
        )
    x = (ds.x - means) / sds
    y_mean = y_sd = None
    y = ds.y
    if include_outcome:
        y_mean = float(ds.y.mean())
        y_sd = float(ds.y.std(ddof=1))
        if y_sd <= 0.0:
            raise ValueError("outcome has zero variance; cannot standardize it")
        y = (ds.y - y_mean) / y_sd
    out = Dataset(x, ds.t, y, ds.feature_names)
    return out, Standardizer(means, sds, y_mean, y_sd)
