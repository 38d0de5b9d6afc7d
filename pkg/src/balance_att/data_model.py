"""Datasets, CSV ingestion and covariate expansion."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

KINDS = ("continuous", "dummy", "intercept", "derived")


class DataError(ValueError):
    """Raised when input data violate the dataset contract."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome, binary treatment and an ``n x p`` covariate matrix.

    Arrays are copied and marked read-only on construction, so a Dataset can
    be shared between workers without defensive copies.
    """

    y: np.ndarray
    d: np.ndarray
    X: np.ndarray
    col_names: tuple = ()
    intercept_index: Optional[int] = None
    col_kinds: tuple = ()

    def __post_init__(self):
        y = _frozen(self.y).ravel()
        d_raw = np.asarray(self.d, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else np.empty((y.size, 0))
        n = y.size
        if n < 2:
            raise DataError(f"need at least 2 observations, got {n}")
        if d_raw.size != n or X.shape[0] != n:
            raise DataError(
                f"length mismatch: y has {n}, d has {d_raw.size}, X has {X.shape[0]} rows"
            )
        for name, arr in (("y", y), ("d", d_raw), ("X", X)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {name}")
        if not np.all((d_raw == 0) | (d_raw == 1)):
            raise DataError("treatment not binary")
        n1 = int(d_raw.sum())
        if n1 == 0 or n1 == n:
            raise DataError("sample must contain both treated and control units")

        p = X.shape[1]
        names = tuple(self.col_names) if self.col_names else tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} column names for {p} columns")
        if len(set(names)) != p:
            raise DataError("duplicate column names")
        kinds = tuple(self.col_kinds) if self.col_kinds else tuple(
            "intercept" if j == self.intercept_index else "continuous" for j in range(p)
        )
        if len(kinds) != p or any(k not in KINDS for k in kinds):
            raise DataError(f"invalid column kinds {kinds!r}")
        if self.intercept_index is not None:
            j = self.intercept_index
            if not 0 <= j < p:
                raise DataError(f"intercept index {j} out of range")
            if not np.all(X[:, j] == 1.0):
                raise DataError(f"intercept column {names[j]!r} is not identically 1")

        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", _frozen(d_raw))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "col_names", names)
        object.__setattr__(self, "col_kinds", kinds)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n1(self) -> int:
        return int(self.d.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def treated(self) -> np.ndarray:
        return self.d == 1

    def with_outcome(self, y) -> "Dataset":
        return Dataset(y, self.d, self.X, self.col_names, self.intercept_index, self.col_kinds)

    def select(self, columns: Sequence[Union[int, str]]) -> "Dataset":
        """Dataset restricted to the given columns (names or indices), in that order."""
        idx = [self.col_names.index(c) if isinstance(c, str) else int(c) for c in columns]
        icpt = idx.index(self.intercept_index) if self.intercept_index in idx else None
        return Dataset(
            self.y,
            self.d,
            self.X[:, idx],
            tuple(self.col_names[j] for j in idx),
            icpt,
            tuple(self.col_kinds[j] for j in idx),
        )


@dataclass(frozen=True)
class ExpansionSpec:
    continuous_cols: Sequence[str] = ()
    dummy_cols: Sequence[str] = ()
    max_power: int = 5
    include_cont_x_dummy: bool = True
    include_dummy_x_dummy: bool = True
    rescale_continuous: bool = True


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Read a header + numeric body CSV into (names, float matrix)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"{path}:{lineno}: missing value in column {name!r}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric cell {cell!r} in column {name!r}"
                    ) from None
            rows.append(vals)
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    body = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, body


def _is_dummy(col: np.ndarray) -> bool:
    return bool(np.all((col == 0) | (col == 1)))


def load_csv(path, outcome: str, treatment: str, covariates="rest") -> Dataset:
    """Load a Dataset from CSV.

    ``covariates`` is a list of column names, or ``"rest"`` for every column
    other than the outcome and treatment (in file order). Columns holding only
    0/1 values are tagged ``dummy``, a column of ones ``intercept``, everything
    else ``continuous``.
    """
    header, body = read_table(path)
    for name in (outcome, treatment):
        if name not in header:
            raise DataError(f"missing column {name!r}")
    if isinstance(covariates, str):
        if covariates != "rest":
            covariates = [c.strip() for c in covariates.split(",") if c.strip()]
        else:
            covariates = [h for h in header if h not in (outcome, treatment)]
    for name in covariates:
        if name not in header:
            raise DataError(f"missing column {name!r}")
    d = body[:, header.index(treatment)]
    if not np.all((d == 0) | (d == 1)):
        raise DataError("treatment not binary")
    idx = [header.index(c) for c in covariates]
    X = body[:, idx] if idx else np.empty((body.shape[0], 0))
    kinds, icpt = [], None
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.all(col == 1.0) and icpt is None:
            kinds.append("intercept")
            icpt = j
        elif _is_dummy(col):
            kinds.append("dummy")
        else:
            kinds.append("continuous")
    return Dataset(body[:, header.index(outcome)], d, X, tuple(covariates), icpt, tuple(kinds))


def add_intercept(ds: Dataset) -> Dataset:
    """Prepend a column of ones named ``(intercept)``."""
    if ds.intercept_index is not None:
        raise DataError("dataset already has an intercept")
    X = np.column_stack([np.ones(ds.n), ds.X])
    return Dataset(
        ds.y, ds.d, X, ("(intercept)",) + ds.col_names, 0, ("intercept",) + ds.col_kinds
    )


def expand_covariates(ds: Dataset, spec: ExpansionSpec) -> Dataset:
    """Append rescaled originals, interactions and powers.

    The original columns keep their positions (continuous ones rescaled to
    [0, 1] on the pooled sample when requested). Appended after them, in
    order: continuous x dummy products, dummy x dummy products over unordered
    pairs, and powers ``2..max_power`` of each continuous column.
    """
    cont, dums = list(spec.continuous_cols), list(spec.dummy_cols)
    if spec.max_power < 1:
        raise DataError("max_power must be >= 1")
    for name in cont + dums:
        if name not in ds.col_names:
            raise DataError(f"missing column {name!r}")
    if set(cont) & set(dums) or len(set(cont)) != len(cont) or len(set(dums)) != len(dums):
        raise DataError("continuous and dummy column lists must be disjoint and unique")
    col = {name: ds.X[:, ds.col_names.index(name)] for name in cont + dums}
    for name in dums:
        if not _is_dummy(col[name]):
            raise DataError(f"dummy column {name!r} has values outside {{0, 1}}")
    if spec.rescale_continuous:
        for name in cont:
            lo, hi = col[name].min(), col[name].max()
            if hi == lo:
                raise DataError(f"cannot rescale constant column {name!r}")
            col[name] = (col[name] - lo) / (hi - lo)

    names = list(ds.col_names)
    kinds = list(ds.col_kinds)
    cols = [col[nm] if nm in col else ds.X[:, j] for j, nm in enumerate(names)]

    def push(name, values):
        if name in names:
            raise DataError(f"duplicate generated column name {name!r}")
        names.append(name)
        kinds.append("derived")
        cols.append(values)

    if spec.include_cont_x_dummy:
        for a in cont:
            for b in dums:
                push(f"{a}*{b}", col[a] * col[b])
    if spec.include_dummy_x_dummy:
        for a, b in itertools.combinations(dums, 2):
            push(f"{a}*{b}", col[a] * col[b])
    for a in cont:
        for k in range(2, spec.max_power + 1):
            push(f"{a}^{k}", col[a] ** k)

    X = np.column_stack(cols) if cols else np.empty((ds.n, 0))
    return Dataset(ds.y, ds.d, X, tuple(names), ds.intercept_index, tuple(kinds))


def write_csv(path, ds: Dataset, outcome: str = "y", treatment: str = "d") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([outcome, treatment, *ds.col_names])
        for i in range(ds.n):
            w.writerow([repr(float(ds.y[i])), int(ds.d[i]), *(repr(float(v)) for v in ds.X[i])])
