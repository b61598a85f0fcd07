"""Columnar datasets and the record layouts used by the shipped models."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import RecordValidationError


class LinearRecord(NamedTuple):
    """Covariate vector ``x`` and scalar response ``y``."""

    x: np.ndarray
    y: float


class IpwRecord(NamedTuple):
    """Covariates ``x`` (length d-1), treatment ``a`` in {0, 1} and outcome ``y``."""

    x: np.ndarray
    a: int
    y: float


class IvRecord(NamedTuple):
    """Instrument vector ``w`` (length k), endogenous ``x`` and response ``y``."""

    w: np.ndarray
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """n observations stored column-wise.

    Every column shares its leading axis with the others. Column names follow
    the record layout of the owning model, e.g. ``X``/``y`` for linear and
    logistic models, ``X``/``a``/``y`` for IPW and ``W``/``x``/``y`` for IV.
    """

    columns: Mapping[str, np.ndarray]

    def __post_init__(self):
        cols = {k: np.ascontiguousarray(v, dtype=float) for k, v in self.columns.items()}
        if not cols:
            raise RecordValidationError("dataset has no columns")
        lengths = {v.shape[0] for v in cols.values()}
        if len(lengths) != 1:
            raise RecordValidationError(f"columns disagree on the number of records: {sorted(lengths)}")
        for v in cols.values():
            v.setflags(write=False)
        object.__setattr__(self, "columns", cols)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __len__(self) -> int:
        return self.n

    @property
    def n(self) -> int:
        return next(iter(self.columns.values())).shape[0]

    def take(self, index) -> "Dataset":
        """Dataset made of the records at ``index`` (any numpy fancy index)."""
        return Dataset({k: v[index] for k, v in self.columns.items()})

    def drop(self, i: int) -> "Dataset":
        """Dataset with record ``i`` removed."""
        if not 0 <= i < self.n:
            raise IndexError(f"record index {i} out of range for n={self.n}")
        return Dataset({k: np.delete(v, i, axis=0) for k, v in self.columns.items()})

    def record(self, i: int) -> dict[str, Any]:
        return {k: v[i] for k, v in self.columns.items()}

    def records(self) -> Iterator[dict[str, Any]]:
        for i in range(self.n):
            yield self.record(i)

    def fingerprint(self) -> str:
        """SHA-256 over column names, shapes and raw bytes."""
        h = hashlib.sha256()
        for k in sorted(self.columns):
            v = self.columns[k]
            h.update(k.encode())
            h.update(repr(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()

    @classmethod
    def from_records(cls, records: Sequence[NamedTuple]) -> "Dataset":
        """Stack a sequence of ``LinearRecord``/``IpwRecord``/``IvRecord``."""
        if len(records) == 0:
            raise RecordValidationError("cannot build a dataset from zero records")
        kind = type(records[0])
        if any(type(r) is not kind for r in records):
            raise RecordValidationError("mixed record types")
        if kind is LinearRecord:
            return cls.linear([r.x for r in records], [r.y for r in records])
        if kind is IpwRecord:
            return cls.ipw([r.x for r in records], [r.a for r in records], [r.y for r in records])
        if kind is IvRecord:
            return cls.iv([r.w for r in records], [r.x for r in records], [r.y for r in records])
        raise RecordValidationError(f"unknown record type {kind.__name__}")

    @classmethod
    def linear(cls, X, y) -> "Dataset":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0] and X.shape[1] == y.shape[0] and X.shape[0] == 1:
            X = X.T
        return cls({"X": X, "y": y})

    @classmethod
    def ipw(cls, X, a, y) -> "Dataset":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return cls({"X": X, "a": np.asarray(a, dtype=float).reshape(-1),
                    "y": np.asarray(y, dtype=float).reshape(-1)})

    @classmethod
    def iv(cls, W, x, y) -> "Dataset":
        return cls({"W": np.atleast_2d(np.asarray(W, dtype=float)),
                    "x": np.asarray(x, dtype=float).reshape(-1),
                    "y": np.asarray(y, dtype=float).reshape(-1)})

    @classmethod
    def scalar(cls, z) -> "Dataset":
        """One scalar observation per record, for location-type models."""
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        return cls({"z": z})
