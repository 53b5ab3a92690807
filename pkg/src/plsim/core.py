"""Data containers and the delete-one-component parameterization.

The index vector ``beta`` is constrained to the unit sphere.  It is
parameterized by dropping one strictly positive coordinate (the *anchor*)
and recovering it as ``sqrt(1 - ||reduced||^2)``.  Every solver in the
package works with ``xi = (reduced, theta)``.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class DataFormatError(ValueError):
    """Raised when an input file cannot be parsed into a dataset."""


@dataclass(frozen=True, eq=False)
class Subject:
    """Repeated measurements of one subject.

    Parameters
    ----------
    y : ndarray, shape (m,)
    x : ndarray, shape (m, p)
        Covariates entering the single index.
    z : ndarray, shape (m, q)
        Covariates entering linearly.
    id : hashable
        Opaque label, carried through to error messages and outputs.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    id: object = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        m = y.shape[0]
        x = np.asarray(self.x, dtype=float).reshape(m, -1)
        z = np.asarray(self.z, dtype=float)
        z = z.reshape(m, -1) if z.size else np.zeros((m, 0))
        if m < 1:
            raise DomainError(f"subject {self.id!r} has no rows")
        for name, arr in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"subject {self.id!r}: non-finite entries in {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def m(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """A collection of subjects sharing the covariate dimensions ``p`` and ``q``.

    The stacked arrays (``y``, ``x``, ``z``, ``groups``) are computed once and
    cached; rows are ordered subject by subject.
    """

    subjects: tuple

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if len(subjects) < 2:
            raise DomainError(f"need at least 2 subjects, got {len(subjects)}")
        p, q = subjects[0].x.shape[1], subjects[0].z.shape[1]
        for s in subjects:
            if s.x.shape[1] != p or s.z.shape[1] != q:
                raise DomainError(
                    f"subject {s.id!r} has dimensions (p={s.x.shape[1]}, q={s.z.shape[1]}), "
                    f"expected (p={p}, q={q})"
                )
        object.__setattr__(self, "subjects", subjects)

    @classmethod
    def from_arrays(cls, y, x, z, groups) -> "LongitudinalDataset":
        """Build a dataset from stacked arrays and a subject label per row.

        Rows are collected per label; subjects appear in order of first
        occurrence and rows keep their relative order within a subject.
        """
        y = np.asarray(y, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float).reshape(y.shape[0], -1)
        z = np.asarray(z, dtype=float)
        z = z.reshape(y.shape[0], -1) if z.size else np.zeros((y.shape[0], 0))
        rows = OrderedDict()
        for k, g in enumerate(groups):
            rows.setdefault(g, []).append(k)
        return cls(tuple(Subject(y[i], x[i], z[i], id=g) for g, i in rows.items()))

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].x.shape[1]

    @property
    def q(self) -> int:
        return self.subjects[0].z.shape[1]

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([s.m for s in self.subjects], dtype=int)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def offsets(self) -> np.ndarray:
        """Row offsets; subject ``i`` occupies ``offsets[i]:offsets[i+1]``."""
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @cached_property
    def y(self) -> np.ndarray:
        return np.concatenate([s.y for s in self.subjects])

    @cached_property
    def x(self) -> np.ndarray:
        return np.vstack([s.x for s in self.subjects])

    @cached_property
    def z(self) -> np.ndarray:
        return np.vstack([s.z for s in self.subjects])

    @cached_property
    def groups(self) -> np.ndarray:
        """Subject position (0..n-1) of every stacked row."""
        return np.repeat(np.arange(self.n), self.sizes)

    @cached_property
    def size_blocks(self) -> list:
        """``(m, subject_positions, row_indices)`` for each distinct cluster size.

        ``row_indices`` has shape (number of such subjects, m) and indexes
        the stacked arrays, so per-subject matrix work can be batched.
        """
        out = []
        for m in np.unique(self.sizes):
            subj = np.flatnonzero(self.sizes == m)
            rows = self.offsets[subj][:, None] + np.arange(m)[None, :]
            out.append((int(m), subj, rows))
        return out

    def split(self, values: np.ndarray) -> list:
        """Split a stacked per-row array back into per-subject pieces."""
        return np.split(np.asarray(values), self.offsets[1:-1])

    def select_columns(self, x_cols: Sequence[int], z_cols: Sequence[int]) -> "LongitudinalDataset":
        x_cols, z_cols = list(x_cols), list(z_cols)
        return LongitudinalDataset(
            tuple(Subject(s.y, s.x[:, x_cols], s.z[:, z_cols], id=s.id) for s in self.subjects)
        )

    def reorder(self, order: Iterable[int]) -> "LongitudinalDataset":
        return LongitudinalDataset(tuple(self.subjects[i] for i in order))


def embed_beta(reduced, anchor: int) -> np.ndarray:
    """Map a reduced index vector to the full unit-norm vector.

    ``anchor`` is 0-based here; the anchor coordinate is
    ``sqrt(1 - ||reduced||^2)`` and the other coordinates are ``reduced`` in order.
    """
    reduced = np.asarray(reduced, dtype=float).reshape(-1)
    sq = float(reduced @ reduced)
    if sq >= 1.0:
        raise DomainError(f"||reduced|| = {np.sqrt(sq):.6g} must be < 1")
    return np.insert(reduced, anchor, np.sqrt(1.0 - sq))


def jacobian(reduced, anchor: int) -> np.ndarray:
    """Derivative of :func:`embed_beta` with respect to ``reduced``; shape (p, p-1)."""
    reduced = np.asarray(reduced, dtype=float).reshape(-1)
    sq = float(reduced @ reduced)
    if sq >= 1.0:
        raise DomainError(f"||reduced|| = {np.sqrt(sq):.6g} must be < 1")
    d = reduced.shape[0]
    return np.insert(np.eye(d), anchor, -reduced / np.sqrt(1.0 - sq), axis=0)


def choose_anchor(beta_init) -> tuple[int, np.ndarray]:
    """Pick the anchor as the largest-magnitude coordinate (first on ties).

    Returns the 0-based anchor and the unit vector, sign-flipped so the
    anchor coordinate is positive.
    """
    b = np.asarray(beta_init, dtype=float).reshape(-1)
    norm = np.linalg.norm(b)
    if not np.isfinite(norm) or norm == 0.0:
        raise DomainError("cannot choose an anchor for a zero (or non-finite) index vector")
    r = int(np.argmax(np.abs(b)))
    b = b / norm
    if b[r] < 0:
        b = -b
    return r, b


@dataclass(frozen=True, eq=False)
class IndexParam:
    """Unit-norm index vector together with its anchor (0-based)."""

    beta: np.ndarray
    anchor: int

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float).reshape(-1)
        if abs(np.linalg.norm(b) - 1.0) > 1e-12:
            raise DomainError(f"index vector must have unit norm, got {np.linalg.norm(b):.15g}")
        if not 0 <= self.anchor < b.shape[0]:
            raise DomainError(f"anchor {self.anchor} out of range for p={b.shape[0]}")
        if b[self.anchor] <= 0:
            raise DomainError("anchor coordinate must be positive")
        object.__setattr__(self, "beta", b)

    @classmethod
    def from_reduced(cls, reduced, anchor: int) -> "IndexParam":
        return cls(embed_beta(reduced, anchor), anchor)

    @classmethod
    def from_vector(cls, beta) -> "IndexParam":
        r, b = choose_anchor(beta)
        return cls(b, r)

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def reduced(self) -> np.ndarray:
        return np.delete(self.beta, self.anchor)

    @property
    def jacobian(self) -> np.ndarray:
        return jacobian(self.reduced, self.anchor)


@dataclass(frozen=True, eq=False)
class ThetaParam:
    theta: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(t)):
            raise DomainError("theta has non-finite entries")
        object.__setattr__(self, "theta", t)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of a GEE/QIF solve.

    ``g_grid`` has one row ``(t, g_hat, g_prime_hat)`` per observation, in
    dataset row order.  ``sandwich_cov`` is the covariance of
    ``xi = (reduced beta, theta)``; ``full_cov`` is the same quantity mapped
    to ``(beta, theta)``.
    """

    beta: IndexParam
    theta: ThetaParam
    g_grid: np.ndarray
    sandwich_cov: np.ndarray | None
    iterations: int
    converged: bool
    score_norm: float
    full_cov: np.ndarray | None = None
    bandwidth: float = float("nan")
    method: str = ""
    trace: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([self.beta.reduced, self.theta.theta])

    @property
    def coefficients(self) -> np.ndarray:
        """Full parameter vector ``(beta, theta)``."""
        return np.concatenate([self.beta.beta, self.theta.theta])


def read_dataset(path) -> LongitudinalDataset:
    """Read a delimited file with columns ``subject, y, x1..xp, z1..zq``.

    The delimiter is sniffed (comma, tab, semicolon or whitespace).  Rows are
    grouped by subject id regardless of their order in the file.
    """
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    try:
        dialect = csv.Sniffer().sniff(lines[0], delimiters=",;\t ")
        delim = dialect.delimiter
    except csv.Error:
        delim = ","
    reader = csv.reader(lines, delimiter=delim, skipinitialspace=True)
    header = [h.strip() for h in next(reader)]
    if "subject" not in header or "y" not in header:
        raise DataFormatError(f"{path}: header must contain 'subject' and 'y' columns")
    x_cols = sorted((c for c in header if c[:1] == "x" and c[1:].isdigit()), key=lambda c: int(c[1:]))
    z_cols = sorted((c for c in header if c[:1] == "z" and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if not x_cols:
        raise DataFormatError(f"{path}: no x1..xp columns")
    for cols, prefix in ((x_cols, "x"), (z_cols, "z")):
        if [int(c[1:]) for c in cols] != list(range(1, len(cols) + 1)):
            raise DataFormatError(f"{path}: {prefix} columns must be numbered 1..{len(cols)}")
    pos = {c: header.index(c) for c in header}
    ys, xs, zs, groups = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = {c: row[pos[c]].strip() for c in header}
            y = float(vals["y"])
            x = [float(vals[c]) for c in x_cols]
            z = [float(vals[c]) for c in z_cols]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if not (np.isfinite(y) and np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise DataFormatError(f"{path}:{lineno}: non-finite value in row")
        ys.append(y)
        xs.append(x)
        zs.append(z)
        groups.append(vals["subject"])
    if not ys:
        raise DataFormatError(f"{path}: no data rows")
    return LongitudinalDataset.from_arrays(
        np.array(ys), np.array(xs), np.array(zs).reshape(len(ys), len(z_cols)), groups
    )


def write_dataset(data: LongitudinalDataset, path) -> None:
    header = ["subject", "y"] + [f"x{j + 1}" for j in range(data.p)] + [f"z{j + 1}" for j in range(data.q)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in data.subjects:
            for j in range(s.m):
                w.writerow([s.id, repr(float(s.y[j]))] + [repr(float(v)) for v in s.x[j]] + [repr(float(v)) for v in s.z[j]])
