"""Sparse storage, Matrix Market ingestion and matrix-times-block products.

Everything is stored and computed in complex double precision, including
matrices read from ``real`` files.
"""

from __future__ import annotations

import gzip
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError, MatrixMarketError

__all__ = [
    "SparseMatrix",
    "Pencil",
    "read_matrix_market",
    "write_matrix_market",
    "spmm",
]

_FIELDS = ("real", "complex", "integer")
_SYMMETRIES = ("general", "symmetric", "hermitian", "skew-symmetric")


class SparseMatrix:
    """Immutable complex CSR matrix.

    Column indices are sorted within each row, duplicates are not allowed
    and all values must be finite. Use :meth:`from_coo` to build from
    (possibly unsorted, duplicated) triplets.
    """

    __slots__ = ("n_rows", "n_cols", "indptr", "indices", "data", "_csr")

    def __init__(self, n_rows, n_cols, indptr, indices, data):
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        data = np.asarray(data, dtype=np.complex128)
        if indptr.shape != (n_rows + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValueError("malformed indptr")
        if len(indices) != len(data):
            raise ValueError("indices and data differ in length")
        if len(indices):
            if indices.min() < 0 or indices.max() >= n_cols:
                raise ValueError("column index out of range")
            # strictly increasing within each row
            row_start = np.zeros(len(indices), dtype=bool)
            row_start[indptr[:-1][np.diff(indptr) > 0]] = True
            if np.any((np.diff(indices) <= 0) & ~row_start[1:]):
                raise ValueError("column indices must be strictly increasing within a row")
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite matrix entry")
        for arr in (indptr, indices, data):
            arr.flags.writeable = False
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.indptr = indptr
        self.indices = indices
        self.data = data
        self._csr = sp.csr_matrix((data, indices, indptr), shape=(self.n_rows, self.n_cols))

    @classmethod
    def from_coo(cls, n_rows, n_cols, rows, cols, vals):
        """Build from triplets; duplicate (row, col) pairs are summed."""
        coo = sp.coo_matrix(
            (np.asarray(vals, dtype=np.complex128), (np.asarray(rows), np.asarray(cols))),
            shape=(n_rows, n_cols),
        )
        return cls.from_scipy(coo)

    @classmethod
    def from_scipy(cls, m):
        csr = sp.csr_matrix(m, dtype=np.complex128, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.complex128)
        return cls.from_scipy(sp.csr_matrix(a))

    @classmethod
    def identity(cls, n):
        return cls.from_scipy(sp.identity(n, dtype=np.complex128, format="csr"))

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.data)

    @property
    def csr(self):
        """Read-only scipy view; do not mutate."""
        return self._csr

    def toarray(self):
        return self._csr.toarray()

    def triplets(self):
        """Return ``(rows, cols, vals)`` in row-major order."""
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        return rows, np.array(self.indices), np.array(self.data)

    def diagonal(self):
        return self._csr.diagonal()

    def fro_norm(self):
        return float(np.linalg.norm(self.data))

    def __sub__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return SparseMatrix.from_scipy(self._csr - other._csr)

    def __add__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return SparseMatrix.from_scipy(self._csr + other._csr)

    def scaled(self, alpha):
        return SparseMatrix.from_scipy(self._csr * complex(alpha))

    def __repr__(self):
        return f"SparseMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


def spmm(m: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse matrix times dense block (or vector)."""
    x = np.asarray(x)
    if x.shape[0] != m.n_cols:
        raise DimensionMismatchError(
            f"cannot multiply {m.n_rows}x{m.n_cols} matrix by block with {x.shape[0]} rows"
        )
    return np.asarray(m.csr @ x.astype(np.complex128, copy=False))


@dataclass(frozen=True)
class Pencil:
    """The pair (A, B); ``b is None`` marks B = I."""

    a: SparseMatrix
    b: SparseMatrix | None = None

    def __post_init__(self):
        if self.a.n_rows != self.a.n_cols:
            raise DimensionMismatchError("A must be square")
        if self.b is not None and self.b.shape != self.a.shape:
            raise DimensionMismatchError(
                f"A is {self.a.shape} but B is {self.b.shape}"
            )

    @property
    def n(self) -> int:
        return self.a.n_rows

    @property
    def is_standard(self) -> bool:
        return self.b is None

    def apply_a(self, x):
        return spmm(self.a, x)

    def apply_b(self, x):
        if self.b is None:
            return np.array(x, dtype=np.complex128)
        return spmm(self.b, x)

    def b_matrix(self) -> SparseMatrix:
        return SparseMatrix.identity(self.n) if self.b is None else self.b

    def shifted(self, sigma) -> SparseMatrix:
        """Assemble A - sigma*B."""
        return self.a - self.b_matrix().scaled(sigma)

    def shifted_norm(self, sigma) -> float:
        return self.shifted(sigma).fro_norm()

    def todense(self):
        a = self.a.toarray()
        b = np.eye(self.n, dtype=np.complex128) if self.b is None else self.b.toarray()
        return a, b


def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="ascii")
    return open(path, "r", encoding="ascii")


def _parse_value(parts, field, lineno):
    expected = 4 if field == "complex" else 3
    if len(parts) != expected:
        layout = "row col re im" if field == "complex" else "row col value"
        raise MatrixMarketError(f"expected '{layout}'", lineno)
    try:
        imag = float(parts[3]) if field == "complex" else 0.0
        val = complex(float(parts[2]), imag)
    except ValueError as exc:
        raise MatrixMarketError(f"bad numeric value ({exc})", lineno) from None
    if not (math.isfinite(val.real) and math.isfinite(val.imag)):
        raise MatrixMarketError("non-finite value", lineno)
    return val


def read_matrix_market(path) -> SparseMatrix:
    """Read a coordinate-format Matrix Market file.

    Symmetric, skew-symmetric and Hermitian storage is expanded to general
    storage; duplicate entries are summed. Files ending in ``.gz`` are
    decompressed transparently.
    """
    with _open_text(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError("empty file", 1)

    header = lines[0].split()
    if len(header) != 5 or header[0].lower() != "%%matrixmarket" or header[1].lower() != "matrix":
        raise MatrixMarketError("missing '%%MatrixMarket matrix' banner", 1)
    fmt, field, symmetry = (h.lower() for h in header[2:])
    if fmt != "coordinate":
        raise MatrixMarketError(f"unsupported format '{fmt}' (only coordinate)", 1)
    if field not in _FIELDS:
        raise MatrixMarketError(f"unsupported field '{field}'", 1)
    if symmetry not in _SYMMETRIES:
        raise MatrixMarketError(f"unsupported symmetry '{symmetry}'", 1)

    lineno = 1
    size = None
    for lineno in range(2, len(lines) + 1):
        text = lines[lineno - 1].strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        if len(parts) != 3:
            raise MatrixMarketError("size line must be 'rows cols entries'", lineno)
        try:
            size = tuple(int(p) for p in parts)
        except ValueError:
            raise MatrixMarketError("size line must contain integers", lineno) from None
        break
    if size is None:
        raise MatrixMarketError("missing size line", lineno)
    n_rows, n_cols, nnz = size
    if n_rows < 0 or n_cols < 0 or nnz < 0:
        raise MatrixMarketError("negative size", lineno)
    if symmetry != "general" and n_rows != n_cols:
        raise MatrixMarketError(f"{symmetry} matrix must be square", lineno)

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.complex128)
    count = 0
    for lineno in range(lineno + 1, len(lines) + 1):
        text = lines[lineno - 1].strip()
        if not text or text.startswith("%"):
            continue
        if count == nnz:
            raise MatrixMarketError(f"more entries than the {nnz} declared", lineno)
        parts = text.split()
        try:
            i, j = int(parts[0]), int(parts[1])
        except (ValueError, IndexError):
            raise MatrixMarketError("bad index pair", lineno) from None
        if not (1 <= i <= n_rows and 1 <= j <= n_cols):
            raise MatrixMarketError(f"index ({i}, {j}) out of range", lineno)
        rows[count] = i - 1
        cols[count] = j - 1
        vals[count] = _parse_value(parts, field, lineno)
        count += 1
    if count != nnz:
        raise MatrixMarketError(f"found {count} entries, header declares {nnz}", lineno)

    if symmetry != "general":
        off = rows != cols
        mirrored = vals[off]
        if symmetry == "hermitian":
            mirrored = mirrored.conj()
        elif symmetry == "skew-symmetric":
            mirrored = -mirrored
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, mirrored]),
        )
    return SparseMatrix.from_coo(n_rows, n_cols, rows, cols, vals)


def write_matrix_market(path, m: SparseMatrix, comment: str | None = None) -> None:
    """Write ``m`` in coordinate general format.

    The ``real`` field is used when every stored imaginary part is zero.
    Values are written with shortest round-trip precision, so reading the
    file back reproduces the entries exactly.
    """
    rows, cols, vals = m.triplets()
    is_real = not np.any(vals.imag)
    field = "real" if is_real else "complex"
    out = [f"%%MatrixMarket matrix coordinate {field} general"]
    if comment:
        out.extend("%" + line for line in comment.splitlines())
    out.append(f"{m.n_rows} {m.n_cols} {m.nnz}")
    if is_real:
        out.extend(f"{i + 1} {j + 1} {float(v.real)!r}" for i, j, v in zip(rows, cols, vals))
    else:
        out.extend(
            f"{i + 1} {j + 1} {float(v.real)!r} {float(v.imag)!r}"
            for i, j, v in zip(rows, cols, vals)
        )
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wt", encoding="ascii") as fh:
        fh.write("\n".join(out) + "\n")
