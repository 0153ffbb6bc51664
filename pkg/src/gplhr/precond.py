"""Approximate inverses of the shifted operator A - sigma*B.

Four kinds are available: identity, Jacobi, threshold incomplete LU and a
fixed-step right-preconditioned GMRES wrapped around one of the others.
"""

from __future__ import annotations

import heapq
import logging
import math
import re
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import qr_multiply, solve_triangular
from scipy.sparse.linalg import spsolve_triangular

from .errors import DimensionMismatchError, PreconditionerBuildError
from .matrix import Pencil, SparseMatrix, spmm

__all__ = [
    "PrecSpec",
    "parse_prec_spec",
    "Preconditioner",
    "IdentityPreconditioner",
    "JacobiPreconditioner",
    "ILUFactors",
    "ilut",
    "ILUTPreconditioner",
    "GMRESPreconditioner",
    "build_preconditioner",
    "apply_prec",
    "apply_projected_prec",
]

log = logging.getLogger(__name__)

PIVOT_FLOOR = 1e-12


@dataclass(frozen=True)
class PrecSpec:
    kind: str  # "identity" | "jacobi" | "ilut" | "gmres"
    fill_tol: float = 1e-3
    steps: int | None = None  # None with kind "gmres" means "problem dimension"
    inner: "PrecSpec | None" = None

    def __str__(self):
        if self.kind == "identity":
            return "none"
        if self.kind == "ilut":
            return f"ilut:{self.fill_tol:g}"
        if self.kind == "gmres":
            steps = "n" if self.steps is None else str(self.steps)
            return f"gmres:{steps}+{self.inner}"
        return self.kind


_SIMPLE = re.compile(r"^(none|identity|jacobi|ilut:(?P<tol>[^+]+))$")


def _parse_simple(text):
    m = _SIMPLE.match(text)
    if not m:
        raise ValueError(f"unrecognized preconditioner '{text}'")
    if text in ("none", "identity"):
        return PrecSpec("identity")
    if text == "jacobi":
        return PrecSpec("jacobi")
    try:
        tol = float(m.group("tol"))
    except ValueError:
        raise ValueError(f"bad ILUT threshold in '{text}'") from None
    if not tol >= 0:
        raise ValueError("ILUT threshold must be non-negative")
    return PrecSpec("ilut", fill_tol=tol)


def parse_prec_spec(text: str) -> PrecSpec:
    """Parse ``none``, ``jacobi``, ``ilut:<tol>`` or ``gmres:<steps>[+<inner>]``.

    ``<steps>`` may be the letter ``n`` for the problem dimension.
    """
    text = text.strip().lower()
    if text.startswith("gmres:"):
        head, _, inner = text[len("gmres:"):].partition("+")
        if head == "n":
            steps = None
        else:
            try:
                steps = int(head)
            except ValueError:
                raise ValueError(f"bad GMRES step count in '{text}'") from None
            if steps < 1:
                raise ValueError("GMRES step count must be positive")
        inner_spec = _parse_simple(inner) if inner else PrecSpec("identity")
        return PrecSpec("gmres", steps=steps, inner=inner_spec)
    return _parse_simple(text)


class Preconditioner:
    """Linear operator approximating (A - sigma*B)^{-1}.

    ``applications`` counts preconditioned vectors, ``inner_matvecs`` counts
    products with A - sigma*B performed inside the application.
    """

    kind = "base"

    def __init__(self, n):
        self.n = n
        self.applications = 0
        self.inner_matvecs = 0

    def _apply(self, r):
        raise NotImplementedError

    def apply(self, r):
        r = np.asarray(r, dtype=np.complex128)
        vec = r.ndim == 1
        if vec:
            r = r[:, None]
        if r.shape[0] != self.n:
            raise DimensionMismatchError(
                f"preconditioner of size {self.n} applied to block with {r.shape[0]} rows"
            )
        self.applications += r.shape[1]
        out = self._apply(r) if r.shape[1] else r.copy()
        return out[:, 0] if vec else out


class IdentityPreconditioner(Preconditioner):
    kind = "identity"

    def _apply(self, r):
        return r.copy()


class JacobiPreconditioner(Preconditioner):
    kind = "jacobi"

    def __init__(self, shifted: SparseMatrix):
        super().__init__(shifted.n_rows)
        d = shifted.diagonal().astype(np.complex128)
        d[d == 0] = 1.0
        self.inv_diag = 1.0 / d

    def _apply(self, r):
        return self.inv_diag[:, None] * r


@dataclass(frozen=True)
class ILUFactors:
    l: SparseMatrix  # unit lower triangular, diagonal stored
    u: SparseMatrix
    fill_tol: float


def ilut(m: SparseMatrix, fill_tol: float) -> ILUFactors:
    """Row-wise threshold incomplete LU without pivoting.

    Working-row entries below ``fill_tol`` times the 2-norm of the original
    row are dropped: in the L part before division by the pivot, in the U
    part once the row is finished. Tiny pivots are raised to 1e-12 times the
    row norm keeping their phase.
    """
    n = m.n_rows
    indptr, indices, data = m.indptr, m.indices, m.data
    u_rows = []  # per row: (cols, vals) strictly above diagonal
    u_diag = np.empty(n, dtype=np.complex128)
    l_r, l_c, l_v = [], [], []
    u_r, u_c, u_v = [], [], []
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        if lo == hi:
            raise PreconditionerBuildError(f"row {i} of the shifted matrix is empty")
        w = dict(zip(indices[lo:hi].tolist(), data[lo:hi].tolist()))
        rnorm = float(np.linalg.norm(data[lo:hi]))
        if rnorm == 0.0:
            raise PreconditionerBuildError(f"row {i} of the shifted matrix is zero")
        drop = fill_tol * rnorm
        heap = [c for c in w if c < i]
        heapq.heapify(heap)
        seen = set(heap)
        while heap:
            k = heapq.heappop(heap)
            # tested before scaling so that the threshold is in the units of the row
            if abs(w[k]) < drop:
                del w[k]
                continue
            wk = w[k] / u_diag[k]
            w[k] = wk
            cols, vals = u_rows[k]
            for j, ukj in zip(cols, vals):
                if j in w:
                    w[j] -= wk * ukj
                else:
                    w[j] = -wk * ukj
                    if j < i and j not in seen:
                        seen.add(j)
                        heapq.heappush(heap, j)
        diag = w.pop(i, 0j)
        if abs(diag) < PIVOT_FLOOR * rnorm:
            phase = diag / abs(diag) if diag != 0 else 1.0
            diag = PIVOT_FLOOR * rnorm * phase
        u_diag[i] = diag
        ucols, uvals = [], []
        for j in sorted(w):
            v = w[j]
            if j < i:  # multipliers, already tested above
                l_r.append(i)
                l_c.append(j)
                l_v.append(v)
            elif abs(v) >= drop:
                ucols.append(j)
                uvals.append(v)
        u_rows.append((ucols, uvals))
        u_r.append(i)
        u_c.append(i)
        u_v.append(diag)
        u_r.extend([i] * len(ucols))
        u_c.extend(ucols)
        u_v.extend(uvals)
    l_r.extend(range(n))
    l_c.extend(range(n))
    l_v.extend([1.0] * n)
    lm = SparseMatrix.from_coo(n, n, l_r, l_c, l_v)
    um = SparseMatrix.from_coo(n, n, u_r, u_c, u_v)
    return ILUFactors(lm, um, fill_tol)


class ILUTPreconditioner(Preconditioner):
    kind = "ilut"

    def __init__(self, factors: ILUFactors):
        super().__init__(factors.l.n_rows)
        self.factors = factors
        self._l = sp.csr_matrix(factors.l.csr)
        self._u = sp.csr_matrix(factors.u.csr)

    def _apply(self, r):
        y = spsolve_triangular(self._l, r, lower=True, unit_diagonal=True)
        return spsolve_triangular(self._u, y, lower=False)


class GMRESPreconditioner(Preconditioner):
    """``steps`` Arnoldi steps of right-preconditioned GMRES from a zero guess.

    Each column is solved on its own Krylov space (one basis at a time keeps
    the working set in cache). A column stops early only on breakdown (its
    Krylov space became invariant) or once its relative residual is below
    1e-14.
    """

    kind = "gmres"

    def __init__(self, shifted: SparseMatrix, steps: int, inner: Preconditioner):
        super().__init__(shifted.n_rows)
        self.shifted = shifted
        self.steps = int(steps)
        self.inner = inner

    def _apply(self, r):
        out = np.zeros_like(r)
        for col in range(r.shape[1]):
            if np.any(r[:, col]):
                out[:, col] = self._solve_column(r[:, col])
        return out

    def _solve_column(self, rc):
        n = rc.shape[0]
        steps = min(self.steps, n)
        csr = self.shifted.csr
        plain = isinstance(self.inner, IdentityPreconditioner)
        beta = np.linalg.norm(rc)
        # row-major Krylov basis: vb[i] is the i-th basis vector
        vb = np.zeros((steps + 1, n), dtype=np.complex128)
        zb = vb if plain else np.zeros((steps, n), dtype=np.complex128)
        h = np.zeros((steps + 1, steps), dtype=np.complex128)
        # u is the left null vector of the Hessenberg matrix (u^H H = 0, u[0] = 1);
        # the least-squares residual of the current Krylov space is beta / ||u||
        u = np.zeros(steps + 1, dtype=np.complex128)
        u[0] = 1.0
        unorm2 = 1.0
        vb[0] = rc / beta
        length = steps
        for j in range(steps):
            if plain:
                z = vb[j]
                self.inner.applications += 1
            else:
                z = self.inner.apply(vb[j])
                zb[j] = z
            w = csr @ z
            self.inner_matvecs += 1
            before = math.sqrt(np.vdot(w, w).real)
            basis = vb[: j + 1]
            # V^H w as conj(V conj(w)): one gemv over the row-major basis
            coef = (basis @ w.conj()).conj()
            w -= coef @ basis
            after = math.sqrt(np.vdot(w, w).real)
            if after < 0.7071 * before:
                cc = (basis @ w.conj()).conj()
                w -= cc @ basis
                coef += cc
                after = math.sqrt(np.vdot(w, w).real)
            h[: j + 1, j] = coef
            h[j + 1, j] = after
            if after <= 1e-14 * max(before, 1e-300):
                length = j + 1
                break
            vb[j + 1] = w / after
            u[j + 1] = -np.vdot(coef, u[: j + 1]) / after
            unorm2 += abs(u[j + 1]) ** 2
            if unorm2 > 1e28:
                length = j + 1
                break
        y = self._lsq(h[: length + 1, :length], beta)
        return y @ zb[:length]

    @staticmethod
    def _lsq(hm, beta):
        rhs = np.zeros((1, hm.shape[0]), dtype=np.complex128)
        rhs[0, 0] = beta
        # first row of Q without forming Q
        q_row, rm = qr_multiply(hm, rhs, mode="right")
        d = np.abs(np.diag(rm))
        if d.min() <= 1e-14 * max(d.max(), 1e-300):
            return np.linalg.lstsq(hm, rhs[0], rcond=None)[0]
        return solve_triangular(rm, q_row[0].conj())


def _build_simple(shifted: SparseMatrix, spec: PrecSpec) -> Preconditioner:
    if spec.kind == "identity":
        return IdentityPreconditioner(shifted.n_rows)
    if spec.kind == "jacobi":
        return JacobiPreconditioner(shifted)
    if spec.kind == "ilut":
        try:
            return ILUTPreconditioner(ilut(shifted, spec.fill_tol))
        except PreconditionerBuildError as exc:
            log.warning("ILUT failed (%s); falling back to Jacobi", exc)
            return JacobiPreconditioner(shifted)
    raise ValueError(f"unknown preconditioner kind '{spec.kind}'")


def build_preconditioner(p: Pencil, sigma, spec) -> Preconditioner:
    """Build an approximation of (A - sigma*B)^{-1} described by ``spec``."""
    sigma = complex(sigma)
    if not np.isfinite(sigma):
        raise ValueError("shift must be finite")
    if isinstance(spec, str):
        spec = parse_prec_spec(spec)
    shifted = p.shifted(sigma)
    if spec.kind == "gmres":
        inner = _build_simple(shifted, spec.inner or PrecSpec("identity"))
        steps = p.n if spec.steps is None else spec.steps
        return GMRESPreconditioner(shifted, steps, inner)
    return _build_simple(shifted, spec)


def apply_prec(t: Preconditioner, r):
    return t.apply(r)


def _project_out(basis, x):
    if basis is None or basis.shape[1] == 0:
        return x
    return x - basis @ (basis.conj().T @ x)


def apply_projected_prec(t: Preconditioner, v, q, r, right_project=True):
    """(I - V V^H) T (I - Q Q^H) r, the output made orthogonal to col(V) explicitly."""
    r = np.asarray(r, dtype=np.complex128)
    for blk in (v, q):
        if blk is not None and blk.shape[0] != r.shape[0]:
            raise DimensionMismatchError("projector basis and block differ in row count")
    if right_project:
        r = _project_out(q, r)
    y = t.apply(r)
    y = _project_out(v, y)
    return _project_out(v, y)
