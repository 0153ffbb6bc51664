"""Dense complex kernels for the small projected problems.

Contents: block orthonormalization, an ordered generalized Schur (QZ)
decomposition built from Givens rotations, the Q-free triangular factors
and eigenpair extraction from an ordered Schur pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DeficientEigenvalueError, QZConvergenceError, SingularPencilError

__all__ = [
    "orth",
    "OrderedSchur",
    "ordered_qz",
    "QFreeScaling",
    "qfree_scaling",
    "qfree_factors",
    "GeneralizedEigenvalue",
    "dense_eig_pair",
    "sigma_distance",
]

EPS = np.finfo(float).eps
INDETERMINATE_TOL = 1e-14


def orth(x, drop_tol=1e-10, scale=None, return_transform=False, against=None):
    """Orthonormalize the columns of ``x`` by classical Gram-Schmidt run twice.

    Each column is orthogonalized against the blocks in ``against`` (assumed
    orthonormal) and the columns already accepted, then normalized. A column
    is dropped when its remaining norm falls below ``drop_tol * scale``;
    ``scale`` defaults to the Frobenius norm of ``x``.

    Returns ``(q, rank)``; ``rank == 0`` means every column was dropped. With
    ``return_transform`` the result also carries ``t`` with
    ``q = x @ t - E @ ce`` where ``E`` stacks ``against`` (``ce`` is only
    returned when ``against`` is given).
    """
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim == 1:
        x = x[:, None]
    n, k = x.shape
    ext = [b for b in (against or []) if b.shape[1]]
    e = np.hstack(ext) if ext else np.zeros((n, 0), dtype=np.complex128)
    ne = e.shape[1]
    if scale is None:
        scale = np.linalg.norm(x)
    thresh = drop_tol * scale
    basis = np.empty((n, ne + k), dtype=np.complex128)
    basis[:, :ne] = e
    t = np.zeros((k, k), dtype=np.complex128)
    ce = np.zeros((ne, k), dtype=np.complex128)
    r = 0
    for j in range(k):
        v = x[:, j].copy()
        nb = ne + r
        coef = np.zeros(nb, dtype=np.complex128)
        passes = 2
        p = 0
        while p < passes and nb:
            c = basis[:, :nb].conj().T @ v
            before = np.linalg.norm(v)
            v -= basis[:, :nb] @ c
            coef += c
            p += 1
            if p == passes and passes < 3 and np.linalg.norm(v) < 0.5 * before:
                passes = 3  # still cancelling: one more pass
        nrm = np.linalg.norm(v)
        if nrm < thresh or nrm == 0.0:
            continue
        basis[:, nb] = v / nrm
        cq = coef[ne:]
        t[j, r] = 1.0
        if r:
            t[:, r] -= t[:, :r] @ cq
            ce[:, r] = -(ce[:, :r] @ cq)
        ce[:, r] += coef[:ne]
        t[:, r] /= nrm
        ce[:, r] /= nrm
        r += 1
    q = basis[:, ne:ne + r].copy()
    if return_transform:
        if against is not None:
            return q, r, t[:, :r], ce[:, :r]
        return q, r, t[:, :r]
    return q, r


# Givens rotations ------------------------------------------------------------

def _givens(a, b):
    """Return (c, s) so that [[c, s], [-conj(s), c]] @ [a, b] = [r, 0]."""
    a, b = complex(a), complex(b)
    if b == 0:
        return 1.0, 0.0j
    if a == 0:
        return 0.0, 1.0 + 0.0j
    aa = abs(a)
    r = math.hypot(aa, abs(b))
    return aa / r, (a / aa) * b.conjugate() / r


# The QZ work array w stacks [yl^H, h, t, yr]: a rotation of rows acts on
# w[:3] (yl <- yl G^H is a row rotation of yl^H) and one of columns on w[1:].

def _left(w, i, c, s):
    """Rotate rows (i, i+1) of h and t, keep yl consistent."""
    g = np.array([[c, s], [-s.conjugate(), c]])
    w[:3, i:i + 2, :] = g @ w[:3, i:i + 2, :]


def _col_rot(x, y):
    """Unitary 2x2 z with [x, y] @ z = [0, r]."""
    x, y = complex(x), complex(y)
    r = math.hypot(abs(x), abs(y))
    if r == 0.0:
        return np.eye(2, dtype=np.complex128)
    return np.array([[y / r, x.conjugate() / r], [-x / r, y.conjugate() / r]])


def _right(w, i, z):
    w[1:, :, i:i + 2] = w[1:, :, i:i + 2] @ z


# QZ ---------------------------------------------------------------------------

@dataclass
class OrderedSchur:
    """phi @ y_r = y_l @ r_a and psi @ y_r = y_l @ r_b, diagonals sorted by distance to sigma."""

    r_a: np.ndarray
    r_b: np.ndarray
    y_l: np.ndarray
    y_r: np.ndarray

    @property
    def alpha(self):
        return np.diag(self.r_a).copy()

    @property
    def beta(self):
        return np.diag(self.r_b).copy()


def sigma_distance(alpha, beta, sigma):
    """|alpha/beta - sigma| with beta == 0 mapped to +inf."""
    alpha = np.asarray(alpha, dtype=np.complex128)
    beta = np.asarray(beta, dtype=np.complex128)
    out = np.full(alpha.shape, np.inf)
    fin = beta != 0
    out[fin] = np.abs(alpha[fin] / beta[fin] - sigma)
    return out


def _hess_triangular(w):
    ylh, h, t = w[0], w[1], w[2]
    s = h.shape[0]
    qt, rt = np.linalg.qr(t)
    h[:] = qt.conj().T @ h
    t[:] = rt
    ylh[:] = qt.conj().T @ ylh
    for j in range(s - 2):
        for i in range(s - 1, j + 1, -1):
            if h[i, j] == 0:
                continue
            c, sn = _givens(h[i - 1, j], h[i, j])
            _left(w, i - 1, c, sn)
            h[i, j] = 0
            z = _col_rot(t[i, i - 1], t[i, i])
            _right(w, i - 1, z)
            t[i, i - 1] = 0
    for j in range(s):
        h[j + 2:, j] = 0
        t[j + 1:, j] = 0


def _pencil_2x2_eigs(h, t):
    """Eigenvalues of the 2x2 pencil (h, t) with t upper triangular and nonsingular."""
    a = t[0, 0] * t[1, 1]
    b = -(h[0, 0] * t[1, 1] + h[1, 1] * t[0, 0] - h[1, 0] * t[0, 1])
    c = h[0, 0] * h[1, 1] - h[1, 0] * h[0, 1]
    disc = np.sqrt(b * b - 4 * a * c + 0j)
    qq = -0.5 * (b + disc) if abs(b + disc) >= abs(b - disc) else -0.5 * (b - disc)
    if qq == 0:
        return np.array([0j, 0j])
    return np.array([qq / a, c / qq])


def _chase_zero_diag(w, j, ilo, ihi):
    """Move a zero T[j, j] to the bottom of the window and deflate it there."""
    h, t = w[1], w[2]
    t[j, j] = 0
    for jch in range(j, ihi):
        c, sn = _givens(t[jch, jch + 1], t[jch + 1, jch + 1])
        _left(w, jch, c, sn)
        t[jch + 1, jch + 1] = 0
        t[jch + 1, jch] = 0
        if jch > ilo:
            z = _col_rot(h[jch + 1, jch - 1], h[jch + 1, jch])
            _right(w, jch - 1, z)
            h[jch + 1, jch - 1] = 0
            t[jch, jch - 1] = 0
            t[jch + 1, jch - 1] = 0
    z = _col_rot(h[ihi, ihi - 1], h[ihi, ihi])
    _right(w, ihi - 1, z)
    h[ihi, ihi - 1] = 0
    t[ihi, ihi - 1] = 0


def _qz_sweep(w, ilo, ihi, shift):
    h, t = w[1], w[2]
    x = h[ilo, ilo] - shift * t[ilo, ilo]
    y = h[ilo + 1, ilo]
    for j in range(ilo, ihi):
        if j == ilo:
            c, sn = _givens(x, y)
        else:
            c, sn = _givens(h[j, j - 1], h[j + 1, j - 1])
        _left(w, j, c, sn)
        if j > ilo:
            h[j + 1, j - 1] = 0
        z = _col_rot(t[j + 1, j], t[j + 1, j + 1])
        _right(w, j, z)
        t[j + 1, j] = 0


def _qz_iterate(w):
    h, t = w[1], w[2]
    s = h.shape[0]
    hnorm = np.linalg.norm(h)
    tnorm = np.linalg.norm(t)
    budget = 30 * s
    sweeps = 0
    since_deflation = 0
    ihi = s - 1
    while ihi > 0:
        ilo = 0
        for j in range(ihi, 0, -1):
            sub = abs(h[j, j - 1])
            if sub <= EPS * (abs(h[j, j]) + abs(h[j - 1, j - 1])) or sub <= EPS * hnorm:
                h[j, j - 1] = 0
                ilo = j
                break
        if ilo == ihi:
            ihi -= 1
            since_deflation = 0
            continue
        zero_j = None
        for j in range(ilo, ihi + 1):
            if abs(t[j, j]) <= EPS * tnorm:
                zero_j = j
                break
        if zero_j is not None:
            _chase_zero_diag(w, zero_j, ilo, ihi)
            ihi -= 1
            since_deflation = 0
            continue
        if sweeps >= budget:
            raise QZConvergenceError(f"QZ did not converge within {budget} sweeps")
        sweeps += 1
        since_deflation += 1
        ratio = h[ihi, ihi] / t[ihi, ihi]
        if since_deflation % 10 == 0:
            shift = ratio + abs(h[ihi, ihi - 1] / t[ihi - 1, ihi - 1]) * (0.75 + 0.5j)
        else:
            ev = _pencil_2x2_eigs(h[ihi - 1:ihi + 1, ihi - 1:ihi + 1],
                                  t[ihi - 1:ihi + 1, ihi - 1:ihi + 1])
            shift = ev[np.argmin(np.abs(ev - ratio))]
        _qz_sweep(w, ilo, ihi, shift)


def _swap(w, j):
    """Exchange the diagonal pairs at positions j and j+1."""
    h, t = w[1], w[2]
    a11, a12, a22 = h[j, j], h[j, j + 1], h[j + 1, j + 1]
    b11, b12, b22 = t[j, j], t[j, j + 1], t[j + 1, j + 1]
    f0 = a22 * b11 - b22 * a11
    f1 = a22 * b12 - b22 * a12
    if f0 == 0 and f1 == 0:
        return
    z = _col_rot(f0, f1)
    _right(w, j, z)
    ua = h[j:j + 2, j]
    ub = t[j:j + 2, j]
    u = ua if np.linalg.norm(ua) >= np.linalg.norm(ub) else ub
    c, sn = _givens(u[0], u[1])
    _left(w, j, c, sn)
    h[j + 1, j] = 0
    t[j + 1, j] = 0


def _normalize_diag(w):
    h, t = w[1], w[2]
    for j in range(h.shape[0]):
        piv = t[j, j] if t[j, j] != 0 else h[j, j]
        if piv == 0:
            continue
        ph = piv / abs(piv)
        w[1:3, j, j:] *= np.conj(ph)
        w[0, j] *= np.conj(ph)  # yl[:, j] *= ph
        t[j, j] = t[j, j].real if t[j, j] != 0 else 0


def ordered_qz(phi, psi, sigma, nsort=None):
    """Generalized Schur form of (phi, psi) with |alpha/beta - sigma| ascending.

    Infinite eigenvalues (beta = 0) are placed last. Ties keep the order in
    which the QZ iteration produced them. With ``nsort`` only the leading
    ``nsort`` positions are guaranteed to be in order.
    """
    h = np.array(phi, dtype=np.complex128)
    t = np.array(psi, dtype=np.complex128)
    if h.ndim != 2 or h.shape[0] != h.shape[1] or h.shape != t.shape:
        raise ValueError("phi and psi must be square and of equal size")
    s = h.shape[0]
    if s == 0:
        raise ValueError("empty pencil")
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite entries in projected pencil")
    eye = np.eye(s, dtype=np.complex128)
    w = np.stack([eye, h, t, eye])
    hnorm = np.linalg.norm(h)
    tnorm = np.linalg.norm(t)
    if s > 1:
        _hess_triangular(w)
        _qz_iterate(w)
    w[1] = np.triu(w[1])
    w[2] = np.triu(w[2])
    _normalize_diag(w)
    h, t = w[1], w[2]

    da, db = np.abs(np.diag(h)), np.abs(np.diag(t))
    bad = (da <= INDETERMINATE_TOL * hnorm) & (db <= INDETERMINATE_TOL * tnorm)
    if np.any(bad):
        raise SingularPencilError(
            f"indeterminate eigenvalue 0/0 at position {int(np.argmax(bad))}: "
            "the pencil is singular or the shift coincides with an eigenvalue"
        )

    dist = sigma_distance(np.diag(h), np.diag(t), sigma)
    target = np.argsort(dist, kind="stable")
    nsort = s if nsort is None else min(int(nsort), s)
    order = list(range(s))
    for i in range(nsort):
        j = order.index(target[i])
        while j > i:
            _swap(w, j - 1)
            order[j - 1], order[j] = order[j], order[j - 1]
            j -= 1
    w[1] = np.triu(w[1])
    w[2] = np.triu(w[2])
    _normalize_diag(w)
    h, t, yl, yr = w[1].copy(), w[2].copy(), w[0].conj().T, w[3].copy()
    return OrderedSchur(h, t, yl, yr)


# Q-free factors ----------------------------------------------------------------

@dataclass
class QFreeScaling:
    g1: np.ndarray
    g2: np.ndarray
    g: np.ndarray


def qfree_scaling(r_a, r_b):
    """Diagonal g1, g2 making g = r_a*diag(g1) + r_b*diag(g2) unit upper triangular."""
    r_a = np.asarray(r_a, dtype=np.complex128)
    r_b = np.asarray(r_b, dtype=np.complex128)
    da, db = np.diag(r_a), np.diag(r_b)
    if np.any((da == 0) & (db == 0)):
        raise SingularPencilError("indeterminate diagonal pair (0, 0) in triangular factors")
    use_b = np.abs(da) < np.abs(db)
    g1 = np.where(use_b, 0, (1 - db) / np.where(use_b, 1, da))
    g2 = np.where(use_b, 1 / np.where(use_b, db, 1), 1)
    g = r_a * g1[None, :] + r_b * g2[None, :]
    g = np.triu(g)
    np.fill_diagonal(g, 1.0)
    return QFreeScaling(g1.astype(np.complex128), g2.astype(np.complex128), g)


def qfree_factors(r_a, r_b):
    """Triangular (m_a, m_b) with A V m_b = B V m_a whenever A V = Q r_a, B V = Q r_b."""
    r_a = np.asarray(r_a, dtype=np.complex128)
    sc = qfree_scaling(r_a, r_b)
    ginv_ra = solve_triangular(sc.g, r_a, lower=False, unit_diagonal=True)
    m_a = np.triu(sc.g2[:, None] * ginv_ra)
    m_b = np.triu(np.eye(len(sc.g1)) - sc.g1[:, None] * ginv_ra)
    # the diagonals in closed form, so that e.g. beta = 0 stays exactly zero
    da, db = np.diag(r_a), np.diag(np.asarray(r_b, dtype=np.complex128))
    use_b = np.abs(da) < np.abs(db)  # same choice as in qfree_scaling
    np.fill_diagonal(m_a, np.where(use_b, da * sc.g2, da))
    np.fill_diagonal(m_b, np.where(use_b, 1.0, db))
    return m_a, m_b


# eigenpairs ------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneralizedEigenvalue:
    """Homogeneous eigenvalue (alpha, beta); lambda = alpha/beta."""

    alpha: complex
    beta: complex

    def __post_init__(self):
        if abs(self.alpha) + abs(self.beta) == 0:
            raise ValueError("indeterminate eigenvalue (0, 0)")

    @property
    def is_infinite(self):
        return self.beta == 0

    @property
    def value(self) -> complex:
        if self.beta == 0:
            return complex(math.inf, 0.0)
        return complex(self.alpha / self.beta)

    def distance(self, sigma) -> float:
        return math.inf if self.beta == 0 else abs(self.value - sigma)


def dense_eig_pair(phi, psi, sigma, strict=True):
    """All eigenpairs of (phi, psi), ascending in distance to sigma.

    Eigenvectors come from back substitution on the ordered Schur factors
    and have unit norm. A near-zero pivot with a non-negligible right-hand
    side means the eigenvalue is (numerically) defective: ``strict`` raises
    DeficientEigenvalueError, otherwise the pivot is clamped and the result
    is a best-effort vector.
    """
    sch = ordered_qz(phi, psi, sigma)
    ra, rb = sch.r_a, sch.r_b
    s = ra.shape[0]
    na, nb = np.linalg.norm(ra), np.linalg.norm(rb)
    out = []
    for j in range(s):
        a, b = ra[j, j], rb[j, j]
        m = b * ra[: j + 1, : j + 1] - a * rb[: j + 1, : j + 1]
        scale = abs(b) * na + abs(a) * nb
        tol = INDETERMINATE_TOL * scale
        y = np.zeros(s, dtype=np.complex128)
        y[j] = 1.0
        for i in range(j - 1, -1, -1):
            rhs = -(m[i, i + 1: j + 1] @ y[i + 1: j + 1])
            piv = m[i, i]
            if abs(piv) < tol:
                if abs(rhs) <= tol * np.linalg.norm(y[i + 1: j + 1]):
                    y[i] = 0
                    continue
                if strict:
                    raise DeficientEigenvalueError(
                        f"eigenvalue {j} is numerically defective; use the Schur variant"
                    )
                piv = tol if piv == 0 else piv / abs(piv) * tol
            y[i] = rhs / piv
        x = sch.y_r @ y
        x /= np.linalg.norm(x)
        out.append((GeneralizedEigenvalue(complex(a), complex(b)), x))
    return out
