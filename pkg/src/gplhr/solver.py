"""Block preconditioned eigensolver for the k eigenvalues of (A, B) nearest a shift.

Two drivers share the subspace construction:

* :func:`gplhr_solve` iterates on a partial generalized Schur form and
  extracts from the trial space with a harmonic Schur-Rayleigh-Ritz step.
* :func:`gplhr_eig_solve` iterates on eigenvectors directly.

:func:`deflated_solve` runs the Schur driver repeatedly on implicitly
deflated operators to collect more eigenvalues in batches.

Every product with A or B applied to a single vector counts as one matvec
(the pair A, B applied to the same vector counts once).
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dense import (
    GeneralizedEigenvalue,
    dense_eig_pair,
    orth,
    ordered_qz,
    qfree_factors,
)
from .errors import GPLHRError, SingularPencilError
from .precond import Preconditioner, apply_projected_prec

__all__ = [
    "SolverConfig",
    "SchurApprox",
    "ConvergenceState",
    "PartialSchurResult",
    "EigResult",
    "StagnationError",
    "InvariantViolation",
    "DeflatedPencil",
    "DeflatedPreconditioner",
    "adapt_m",
    "schur_residuals",
    "krylov_arnoldi_block",
    "harmonic_srr",
    "gplhr_solve",
    "gplhr_eig_solve",
    "deflated_solve",
]

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps
DIRECTION_MODES = ("thick_restart", "lobpcg", "none")
M_CAP = 20
# above this transform norm, tracked products of P are recomputed explicitly
TRACK_LIMIT = 1e3


class StagnationError(GPLHRError):
    """The residual block vanished numerically; no new search directions."""


class InvariantViolation(AssertionError):
    pass


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


@dataclass
class SolverConfig:
    sigma: complex
    k: int
    m: int = 1
    tol: float = 1e-8
    max_iter: int = 500
    direction_mode: str = "thick_restart"
    seed: int = 0
    drop_tol: float = 1e-10
    adaptive_m: bool = True
    right_projector: bool = True
    check_invariants: bool = field(default_factory=lambda: _env_flag("GPLHR_CHECK_INVARIANTS"))

    def __post_init__(self):
        self.sigma = complex(self.sigma)
        if not np.isfinite(self.sigma):
            raise ValueError("shift must be finite")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        aliases = {"thick": "thick_restart"}
        self.direction_mode = aliases.get(self.direction_mode, self.direction_mode)
        if self.direction_mode not in DIRECTION_MODES:
            raise ValueError(f"direction_mode must be one of {DIRECTION_MODES}")


@dataclass
class SchurApprox:
    v: np.ndarray
    q: np.ndarray
    r_a: np.ndarray
    r_b: np.ndarray
    m_a: np.ndarray
    m_b: np.ndarray
    p: np.ndarray


@dataclass
class ConvergenceState:
    locked: int = 0
    iterations: int = 0
    matvec_count: int = 0
    prec_count: int = 0
    inner_matvec_count: int = 0
    current_m: int = 0
    residual_history: list = field(default_factory=list)  # relative eigenresiduals
    schur_history: list = field(default_factory=list)  # Schur residual norms
    m_history: list = field(default_factory=list)
    locked_history: list = field(default_factory=list)
    locked_drift: list = field(default_factory=list)  # worst eigenresidual among locked columns
    explicit_p_matvecs: int = 0

    def absorb(self, other: "ConvergenceState"):
        self.iterations += other.iterations
        self.matvec_count += other.matvec_count
        self.prec_count += other.prec_count
        self.inner_matvec_count += other.inner_matvec_count
        self.explicit_p_matvecs += other.explicit_p_matvecs
        self.residual_history.extend(other.residual_history)
        self.schur_history.extend(other.schur_history)
        self.m_history.extend(other.m_history)
        self.locked_history.extend(other.locked_history)
        self.locked_drift.extend(other.locked_drift)
        self.current_m = other.current_m


@dataclass
class PartialSchurResult:
    v: np.ndarray
    q: np.ndarray
    r_a: np.ndarray
    r_b: np.ndarray
    r: np.ndarray | None  # B = I only: A V = V r
    eigenvalues: list
    converged: np.ndarray
    eigres: np.ndarray
    schur_norms: np.ndarray
    status: str  # "converged" | "max_iter" | "stagnated" | "failed"
    state: ConvergenceState
    x: np.ndarray | None = None  # Ritz eigenvectors from col(V)
    message: str = ""

    @property
    def all_converged(self):
        return bool(np.all(self.converged))


@dataclass
class EigResult:
    x: np.ndarray
    lambda_a: np.ndarray
    lambda_b: np.ndarray
    eigenvalues: list
    converged: np.ndarray
    eigres: np.ndarray
    status: str
    state: ConvergenceState
    message: str = ""

    @property
    def all_converged(self):
        return bool(np.all(self.converged))


def adapt_m(m0: int, k: int, q_locked: int) -> int:
    """Expansion parameter after q_locked of k columns have been locked."""
    if not 0 <= q_locked < k:
        raise ValueError("need 0 <= q_locked < k")
    return min((m0 * k) // (k - q_locked), M_CAP)


# operators ---------------------------------------------------------------------------

class _Ops:
    """Counted access to A and B."""

    def __init__(self, pencil, state: ConvergenceState):
        self.pencil = pencil
        self.state = state
        self.n = pencil.n
        self.standard = pencil.is_standard

    def ab(self, x):
        self.state.matvec_count += x.shape[1]
        ax = self.pencil.apply_a(x)
        bx = x.copy() if self.standard else self.pencil.apply_b(x)
        return ax, bx

    def fresh(self, x):
        """Uncounted products, for invariant checks only."""
        ax = self.pencil.apply_a(x)
        bx = x.copy() if self.standard else self.pencil.apply_b(x)
        return ax, bx


class DeflatedPencil:
    """((I - QQ^H) A (I - VV^H), (I - QQ^H) B (I - VV^H)), applied implicitly.

    For B = I the pair is ((I - VV^H) A (I - VV^H), I).
    """

    def __init__(self, base, v, q=None):
        self.base = base
        self.v = v
        self.q = v if (q is None or base.is_standard) else q

    @property
    def n(self):
        return self.base.n

    @property
    def is_standard(self):
        return self.base.is_standard

    def _right(self, x):
        return x - self.v @ (self.v.conj().T @ x)

    def _left(self, y):
        return y - self.q @ (self.q.conj().T @ y)

    def apply_a(self, x):
        return self._left(self.base.apply_a(self._right(x)))

    def apply_b(self, x):
        if self.base.is_standard:
            return np.array(x, dtype=np.complex128)
        return self._left(self.base.apply_b(self._right(x)))

    def shifted_norm(self, sigma):
        return self.base.shifted_norm(sigma)


class DeflatedPreconditioner(Preconditioner):
    """(I - V_d V_d^H) T (I - Q_d Q_d^H) for already computed Schur vectors."""

    kind = "deflated"

    def __init__(self, inner: Preconditioner, v, q=None):
        super().__init__(inner.n)
        self.inner = inner
        self.v = v
        self.q = v if q is None else q

    def _apply(self, r):
        r = r - self.q @ (self.q.conj().T @ r)
        y = self.inner.apply(r)
        return y - self.v @ (self.v.conj().T @ y)

    @property
    def inner_matvecs(self):
        return getattr(self.inner, "inner_matvecs", 0)

    @inner_matvecs.setter
    def inner_matvecs(self, value):
        pass


# building blocks ---------------------------------------------------------------------------

def _project(blocks, x):
    """Two passes of block Gram-Schmidt against orthonormal ``blocks``."""
    for _ in range(2):
        for b in blocks:
            if b.shape[1]:
                x = x - b @ (b.conj().T @ x)
    return x


def _orth_continue(raw, scale, drop_tol, against):
    """Orthonormal basis of raw plus the k-column block used to continue the recursion.

    When columns are dropped the continuation block is the projection of
    ``raw`` onto the retained span, represented by coefficients so that its
    products follow from those of the basis.
    """
    basis, rank = orth(raw, drop_tol=drop_tol, scale=scale, against=against)
    if rank == 0:
        return basis, rank, None
    coef = None if rank == raw.shape[1] else basis.conj().T @ raw
    return basis, rank, coef


def _block_residual(ax, bx, m_a, m_b, q_lock):
    return (ax @ m_b[:, q_lock:]) - (bx @ m_a[:, q_lock:])


def _krylov(ops, prec, v, qproj, ax, bx, m_a, m_b, q_lock, m, cfg, state):
    """Residual-driven preconditioned block Arnoldi sequence [W, S_1, ..., S_m].

    Returns a list of (basis, A*basis, B*basis) triples. Raises
    StagnationError when the residual block carries no usable direction.
    """
    ma_ = m_a[q_lock:, q_lock:]
    mb_ = m_b[q_lock:, q_lock:]
    res = _block_residual(ax, bx, m_a, m_b, q_lock)
    scale = (np.linalg.norm(ax) * np.linalg.norm(m_b) + np.linalg.norm(bx) * np.linalg.norm(m_a))
    if np.linalg.norm(res) <= 64 * EPS * max(scale, np.finfo(float).tiny):
        raise StagnationError("residual block is at round-off level")

    def precondition(block):
        before = prec.applications
        out = apply_projected_prec(prec, v, qproj, block, right_project=cfg.right_projector)
        state.prec_count += prec.applications - before
        return out

    raw = precondition(res)
    w, rank, coef = _orth_continue(raw, np.linalg.norm(raw), cfg.drop_tol, [v])
    if rank == 0:
        raise StagnationError("preconditioned residual block has no component orthogonal to V")
    aw, bw = ops.ab(w)
    blocks = [(w, aw, bw)]
    cont = (aw, bw) if coef is None else (aw @ coef, bw @ coef)
    for _ in range(m):
        raw = precondition(cont[0] @ mb_ - cont[1] @ ma_)
        s, rank, coef = _orth_continue(raw, np.linalg.norm(raw), cfg.drop_tol,
                                       [v] + [b[0] for b in blocks])
        if rank == 0:
            log.debug("Krylov block collapsed after %d blocks", len(blocks))
            break
        as_, bs_ = ops.ab(s)
        blocks.append((s, as_, bs_))
        cont = (as_, bs_) if coef is None else (as_ @ coef, bs_ @ coef)
    return blocks


def _prepare_p(ops, p, ap, bp, blocks, cfg, state):
    """Orthogonalize the direction block against the trial blocks, keeping products."""
    if p is None or p.shape[1] == 0:
        return None
    pn, rank, t, ce = orth(p, drop_tol=cfg.drop_tol, return_transform=True,
                           against=[b[0] for b in blocks])
    if rank == 0:
        return None
    if np.linalg.norm(t, 2) > TRACK_LIMIT:
        ap, bp = ops.ab(pn)
        state.explicit_p_matvecs += rank
    else:
        ap = ap @ t - np.hstack([b[1] for b in blocks]) @ ce
        bp = bp @ t - np.hstack([b[2] for b in blocks]) @ ce
    return pn, ap, bp


def _active_directions(p_dir, q_lock, k, mode):
    """Drop q_lock columns from the direction block.

    LOBPCG directions pair with the columns of V, so the locked leading ones
    go. Thick-restart directions are the next Ritz vectors beyond the first
    k; the nearest of them are kept.
    """
    if mode == "lobpcg":
        return tuple(b[:, q_lock:] for b in p_dir)
    return tuple(b[:, : k - q_lock] for b in p_dir)


def _test_basis(az_rest, bz_rest, q, sigma):
    """Orthonormal [Q, Qhat] with Qhat spanning (A - sigma B) applied to the new trial blocks."""
    rest = az_rest - sigma * bz_rest
    qh, rank = orth(rest, drop_tol=1e-13, against=[q])
    if rank < rest.shape[1]:
        raise SingularPencilError(
            "test subspace lost rank: the shift is (numerically) an eigenvalue "
            "or the pencil is singular"
        )
    return np.hstack([q, qh])


def _check_invariants(ops, sigma, v, q, r_a, r_b, z):
    shifted_norm = ops.pencil.shifted_norm(sigma)
    av, bv = ops.fresh(v)
    lhs = av - sigma * bv
    err = np.linalg.norm(lhs - q @ (r_a - sigma * r_b))
    if err > 1e-12 * shifted_norm:
        raise InvariantViolation(
            f"(A - sigma B) V = Q (R_A - sigma R_B) violated: {err:.3e} > 1e-12 * {shifted_norm:.3e}"
        )
    if z is not None:
        g = np.linalg.norm(z.conj().T @ z - np.eye(z.shape[1]))
        if g > 1e-11:
            raise InvariantViolation(f"trial basis not orthonormal: {g:.3e}")
    for name, b in (("V", v), ("Q", q)):
        g = np.linalg.norm(b.conj().T @ b - np.eye(b.shape[1]))
        if g > 1e-12:
            raise InvariantViolation(f"{name} not orthonormal: {g:.3e}")


def _srr(ops, zb, q, sigma, k, cfg):
    """Harmonic Schur-Rayleigh-Ritz on Z = [V, W, S_1, ..., P] with tracked products."""
    z = np.hstack([b[0] for b in zb])
    az = np.hstack([b[1] for b in zb])
    bz = np.hstack([b[2] for b in zb])
    kv = zb[0][0].shape[1]
    u = _test_basis(az[:, kv:], bz[:, kv:], q, sigma)
    s = z.shape[1]
    uh = u.conj().T
    sch = ordered_qz(uh @ az, uh @ bz, sigma, nsort=min(s, 2 * k))
    yr, yl = sch.y_r, sch.y_l
    v = z @ yr[:, :k]
    out = dict(
        v=v,
        av=az @ yr[:, :k],
        bv=bz @ yr[:, :k],
        q=u @ yl[:, :k],
        r_a=np.triu(sch.r_a[:k, :k]),
        r_b=np.triu(sch.r_b[:k, :k]),
        extra=z @ yr[:, k:2 * k],
        a_extra=az @ yr[:, k:2 * k],
        b_extra=bz @ yr[:, k:2 * k],
    )
    if cfg.check_invariants:
        _check_invariants(ops, sigma, out["v"], out["q"], out["r_a"], out["r_b"], z)
    return out


def _eigres(ax, bx, lam_a, lam_b):
    """Relative eigenresiduals ||A x - lambda B x|| / ||A x|| column by column."""
    out = np.empty(ax.shape[1])
    for j in range(ax.shape[1]):
        na = np.linalg.norm(ax[:, j])
        if lam_b[j] == 0:
            res = np.linalg.norm(bx[:, j])
        else:
            res = np.linalg.norm(ax[:, j] - (lam_a[j] / lam_b[j]) * bx[:, j])
        out[j] = 0.0 if res == 0 else res / (na if na > 0 else np.finfo(float).tiny)
    return out


def _ritz_check(v, av, bv, sigma):
    """Standard Rayleigh-Ritz on col(V): eigenresiduals paired with columns in shift order."""
    pairs = dense_eig_pair(v.conj().T @ av, v.conj().T @ bv, sigma, strict=False)
    y = np.column_stack([vec for _, vec in pairs])
    lam_a = np.array([ev.alpha for ev, _ in pairs])
    lam_b = np.array([ev.beta for ev, _ in pairs])
    return _eigres(av @ y, bv @ y, lam_a, lam_b), v @ y


def _start_block(n, k, seed, v0):
    if v0 is not None:
        x = np.array(v0, dtype=np.complex128)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape != (n, k):
            raise ValueError(f"initial block must be {n}x{k}, got {x.shape}")
        return x
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, k)) + 1j * rng.uniform(-1, 1, (n, k))


def _update_lock(eigres, tol, locked):
    q = locked
    while q < len(eigres) and eigres[q] <= tol:
        q += 1
    return q


# public building blocks -----------------------------------------------------------------------

def schur_residuals(p, s: SchurApprox):
    """Residuals of the partial Schur form held in ``s``.

    Returns (w_a, w_b, norms). For B = I the single residual is
    A V m_b - V m_a and w_b has no columns.
    """
    av = p.apply_a(s.v)
    if p.is_standard:
        w_a = av @ s.m_b - s.v @ s.m_a
        w_b = np.zeros((s.v.shape[0], 0), dtype=np.complex128)
        return w_a, w_b, np.linalg.norm(w_a, axis=0)
    bv = p.apply_b(s.v)
    w_a = av - s.q @ s.r_a
    w_b = bv - s.q @ s.r_b
    norms = np.sqrt(np.linalg.norm(w_a, axis=0) ** 2 + np.linalg.norm(w_b, axis=0) ** 2)
    return w_a, w_b, norms


def krylov_arnoldi_block(p, s: SchurApprox, t: Preconditioner, m: int, drop_tol=1e-10,
                         right_project=True):
    """Blocks [W, S_1, ..., S_m], mutually orthonormal and orthogonal to V.

    Raises StagnationError when the residual of ``s`` vanishes.
    """
    state = ConvergenceState()
    ops = _Ops(p, state)
    cfg = SolverConfig(sigma=0, k=s.v.shape[1], m=m, drop_tol=drop_tol,
                       right_projector=right_project, check_invariants=False)
    av, bv = ops.ab(s.v)
    qproj = s.v if p.is_standard else s.q
    blocks = _krylov(ops, t, s.v, qproj, av, bv, s.m_a, s.m_b, 0, m, cfg, state)
    return [b[0] for b in blocks]


def harmonic_srr(p, z_blocks, prev_q, sigma, k):
    """Harmonic extraction from the trial space spanned by ``z_blocks``.

    ``z_blocks[0]`` plays the role of V and ``prev_q`` the matching left
    basis. Returns the new SchurApprox and the extra directions for a thick
    restart (up to k further Schur vectors of the projected pencil).
    """
    state = ConvergenceState()
    ops = _Ops(p, state)
    zb = [(b, *ops.ab(b)) for b in z_blocks if b.shape[1]]
    cfg = SolverConfig(sigma=sigma, k=k, check_invariants=False)
    out = _srr(ops, zb, prev_q, complex(sigma), k, cfg)
    m_a, m_b = qfree_factors(out["r_a"], out["r_b"])
    approx = SchurApprox(out["v"], out["q"], out["r_a"], out["r_b"], m_a, m_b, out["extra"])
    return approx, out["extra"]


# drivers ------------------------------------------------------------------------------------------

def _collect_prec_inner(t):
    return int(getattr(t, "inner_matvecs", 0) or 0)


def gplhr_solve(p, cfg: SolverConfig, t: Preconditioner, v0=None) -> PartialSchurResult:
    """Partial generalized Schur form for the cfg.k eigenvalues closest to cfg.sigma."""
    state = ConvergenceState()
    ops = _Ops(p, state)
    sigma, k, n = cfg.sigma, cfg.k, p.n
    if k > n:
        raise ValueError(f"k={k} exceeds the problem dimension {n}")
    inner0 = _collect_prec_inner(t)

    x0 = _start_block(n, k, cfg.seed, v0)
    v, rank = orth(x0, drop_tol=cfg.drop_tol)
    if rank < k:
        raise ValueError("initial block is rank deficient")
    av, bv = ops.ab(v)
    q, rank = orth(av - sigma * bv, drop_tol=1e-13)
    if rank < k:
        raise SingularPencilError(
            "(A - sigma B) V is rank deficient: the shift is an eigenvalue or the pencil is singular"
        )
    qh = q.conj().T
    sch = ordered_qz(qh @ av, qh @ bv, sigma)
    v, av, bv = v @ sch.y_r, av @ sch.y_r, bv @ sch.y_r
    q = q @ sch.y_l
    r_a, r_b = np.triu(sch.r_a), np.triu(sch.r_b)
    if cfg.check_invariants:
        _check_invariants(ops, sigma, v, q, r_a, r_b, None)
    m_a, m_b = qfree_factors(r_a, r_b)

    p_dir = None  # (P, AP, BP)
    status = "max_iter"
    message = ""
    eigres = np.full(k, np.inf)
    schur_norms = np.full(k, np.inf)
    x_ritz = None
    state.current_m = cfg.m

    for it in range(cfg.max_iter + 1):
        state.iterations = it
        eigres, x_ritz = _ritz_check(v, av, bv, sigma)
        if p.is_standard:
            schur_norms = np.linalg.norm(av @ m_b - v @ m_a, axis=0)
        else:
            schur_norms = np.sqrt(np.linalg.norm(av - q @ r_a, axis=0) ** 2
                                  + np.linalg.norm(bv - q @ r_b, axis=0) ** 2)
        state.residual_history.append(eigres.tolist())
        state.schur_history.append(schur_norms.tolist())
        if state.locked:
            state.locked_drift.append(float(eigres[: state.locked].max()))
        state.locked = _update_lock(eigres, cfg.tol, state.locked)
        state.locked_history.append(state.locked)
        log.info("iteration %d: locked %d/%d, max eigenresidual %.3e",
                 it, state.locked, k, float(eigres[state.locked:].max(initial=0.0)))
        if state.locked == k:
            status = "converged"
            break
        if it == cfg.max_iter:
            break
        ql = state.locked
        m_cur = adapt_m(cfg.m, k, ql) if cfg.adaptive_m else cfg.m
        state.current_m = m_cur
        state.m_history.append(m_cur)

        qproj = v if p.is_standard else q
        try:
            blocks = _krylov(ops, t, v, qproj, av, bv, m_a, m_b, ql, m_cur, cfg, state)
        except StagnationError as exc:
            status = "stagnated"
            message = str(exc)
            log.warning("stagnation at iteration %d: %s", it, exc)
            break

        zb = [(v, av, bv)] + blocks
        if p_dir is not None:
            prep = _prepare_p(ops, *_active_directions(p_dir, ql, k, cfg.direction_mode),
                              zb, cfg, state)
            if prep is not None:
                zb.append(prep)

        out = _srr(ops, zb, q, sigma, k, cfg)
        if cfg.direction_mode == "lobpcg":
            p_dir = (v, av, bv)  # previous V; locked columns are removed below
        v, av, bv, q = out["v"], out["av"], out["bv"], out["q"]
        r_a, r_b = out["r_a"], out["r_b"]
        m_a, m_b = qfree_factors(r_a, r_b)
        if cfg.direction_mode == "thick_restart":
            p_dir = (out["extra"], out["a_extra"], out["b_extra"])

    state.inner_matvec_count = _collect_prec_inner(t) - inner0
    converged = np.arange(k) < state.locked
    if status != "converged":
        # columns that meet tol now but sit behind an unconverged one
        converged = converged | (eigres <= cfg.tol)
    r = None
    if p.is_standard:
        r = np.triu(np.linalg.solve(m_b.T, m_a.T).T)  # m_a @ inv(m_b)
    eigenvalues = [GeneralizedEigenvalue(complex(r_a[j, j]), complex(r_b[j, j])) for j in range(k)]
    return PartialSchurResult(
        v=v, q=q, r_a=r_a, r_b=r_b, r=r, eigenvalues=eigenvalues, converged=converged,
        eigres=eigres, schur_norms=schur_norms, status=status, state=state, x=x_ritz,
        message=message,
    )


def gplhr_eig_solve(p, cfg: SolverConfig, t: Preconditioner, x0=None) -> EigResult:
    """Approximate eigenvectors X and Rayleigh quotients for the cfg.k eigenvalues nearest cfg.sigma."""
    state = ConvergenceState()
    ops = _Ops(p, state)
    sigma, k, n = cfg.sigma, cfg.k, p.n
    if k > n:
        raise ValueError(f"k={k} exceeds the problem dimension {n}")
    inner0 = _collect_prec_inner(t)

    x = _start_block(n, k, cfg.seed, x0)
    x = x / np.linalg.norm(x, axis=0)
    ax, bx = ops.ab(x)
    p_dir = None
    status = "max_iter"
    message = ""
    state.current_m = cfg.m

    def rayleigh(x, ax, bx):
        return (np.einsum("ij,ij->j", x.conj(), ax), np.einsum("ij,ij->j", x.conj(), bx))

    lam_a, lam_b = rayleigh(x, ax, bx)
    eigres = np.full(k, np.inf)
    for it in range(cfg.max_iter + 1):
        state.iterations = it
        eigres = _eigres(ax, bx, lam_a, lam_b)
        state.residual_history.append(eigres.tolist())
        if state.locked:
            state.locked_drift.append(float(eigres[: state.locked].max()))
        state.locked = _update_lock(eigres, cfg.tol, state.locked)
        state.locked_history.append(state.locked)
        log.info("iteration %d: locked %d/%d, max eigenresidual %.3e",
                 it, state.locked, k, float(eigres[state.locked:].max(initial=0.0)))
        if state.locked == k:
            status = "converged"
            break
        if it == cfg.max_iter:
            break
        ql = state.locked
        m_cur = adapt_m(cfg.m, k, ql) if cfg.adaptive_m else cfg.m
        state.current_m = m_cur
        state.m_history.append(m_cur)

        v, rank, tv = orth(x, drop_tol=cfg.drop_tol, return_transform=True)
        av, bv = ax @ tv, bx @ tv
        q, _ = orth(ax - sigma * bx, drop_tol=1e-13)
        qproj = v if p.is_standard else q
        try:
            blocks = _krylov(ops, t, v, qproj, ax, bx, np.diag(lam_a), np.diag(lam_b),
                             ql, m_cur, cfg, state)
        except StagnationError as exc:
            status = "stagnated"
            message = str(exc)
            break
        zb = [(v, av, bv)] + blocks
        if p_dir is not None:
            prep = _prepare_p(ops, *_active_directions(p_dir, ql, k, cfg.direction_mode),
                              zb, cfg, state)
            if prep is not None:
                zb.append(prep)
        x_prev = (x, ax, bx)
        z = np.hstack([b[0] for b in zb])
        az = np.hstack([b[1] for b in zb])
        bz = np.hstack([b[2] for b in zb])
        u = _test_basis(az[:, rank:], bz[:, rank:], q, sigma)
        if u.shape[1] != z.shape[1]:
            raise SingularPencilError("projected pencil is not square; X lost rank")
        if cfg.check_invariants:
            g = np.linalg.norm(z.conj().T @ z - np.eye(z.shape[1]))
            if g > 1e-11:
                raise InvariantViolation(f"trial basis not orthonormal: {g:.3e}")
        uh = u.conj().T
        pairs = dense_eig_pair(uh @ az, uh @ bz, sigma, strict=True)
        y = np.column_stack([vec for _, vec in pairs])
        x, ax, bx = z @ y[:, :k], az @ y[:, :k], bz @ y[:, :k]
        scale = 1.0 / np.linalg.norm(x, axis=0)
        x, ax, bx = x * scale, ax * scale, bx * scale
        lam_a, lam_b = rayleigh(x, ax, bx)
        if cfg.direction_mode == "thick_restart":
            hi = min(2 * k, y.shape[1])
            p_dir = (z @ y[:, k:hi], az @ y[:, k:hi], bz @ y[:, k:hi])
        elif cfg.direction_mode == "lobpcg":
            p_dir = x_prev

    state.inner_matvec_count = _collect_prec_inner(t) - inner0
    converged = (np.arange(k) < state.locked) | (eigres <= cfg.tol)
    eigenvalues = [GeneralizedEigenvalue(complex(a), complex(b)) for a, b in zip(lam_a, lam_b)]
    return EigResult(x=x, lambda_a=lam_a, lambda_b=lam_b, eigenvalues=eigenvalues,
                     converged=converged, eigres=eigres, status=status, state=state,
                     message=message)


def _widen_history(state, done_eigres, done_schur, width):
    """Rewrite one batch's history rows over all requested columns.

    Earlier batches contribute their final values, later ones NaN; locked
    counts become global.
    """
    off = len(done_eigres)

    def widen(rows, done):
        return [list(done) + list(r) + [math.nan] * (width - off - len(r)) for r in rows]

    state.residual_history = widen(state.residual_history, done_eigres)
    state.schur_history = widen(state.schur_history, done_schur)
    state.locked_history = [off + q for q in state.locked_history]


def deflated_solve(p, cfg: SolverConfig, t: Preconditioner, batches: int) -> PartialSchurResult:
    """Collect batches*k Schur vectors, deflating each finished batch from the pencil."""
    if batches < 1:
        raise ValueError("batches must be at least 1")
    if batches == 1:
        return gplhr_solve(p, cfg, t)
    if batches * cfg.k > p.n:
        raise ValueError("more Schur vectors requested than the problem dimension")
    n = p.n
    v_acc = np.zeros((n, 0), dtype=np.complex128)
    q_acc = np.zeros((n, 0), dtype=np.complex128)
    eigenvalues, converged, eigres, schur_norms = [], [], [], []
    total = ConvergenceState()
    width = batches * cfg.k
    status, message = "converged", ""
    for b in range(batches):
        if b == 0:
            op, prec = p, t
        else:
            qd = v_acc if p.is_standard else q_acc
            op = DeflatedPencil(p, v_acc, qd)
            prec = DeflatedPreconditioner(t, v_acc, qd)
        x0 = _start_block(n, cfg.k, cfg.seed + b, None)
        x0 = _project([v_acc], x0)
        try:
            res = gplhr_solve(op, cfg, prec, v0=x0)
        except GPLHRError as exc:
            status, message = "failed", f"batch {b + 1}: {exc}"
            log.error("deflation batch %d failed: %s", b + 1, exc)
            break
        _widen_history(res.state, eigres, schur_norms, width)
        total.absorb(res.state)
        v_new, _ = orth(res.v, against=[v_acc])
        q_new, _ = orth(res.q, against=[q_acc])
        if v_new.shape[1] < cfg.k or q_new.shape[1] < cfg.k:
            status, message = "failed", f"batch {b + 1} is not independent of earlier batches"
            break
        v_acc = np.hstack([v_acc, v_new])
        q_acc = np.hstack([q_acc, q_new])
        eigenvalues.extend(res.eigenvalues)
        converged.extend(res.converged.tolist())
        eigres.extend(res.eigres.tolist())
        schur_norms.extend(res.schur_norms.tolist())
        if not res.all_converged:
            status, message = res.status, f"batch {b + 1} did not converge"
            break
    total.locked = int(sum(converged))
    if p.is_standard:
        q_acc = v_acc
    r_a = q_acc.conj().T @ p.apply_a(v_acc)
    r_b = q_acc.conj().T @ p.apply_b(v_acc)
    r = r_a.copy() if p.is_standard else None
    return PartialSchurResult(
        v=v_acc, q=q_acc, r_a=r_a, r_b=r_b, r=r, eigenvalues=eigenvalues,
        converged=np.array(converged, dtype=bool), eigres=np.array(eigres),
        schur_norms=np.array(schur_norms), status=status, state=total, message=message,
    )
