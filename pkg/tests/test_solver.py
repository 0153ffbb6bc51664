import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from gplhr import (
    GPLHRError,
    SchurApprox,
    SingularPencilError,
    SolverConfig,
    StagnationError,
    adapt_m,
    build_preconditioner,
    deflated_solve,
    dense_eig_pair,
    gplhr_eig_solve,
    gplhr_solve,
    harmonic_srr,
    krylov_arnoldi_block,
    orth,
    ordered_qz,
    qfree_factors,
    schur_residuals,
)
from gplhr.solver import _update_lock
from pencils import crandn, dense_pencil, diag_pencil, match_error, nearest, oracle_eigenvalues


def values(res):
    return np.array([e.value for e in res.eigenvalues])


def schur_from(p, v, sigma):
    """Partial Schur approximation carried by the span of v."""
    av, bv = p.apply_a(v), p.apply_b(v)
    q, _ = orth(av - sigma * bv, drop_tol=1e-13)
    qh = q.conj().T
    sch = ordered_qz(qh @ av, qh @ bv, sigma)
    r_a, r_b = np.triu(sch.r_a), np.triu(sch.r_b)
    m_a, m_b = qfree_factors(r_a, r_b)
    return SchurApprox(v @ sch.y_r, q @ sch.y_l, r_a, r_b, m_a, m_b, np.zeros((v.shape[0], 0)))


def random_problem(seed, n=60, generalized=True):
    rng = np.random.default_rng(seed)
    a = np.diag(np.arange(1, n + 1) + 0.3j * rng.standard_normal(n)) + 0.3 * crandn(rng, n, n) / np.sqrt(n)
    b = np.eye(n) + (0.05 * crandn(rng, n, n) / np.sqrt(n) if generalized else 0)
    return a, (b if generalized else None)


class CountingPencil:
    """Pencil wrapper counting A and B products column by column."""

    def __init__(self, p):
        self.p = p
        self.a_cols = 0
        self.b_cols = 0

    n = property(lambda self: self.p.n)
    is_standard = property(lambda self: self.p.is_standard)

    def apply_a(self, x):
        self.a_cols += x.shape[1]
        return self.p.apply_a(x)

    def apply_b(self, x):
        self.b_cols += x.shape[1]
        return self.p.apply_b(x)

    def shifted_norm(self, sigma):
        return self.p.shifted_norm(sigma)


# locking and m ----------------------------------------------------------------------------

def test_adapt_m_examples():
    assert adapt_m(1, 5, 0) == 1
    assert adapt_m(1, 5, 4) == 5
    assert adapt_m(3, 10, 9) == 20
    assert adapt_m(5, 5, 4) == 20
    with pytest.raises(ValueError):
        adapt_m(1, 5, 5)


@given(st.integers(0, 10), st.integers(1, 30), st.data())
def test_adapt_m_monotone(m0, k, data):
    q = data.draw(st.integers(0, k - 1))
    m = adapt_m(m0, k, q)
    assert min(m0, 20) <= m <= 20
    if q + 1 < k:
        assert adapt_m(m0, k, q + 1) >= m


def test_locking_is_contiguous():
    assert _update_lock([1e-9, 1.0, 1e-9], 1e-8, 0) == 1
    assert _update_lock([1.0, 1e-9, 1e-9], 1e-8, 0) == 0
    assert _update_lock([1e-9, 1e-9, 1e-9], 1e-8, 0) == 3
    assert _update_lock([1.0, 1.0, 1e-9], 1e-8, 2) == 3


# end to end ----------------------------------------------------------------------------------

def test_diag_example():
    p = diag_pencil(np.arange(1, 11))
    t = build_preconditioner(p, 5.2, "gmres:n+none")
    res = gplhr_solve(p, SolverConfig(sigma=5.2, k=2), t)
    assert res.all_converged and res.status == "converged"
    assert match_error(values(res), [5, 6]) <= 1e-10
    assert res.state.iterations <= 5
    hist = res.state.locked_history
    assert hist == sorted(hist)


def test_k_equals_n():
    p = diag_pencil(np.arange(1, 7))
    res = gplhr_solve(p, SolverConfig(sigma=2.2, k=6), build_preconditioner(p, 2.2, "none"))
    assert res.all_converged
    assert np.allclose(values(res).real, [2, 3, 1, 4, 5, 6])


@pytest.mark.parametrize("mode", ["thick", "lobpcg", "none"])
def test_direction_modes_agree(mode):
    a, b = random_problem(2)
    p = dense_pencil(a, b)
    sigma = 20.3 + 0.1j
    t = build_preconditioner(p, sigma, "ilut:1e-2")
    res = gplhr_solve(p, SolverConfig(sigma=sigma, k=3, tol=1e-10, direction_mode=mode), t)
    assert res.all_converged
    ref = nearest(oracle_eigenvalues(a, b), sigma, 3)
    assert match_error(values(res), ref) <= 1e-8


def test_identity_marker_matches_explicit_identity():
    a, _ = random_problem(4, generalized=False)
    p1 = dense_pencil(a)
    p2 = dense_pencil(a, np.eye(a.shape[0]))
    cfg = SolverConfig(sigma=10.4, k=3, tol=1e-11)
    r1 = gplhr_solve(p1, cfg, build_preconditioner(p1, 10.4, "jacobi"))
    r2 = gplhr_solve(p2, cfg, build_preconditioner(p2, 10.4, "jacobi"))
    assert r1.all_converged and r2.all_converged
    assert match_error(values(r1), values(r2)) <= 1e-10


def test_standard_schur_form():
    a, _ = random_problem(5, generalized=False)
    p = dense_pencil(a)
    res = gplhr_solve(p, SolverConfig(sigma=30.1, k=4, tol=1e-10), build_preconditioner(p, 30.1, "ilut:1e-3"))
    assert res.all_converged
    assert np.array_equal(res.r, np.triu(res.r))
    assert np.linalg.norm(a @ res.v - res.v @ res.r) <= 1e-8 * np.linalg.norm(a)
    assert np.allclose(np.diag(res.r), values(res), rtol=1e-10)
    assert np.linalg.norm(res.v.conj().T @ res.v - np.eye(4)) <= 1e-12


def test_generalized_schur_form():
    a, b = random_problem(6)
    p = dense_pencil(a, b)
    res = gplhr_solve(p, SolverConfig(sigma=12.6, k=3, tol=1e-10), build_preconditioner(p, 12.6, "ilut:1e-3"))
    assert res.all_converged and res.r is None
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    assert np.linalg.norm(a @ res.v - res.q @ res.r_a) <= 1e-8 * scale
    assert np.linalg.norm(b @ res.v - res.q @ res.r_b) <= 1e-8 * scale
    assert match_error(values(res), nearest(oracle_eigenvalues(a, b), 12.6, 3)) <= 1e-8


@pytest.mark.parametrize("generalized", [False, True])
def test_matvec_count(generalized):
    a, b = random_problem(7, generalized=generalized)
    base = dense_pencil(a, b)
    p = CountingPencil(base)
    cfg = SolverConfig(sigma=15.5, k=3, m=2, tol=1e-9, check_invariants=False)
    res = gplhr_solve(p, cfg, build_preconditioner(base, 15.5, "jacobi"))
    st_ = res.state
    assert st_.matvec_count == p.a_cols
    if generalized:
        assert p.b_cols == p.a_cols
    else:
        assert p.b_cols == 0
    expected = cfg.k + st_.explicit_p_matvecs + sum(
        (m + 1) * (cfg.k - q) for m, q in zip(st_.m_history, st_.locked_history))
    assert st_.matvec_count <= expected
    assert st_.matvec_count == expected  # no rank drops on a generic problem


def test_determinism():
    a, b = random_problem(8)
    p = dense_pencil(a, b)
    cfg = SolverConfig(sigma=9.9, k=2, seed=3)
    r1 = gplhr_solve(p, cfg, build_preconditioner(p, 9.9, "jacobi"))
    r2 = gplhr_solve(p, cfg, build_preconditioner(p, 9.9, "jacobi"))
    assert np.array_equal(r1.v, r2.v)
    assert r1.state.residual_history == r2.state.residual_history


def test_shift_on_eigenvalue():
    p = diag_pencil(np.arange(1, 11))
    try:
        res = gplhr_solve(p, SolverConfig(sigma=5.0, k=2), build_preconditioner(p, 5.0, "jacobi"))
    except SingularPencilError:
        return
    assert 5 in np.round(values(res).real)


def test_right_projector_not_worse():
    p = diag_pencil(np.arange(1, 101) + 0.0)
    counts = {}
    for flag in (True, False):
        cfg = SolverConfig(sigma=50.3, k=3, tol=1e-9, right_projector=flag)
        res = gplhr_solve(p, cfg, build_preconditioner(p, 50.3, "gmres:10+jacobi"))
        assert res.all_converged
        counts[flag] = res.state.iterations
    assert counts[True] <= counts[False] + 2


def test_max_iter_reports_partial():
    a, b = random_problem(9)
    p = dense_pencil(a, b)
    res = gplhr_solve(p, SolverConfig(sigma=30.5, k=3, max_iter=1), build_preconditioner(p, 30.5, "none"))
    assert res.status == "max_iter"
    assert not res.all_converged
    assert res.state.iterations == 1


def test_config_errors():
    for kw in (dict(k=0), dict(m=-1), dict(tol=0), dict(max_iter=0), dict(direction_mode="x"),
               dict(sigma=complex("nan"))):
        args = dict(sigma=1.0, k=1)
        args.update(kw)
        with pytest.raises(ValueError):
            SolverConfig(**args)
    p = diag_pencil([1.0, 2.0])
    with pytest.raises(ValueError):
        gplhr_solve(p, SolverConfig(sigma=1.5, k=3), build_preconditioner(p, 1.5, "none"))


# building blocks ---------------------------------------------------------------------------------

@pytest.mark.parametrize("generalized", [False, True])
def test_schur_residual_slope(generalized):
    a, b = random_problem(10, n=40, generalized=generalized)
    p = dense_pencil(a, b)
    exact = gplhr_solve(p, SolverConfig(sigma=20.2, k=3, tol=1e-13, max_iter=60),
                        build_preconditioner(p, 20.2, "gmres:n+none"))
    e = crandn(np.random.default_rng(0), 40, 3)
    norms = []
    for eps in (1e-4, 1e-6):
        s = SchurApprox(exact.v + eps * e, exact.q, exact.r_a, exact.r_b,
                        *qfree_factors(exact.r_a, exact.r_b), np.zeros((40, 0)))
        norms.append(np.linalg.norm(schur_residuals(p, s)[2]))
    assert 50 <= norms[0] / norms[1] <= 200


def test_schur_residuals_exact_examples():
    p = diag_pencil([1.0, 2.0])
    e1 = np.array([[1.0], [0.0]], dtype=complex)
    s = SchurApprox(e1, e1, np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.zeros((2, 0)))
    w_a, w_b, norms = schur_residuals(p, s)
    assert np.allclose(norms, 0) and w_b.shape == (2, 0)
    a, b = random_problem(15, n=30)
    pg = dense_pencil(a, b)
    ex = gplhr_solve(pg, SolverConfig(sigma=10.1, k=3, tol=1e-13, max_iter=60),
                     build_preconditioner(pg, 10.1, "gmres:n+none"))
    s = SchurApprox(ex.v, ex.q, ex.r_a, ex.r_b, *qfree_factors(ex.r_a, ex.r_b), np.zeros((30, 0)))
    assert np.all(schur_residuals(pg, s)[2] <= 1e-12 * (np.linalg.norm(a) + np.linalg.norm(b)))


def test_krylov_block_shapes():
    a, b = random_problem(11, n=50)
    p = dense_pencil(a, b)
    v, _ = orth(crandn(np.random.default_rng(1), 50, 3))
    s = schur_from(p, v, 25.5)
    t = build_preconditioner(p, 25.5, "jacobi")
    assert len(krylov_arnoldi_block(p, s, t, 0)) == 1
    blocks = krylov_arnoldi_block(p, s, t, 2)
    assert len(blocks) == 3
    z = np.hstack([s.v] + blocks)
    assert np.linalg.norm(z.conj().T @ z - np.eye(z.shape[1])) <= 1e-12


def test_krylov_exact_space_stagnates():
    p = diag_pencil(np.arange(1, 11) + 0.0)
    v = np.eye(10, dtype=complex)[:, [4, 5]]
    s = schur_from(p, v, 5.2)
    with pytest.raises(StagnationError):
        krylov_arnoldi_block(p, s, build_preconditioner(p, 5.2, "none"), 1)


def test_harmonic_srr_diag_example():
    p = diag_pencil(np.arange(1, 7) + 0.0)
    rng = np.random.default_rng(2)
    v, _ = orth(crandn(rng, 6, 2))
    s0 = schur_from(p, v, 3.4)
    rest, _ = orth(crandn(rng, 6, 4), against=[s0.v])
    approx, extra = harmonic_srr(p, [s0.v, rest], s0.q, 3.4, 2)
    lam = np.diag(approx.r_a) / np.diag(approx.r_b)
    assert np.allclose(lam, [3, 4])
    assert extra.shape == (6, 2)


def test_harmonic_srr_invariant_subspace():
    rng = np.random.default_rng(16)
    n = 30
    x, _ = np.linalg.qr(crandn(rng, n, n))
    lam = np.arange(1, n + 1) + 0.5j * rng.standard_normal(n)
    a = x @ np.diag(lam) @ np.linalg.inv(x)
    p = dense_pencil(a)
    basis, _ = orth(x[:, 10:14])
    s0 = schur_from(p, basis[:, :2], 12.2)
    rest, _ = orth(basis, against=[s0.v])
    approx, _ = harmonic_srr(p, [s0.v, rest], s0.q, 12.2, 2)
    got = np.diag(approx.r_a) / np.diag(approx.r_b)
    assert match_error(got, nearest(lam[10:14], 12.2, 2)) <= 1e-12


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_harmonic_srr_matches_dense(seed):
    rng = np.random.default_rng(seed)
    n, s, k = 40, 12, 3
    a, b = crandn(rng, n, n), np.eye(n) + 0.2 * crandn(rng, n, n)
    p = dense_pencil(a, b)
    sigma = complex(*rng.standard_normal(2))
    v, _ = orth(crandn(rng, n, k))
    s0 = schur_from(p, v, sigma)
    rest, _ = orth(crandn(rng, n, s - k), against=[s0.v])
    approx, _ = harmonic_srr(p, [s0.v, rest], s0.q, sigma, k)
    z = np.hstack([s0.v, rest])
    u, _ = orth((a - sigma * b) @ z)
    ref = [e.value for e, _ in dense_eig_pair(u.conj().T @ a @ z, u.conj().T @ b @ z, sigma)[:k]]
    got = np.diag(approx.r_a) / np.diag(approx.r_b)
    assert match_error(got, ref) <= 1e-12


# eigenvector variant -------------------------------------------------------------------------------

def test_eig_solve_diag_example():
    p = diag_pencil(np.arange(1, 9) + 0.0)
    res = gplhr_eig_solve(p, SolverConfig(sigma=4.3, k=2), build_preconditioner(p, 4.3, "gmres:n+none"))
    assert res.all_converged
    assert np.allclose(sorted(values(res).real), [4, 5], atol=1e-8)
    for j, lam in enumerate(values(res)):
        axis = np.zeros(8)
        axis[int(round(lam.real)) - 1] = 1
        assert np.linalg.norm(np.abs(res.x[:, j]) - axis) <= 1e-8


def test_eig_solve_hermitian():
    rng = np.random.default_rng(12)
    h = crandn(rng, 50, 50)
    h = (h + h.conj().T) / 2 + np.diag(np.arange(50.0))
    p = dense_pencil(h)
    res = gplhr_eig_solve(p, SolverConfig(sigma=25.1, k=3, tol=1e-10), build_preconditioner(p, 25.1, "ilut:1e-2"))
    assert res.all_converged
    ref = nearest(np.linalg.eigvalsh(h), 25.1, 3)
    assert match_error(values(res), ref) <= 1e-8
    assert np.allclose(values(res).imag, 0, atol=1e-10)


# deflation -----------------------------------------------------------------------------------------

def test_deflation_diag_example():
    p = diag_pencil(np.arange(1, 11) + 0.0)
    t = build_preconditioner(p, 5.2, "gmres:n+none")
    res = deflated_solve(p, SolverConfig(sigma=5.2, k=2), t, 2)
    assert res.status == "converged"
    assert np.allclose(values(res).real, [5, 6, 4, 7], atol=1e-8)
    assert np.linalg.norm(res.v.conj().T @ res.v - np.eye(4)) <= 1e-10


def test_deflation_single_batch_is_plain_solve():
    a, b = random_problem(13)
    p = dense_pencil(a, b)
    cfg = SolverConfig(sigma=7.7, k=2)
    r1 = deflated_solve(p, cfg, build_preconditioner(p, 7.7, "jacobi"), 1)
    r2 = gplhr_solve(p, cfg, build_preconditioner(p, 7.7, "jacobi"))
    assert np.array_equal(values(r1), values(r2))


@pytest.mark.parametrize("generalized", [False, True])
def test_deflation_matches_single_run(generalized):
    a, b = random_problem(14, n=100, generalized=generalized)
    p = dense_pencil(a, b)
    sigma = 40.4
    t = build_preconditioner(p, sigma, "ilut:1e-3")
    d = deflated_solve(p, SolverConfig(sigma=sigma, k=3, tol=1e-10), t, 2)
    s = gplhr_solve(p, SolverConfig(sigma=sigma, k=6, tol=1e-10), t)
    assert d.status == "converged" and s.all_converged
    assert match_error(values(d), values(s)) <= 1e-8


def test_deflation_errors():
    p = diag_pencil(np.arange(1, 5) + 0.0)
    t = build_preconditioner(p, 2.2, "none")
    with pytest.raises(ValueError):
        deflated_solve(p, SolverConfig(sigma=2.2, k=2), t, 0)
    with pytest.raises(ValueError):
        deflated_solve(p, SolverConfig(sigma=2.2, k=2), t, 3)


def test_error_hierarchy():
    assert issubclass(StagnationError, GPLHRError)
    assert issubclass(SingularPencilError, GPLHRError)


def test_sparse_input_path():
    m = sp.diags([np.ones(199), np.arange(1, 201) + 0j, 0.5 * np.ones(199)], [-1, 0, 1])
    from gplhr import Pencil, SparseMatrix

    p = Pencil(SparseMatrix.from_scipy(m))
    res = gplhr_solve(p, SolverConfig(sigma=100.3, k=4, tol=1e-9), build_preconditioner(p, 100.3, "ilut:1e-4"))
    assert res.all_converged
    ref = nearest(np.linalg.eigvals(m.toarray()), 100.3, 4)
    assert match_error(values(res), ref) <= 1e-8
