"""Interior eigenvalues of sparse non-Hermitian pencils by a preconditioned block iteration."""

__version__ = "0.1.0"

from .dense import (
    GeneralizedEigenvalue,
    OrderedSchur,
    QFreeScaling,
    dense_eig_pair,
    ordered_qz,
    orth,
    qfree_factors,
    qfree_scaling,
)
from .errors import (
    DeficientEigenvalueError,
    DimensionMismatchError,
    GPLHRError,
    MatrixMarketError,
    PreconditionerBuildError,
    QZConvergenceError,
    SingularPencilError,
)
from .matrix import Pencil, SparseMatrix, read_matrix_market, spmm, write_matrix_market
from .precond import (
    GMRESPreconditioner,
    IdentityPreconditioner,
    ILUTPreconditioner,
    JacobiPreconditioner,
    Preconditioner,
    PrecSpec,
    apply_prec,
    apply_projected_prec,
    build_preconditioner,
    ilut,
    parse_prec_spec,
)
from .solver import (
    ConvergenceState,
    EigResult,
    InvariantViolation,
    PartialSchurResult,
    SchurApprox,
    SolverConfig,
    StagnationError,
    adapt_m,
    deflated_solve,
    gplhr_eig_solve,
    gplhr_solve,
    harmonic_srr,
    krylov_arnoldi_block,
    schur_residuals,
)

__all__ = [name for name in dir() if not name.startswith("_")]
