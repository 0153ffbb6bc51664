"""Command-line front end.

Reads A (and optionally B) from Matrix Market files, runs one of the solvers
and writes a JSON run report, plus a CSV residual history next to it.

Exit codes: 0 all requested eigenvalues converged, 2 partial convergence,
1 solver error or failed verification, 64 usage error, 66 unreadable or
malformed input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import DimensionMismatchError, GPLHRError, MatrixMarketError
from .matrix import Pencil, read_matrix_market
from .precond import build_preconditioner, parse_prec_spec
from .solver import (
    InvariantViolation,
    SolverConfig,
    deflated_solve,
    gplhr_eig_solve,
    gplhr_solve,
)

__all__ = [
    "RunReport",
    "Verdict",
    "parse_complex",
    "build_parser",
    "make_report",
    "verify_against_oracle",
    "run",
    "main",
]

log = logging.getLogger("gplhr")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64
EXIT_NOINPUT = 66

ORACLE_MAX_N = 2000
VERIFY_TOL = 1e-7


class UsageError(Exception):
    pass


def _signed(text):
    if text in ("", "+"):
        return 1.0
    if text == "-":
        return -1.0
    return float(text)


def parse_complex(text: str) -> complex:
    """Parse ``<re>+<im>i``, ``<re>-<im>i``, ``<im>i`` or a plain real (``j`` also accepted)."""
    s = text.strip().replace(" ", "")
    try:
        if s[-1:] in ("i", "j"):
            body = s[:-1]
            # split at the last sign that is not an exponent sign or the leading sign
            cut = None
            for pos in range(len(body) - 1, 0, -1):
                if body[pos] in "+-" and body[pos - 1] not in "eE":
                    cut = pos
                    break
            if cut is None:
                z = complex(0.0, _signed(body))
            else:
                z = complex(float(body[:cut]), _signed(body[cut:]))
        else:
            z = complex(float(s), 0.0)
    except ValueError:
        raise ValueError(f"cannot parse '{text}' as a complex number") from None
    if not (math.isfinite(z.real) and math.isfinite(z.imag)):
        raise ValueError(f"'{text}' is not a finite number")
    return z


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError("must be a positive number")
    return v


def _complex_arg(text):
    try:
        return parse_complex(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _glue_shift(argv):
    """Let ``--shift -0.1+0.5i`` through: argparse would take the value for an option."""
    out = []
    it = iter(argv)
    for a in it:
        if a == "--shift":
            nxt = next(it, None)
            if nxt is not None and nxt.startswith("-") and not nxt.startswith("--"):
                out.append(f"--shift={nxt}")
                continue
            out.append(a)
            if nxt is not None:
                out.append(nxt)
            continue
        out.append(a)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(
        prog="gplhr",
        description="k eigenvalues of a sparse pencil (A, B) closest to a shift.",
    )
    ap.add_argument("--matrix-a", required=True, metavar="PATH", help="Matrix Market file for A")
    ap.add_argument("--matrix-b", metavar="PATH", help="Matrix Market file for B (default: identity)")
    ap.add_argument("--shift", required=True, type=_complex_arg, metavar="C",
                    help="target shift, e.g. 10, -0.1+0.5i, 2i")
    ap.add_argument("--nev", required=True, type=_positive_int, metavar="K",
                    help="number of eigenvalues")
    ap.add_argument("--m", type=_nonneg_int, default=1, help="Krylov blocks per iteration (default 1)")
    ap.add_argument("--tol", type=_positive_float, default=1e-8,
                    help="relative eigenresidual tolerance (default 1e-8)")
    ap.add_argument("--max-iter", type=_positive_int, default=500, help="iteration limit (default 500)")
    ap.add_argument("--prec", default="none", metavar="SPEC",
                    help="none | jacobi | ilut:<tol> | gmres:<steps>+<inner> (default none)")
    ap.add_argument("--mode", choices=("schur", "eig"), default="schur",
                    help="iterate on Schur vectors or on eigenvectors")
    ap.add_argument("--directions", choices=("thick", "lobpcg", "none"), default="thick",
                    help="extra search directions (default thick)")
    ap.add_argument("--batches", type=_positive_int, default=1,
                    help="split nev over this many deflated runs (nev must be a multiple)")
    ap.add_argument("--seed", type=int, default=0, help="seed for the random starting block")
    ap.add_argument("--report", metavar="PATH",
                    help="write the JSON report here ('-' for stdout); a .csv residual history is written alongside")
    ap.add_argument("--verify", action="store_true",
                    help="check the result against a dense QZ of the full pencil (n <= 2000)")
    ap.add_argument("--threads", type=_positive_int, default=None,
                    help="cap on BLAS worker threads")
    ap.add_argument("--version", action="version", version=f"gplhr {__version__}")
    return ap


# Reports ------------------------------------------------------------------------

def _cpair(z):
    z = complex(z)
    return [z.real, z.imag]


@dataclass
class RunReport:
    eigenvalues: list
    iterations: int
    matvec_count: int
    prec_count: int
    inner_matvec_count: int
    residual_history: list
    converged: list
    status: str
    wall_time: float
    config: dict
    final_eigres: list = field(default_factory=list)
    schur_history: list = field(default_factory=list)
    m_history: list = field(default_factory=list)
    locked_history: list = field(default_factory=list)
    locked_drift: list = field(default_factory=list)
    message: str = ""
    verification: dict | None = None

    def to_dict(self):
        """Plain data; NaN and infinities (unstarted deflation columns) become None."""
        return _jsonable(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def values(self):
        """Reported eigenvalues as complex numbers (inf for beta = 0)."""
        out = []
        for e in self.eigenvalues:
            out.append(complex(math.inf, 0.0) if e["infinite"] else complex(e["re"], e["im"]))
        return np.array(out, dtype=np.complex128)

    def write(self, path):
        if str(path) == "-":
            sys.stdout.write(self.to_json() + "\n")
            return
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        self.write_csv(path.with_suffix(".csv"))

    def write_csv(self, path):
        k = len(self.converged)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + [f"eigres_{j}" for j in range(k)])
            for it, row in enumerate(self.residual_history):
                w.writerow([it] + [repr(float(x)) for x in row])


def _jsonable(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def make_report(result, sigma, config: dict, wall_time: float) -> RunReport:
    """Build a report from a solver result, columns sorted by distance to sigma."""
    sigma = complex(sigma)
    eigs = list(result.eigenvalues)
    dist = np.array([e.distance(sigma) for e in eigs])
    order = np.argsort(dist, kind="stable")
    entries = []
    for j in order:
        e = eigs[j]
        inf = e.is_infinite
        lam = None if inf else e.value
        entries.append({
            "re": None if inf else lam.real,
            "im": None if inf else lam.imag,
            "alpha": _cpair(e.alpha),
            "beta": _cpair(e.beta),
            "infinite": bool(inf),
        })
    state = result.state
    hist = [[row[j] for j in order] for row in state.residual_history]
    schur = [[row[j] for j in order] for row in state.schur_history]
    return RunReport(
        eigenvalues=entries,
        iterations=int(state.iterations),
        matvec_count=int(state.matvec_count),
        prec_count=int(state.prec_count),
        inner_matvec_count=int(state.inner_matvec_count),
        residual_history=hist,
        converged=[bool(result.converged[j]) for j in order],
        status=result.status,
        wall_time=float(wall_time),
        config=config,
        final_eigres=[float(result.eigres[j]) for j in order],
        schur_history=schur,
        m_history=list(state.m_history),
        locked_history=list(state.locked_history),
        locked_drift=list(state.locked_drift),
        message=result.message,
    )


# Verification -------------------------------------------------------------------

@dataclass
class Verdict:
    status: str  # "pass" | "fail" | "oracle_error"
    max_mismatch: float
    column: int | None
    message: str

    @property
    def passed(self):
        return self.status == "pass"


def _oracle_eigenvalues(p: Pencil):
    a, b = p.todense()
    w = scipy.linalg.eigvals(a, b, homogeneous_eigvals=True, check_finite=True)
    alpha, beta = w
    out = np.full(alpha.shape, complex(math.inf, 0.0))
    fin = beta != 0
    out[fin] = alpha[fin] / beta[fin]
    return out


def verify_against_oracle(p: Pencil, report: RunReport, sigma, k: int,
                          max_n: int = ORACLE_MAX_N, tol: float = VERIFY_TOL) -> Verdict:
    """Compare the reported eigenvalues with a dense QZ of the full pencil.

    The k oracle eigenvalues closest to sigma are matched one-to-one with the
    reported ones so that the worst relative mismatch is smallest.
    """
    n = p.n
    if n > max_n:
        raise ValueError(f"n={n} exceeds the dense oracle limit {max_n}")
    sigma = complex(sigma)
    mine = report.values()
    if len(mine) != k:
        return Verdict("fail", math.inf, None, f"report has {len(mine)} eigenvalues, expected {k}")
    try:
        ev = _oracle_eigenvalues(p)
    except (np.linalg.LinAlgError, ValueError) as exc:
        return Verdict("oracle_error", math.nan, None, f"dense QZ failed: {exc}")
    if k > len(ev):
        return Verdict("oracle_error", math.nan, None, "oracle returned fewer eigenvalues than requested")
    dist = np.where(np.isfinite(ev), np.abs(ev - sigma), np.inf)
    ref = ev[np.argsort(dist, kind="stable")[:k]]

    def rel(x, y):
        if np.isinf(x) and np.isinf(y):
            return 0.0
        if np.isinf(x) or np.isinf(y):
            return math.inf
        return abs(x - y) / abs(y) if y != 0 else abs(x - y)

    cost = np.array([[rel(x, y) for y in ref] for x in mine])
    finite_cost = np.where(np.isfinite(cost), cost, 1e300)
    rows, cols = linear_sum_assignment(finite_cost)
    errs = cost[rows, cols]
    worst = int(np.argmax(errs))
    col = int(rows[worst])
    mm = float(errs[worst])
    if mm <= tol:
        return Verdict("pass", mm, None, f"max relative mismatch {mm:.3e}")
    return Verdict("fail", mm, col,
                   f"column {col}: reported {mine[col]} vs oracle {ref[cols[worst]]} "
                   f"(relative mismatch {mm:.3e} > {tol:g})")


# Driver ---------------------------------------------------------------------------

def _setup_logging():
    level_name = os.environ.get("GPLHR_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
    level = levels.get(level_name, logging.ERROR)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False
    if level_name not in levels:
        log.error("unknown GPLHR_LOG value '%s'; using 'error'", level_name)


def _load(args):
    a = read_matrix_market(args.matrix_a)
    b = read_matrix_market(args.matrix_b) if args.matrix_b else None
    return Pencil(a, b)


def _config_echo(args):
    return {
        "matrix_a": args.matrix_a,
        "matrix_b": args.matrix_b,
        "shift": _cpair(args.shift),
        "nev": args.nev,
        "m": args.m,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "prec": args.prec,
        "mode": args.mode,
        "directions": args.directions,
        "batches": args.batches,
        "seed": args.seed,
        "threads": args.threads,
    }


def _solve(p, args, cfg):
    t = build_preconditioner(p, args.shift, args.prec)
    if args.mode == "eig":
        return gplhr_eig_solve(p, cfg, t)
    if args.batches > 1:
        return deflated_solve(p, cfg, t, args.batches)
    return gplhr_solve(p, cfg, t)


def _summary(report: RunReport, out):
    out.write(f"status: {report.status}  iterations: {report.iterations}  "
              f"matvecs: {report.matvec_count}  preconditioner applications: {report.prec_count}\n")
    for j, e in enumerate(report.eigenvalues):
        lam = "inf" if e["infinite"] else f"{complex(e['re'], e['im']):.12g}"
        flag = "converged" if report.converged[j] else "not converged"
        out.write(f"  {j:3d}  {lam:>40s}  eigres {report.final_eigres[j]:.2e}  {flag}\n")


def run(argv=None, stdout=None):
    """Run the command line; returns (report or None, exit code)."""
    stdout = stdout or sys.stdout
    _setup_logging()
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        args = build_parser().parse_args(_glue_shift(argv))
        spec = parse_prec_spec(args.prec)
        args.prec = str(spec)
    except UsageError as exc:
        sys.stderr.write(f"gplhr: usage error: {exc}\n")
        return None, EXIT_USAGE
    except ValueError as exc:
        sys.stderr.write(f"gplhr: usage error: {exc}\n")
        return None, EXIT_USAGE

    try:
        p = _load(args)
    except (MatrixMarketError, DimensionMismatchError) as exc:
        sys.stderr.write(f"gplhr: cannot read input: {exc}\n")
        return None, EXIT_NOINPUT
    except OSError as exc:
        sys.stderr.write(f"gplhr: cannot read input: {exc}\n")
        return None, EXIT_NOINPUT

    if args.nev > p.n:
        sys.stderr.write(f"gplhr: usage error: --nev {args.nev} exceeds the dimension {p.n}\n")
        return None, EXIT_USAGE
    if args.batches > args.nev:
        sys.stderr.write("gplhr: usage error: --batches cannot exceed --nev\n")
        return None, EXIT_USAGE
    if args.nev % args.batches:
        sys.stderr.write("gplhr: usage error: --nev must be a multiple of --batches\n")
        return None, EXIT_USAGE
    if args.batches > 1 and args.mode == "eig":
        sys.stderr.write("gplhr: usage error: --batches requires --mode schur\n")
        return None, EXIT_USAGE

    cfg = SolverConfig(
        sigma=args.shift, k=args.nev // args.batches, m=args.m, tol=args.tol, max_iter=args.max_iter,
        direction_mode=args.directions, seed=args.seed,
    )
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=args.threads):
            result = _solve(p, args, cfg)
    except (GPLHRError, InvariantViolation, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"gplhr: solver error: {type(exc).__name__}: {exc}\n")
        return None, EXIT_ERROR
    wall = time.perf_counter() - t0

    report = make_report(result, args.shift, _config_echo(args), wall)
    code = EXIT_OK if result.all_converged else EXIT_PARTIAL

    if args.verify:
        try:
            verdict = verify_against_oracle(p, report, args.shift, args.nev)
        except ValueError as exc:
            report.verification = {"status": "skipped", "message": str(exc)}
            log.error("verification skipped: %s", exc)
        else:
            report.verification = asdict(verdict)
            if not verdict.passed:
                label = "oracle failure" if verdict.status == "oracle_error" else "verification failed"
                sys.stderr.write(f"gplhr: {label}: {verdict.message}\n")
                code = EXIT_ERROR

    if args.report:
        try:
            report.write(args.report)
        except OSError as exc:
            sys.stderr.write(f"gplhr: cannot write report: {exc}\n")
            return report, EXIT_ERROR
    if args.report != "-":
        _summary(report, stdout)
        if report.verification is not None:
            stdout.write(f"verification: {report.verification['status']} "
                         f"({report.verification['message']})\n")
    return report, code


def main(argv=None) -> int:
    _, code = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
