"""Sparse direct solves, flexible GMRES and Chebyshev semi-iteration."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import sparse as sp
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import LinearOperator, aslinearoperator, spilu, splu

from errors import ConfigurationError, ContractViolation, FactorizationError

logger = logging.getLogger(__name__)

SOLVER_MODES = ("exact", "iterated")


@dataclass
class SolveReport:
    iterations: int
    relative_residual: float
    converged: bool
    breakdown: bool = False
    residual_history: List[float] = field(default_factory=list)


class SparseLU:
    """SuperLU factorization handle; `solve` accepts one or several right-hand sides."""

    def __init__(self, matrix: sp.spmatrix):
        if matrix.shape[0] != matrix.shape[1]:
            raise ContractViolation(f"cannot factorize a {matrix.shape} matrix")
        try:
            self._lu = splu(sp.csc_matrix(matrix))
        except RuntimeError as e:
            raise FactorizationError(f"sparse LU failed: {e}") from e
        self.shape = matrix.shape

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    __call__ = solve


def sparse_lu(matrix: sp.spmatrix) -> SparseLU:
    return SparseLU(matrix)


class BlockSolver:
    """Inner solver for a velocity block: exact LU or fixed ILU-split stationary sweeps."""

    def __init__(self, matrix: sp.spmatrix, mode: str = "exact", sweeps: int = 2):
        if mode not in SOLVER_MODES:
            raise ConfigurationError(f"unknown block solver {mode!r}, expected one of {SOLVER_MODES}",
                                     key="solver.block_solver")
        self.mode = mode
        self.sweeps = sweeps
        self.matrix = sp.csc_matrix(matrix)
        if mode == "exact":
            self._inner = sparse_lu(self.matrix).solve
        else:
            try:
                self._inner = spilu(self.matrix, drop_tol=1e-4, fill_factor=10.0).solve
            except RuntimeError as e:
                raise FactorizationError(f"incomplete LU failed: {e}") from e

    def __call__(self, b: np.ndarray) -> np.ndarray:
        if self.mode == "exact":
            return self._inner(b)
        x = self._inner(b)
        for _ in range(self.sweeps - 1):
            x = x + self._inner(b - self.matrix @ x)
        return x


def make_block_solver(matrix: sp.spmatrix, mode: str = "exact", sweeps: int = 2) -> BlockSolver:
    return BlockSolver(matrix, mode, sweeps)


def as_operator(op, n: Optional[int] = None) -> LinearOperator:
    if isinstance(op, LinearOperator):
        return op
    if callable(op) and not sp.issparse(op):
        return LinearOperator((n, n), matvec=op, dtype=float)
    return aslinearoperator(op)


def fgmres(op, precond: Optional[Callable[[np.ndarray], np.ndarray]], rhs: np.ndarray,
           tol: float = 1e-8, max_iter: int = 100, restart: Optional[int] = None) -> Tuple[np.ndarray, SolveReport]:
    """Right-preconditioned flexible GMRES from a zero initial iterate.

    The preconditioner may change between iterations; the preconditioned
    directions are stored and the update is formed from them. Runs without
    restarting unless `restart` is given.
    """
    if tol <= 0:
        raise ContractViolation(f"tolerance must be positive, got {tol}")
    b = np.asarray(rhs, dtype=float)
    n = b.shape[0]
    A = as_operator(op, n)
    if A.shape != (n, n):
        raise ContractViolation(f"operator shape {A.shape} does not match rhs length {n}")
    M = precond if precond is not None else (lambda v: v)

    x = np.zeros(n)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return x, SolveReport(iterations=0, relative_residual=0.0, converged=True, residual_history=[0.0])

    history = [1.0]
    total = 0
    converged = breakdown = False
    r = b.copy()
    while True:
        beta = np.linalg.norm(r)
        m = min(restart or max_iter, max_iter - total)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta

        for j in range(m):
            Z[j] = M(V[j])
            w = A.matvec(Z[j])
            w_norm = np.linalg.norm(w)
            for i in range(j + 1):
                H[i, j] = np.dot(w, V[i])
                w -= H[i, j] * V[i]
            h_next = np.linalg.norm(w)
            H[j + 1, j] = h_next

            for i in range(j):
                H[i, j], H[i + 1, j] = (cs[i] * H[i, j] + sn[i] * H[i + 1, j],
                                        -sn[i] * H[i, j] + cs[i] * H[i + 1, j])
            denom = math.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = (H[j, j] / denom, H[j + 1, j] / denom) if denom > 0 else (1.0, 0.0)
            lucky = h_next <= 1e-14 * w_norm
            H[j, j], H[j + 1, j] = denom, 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]

            total += 1
            history.append(abs(g[j + 1]) / b_norm)
            converged = history[-1] <= tol
            if lucky and not converged:
                breakdown = True
            if converged or lucky or total >= max_iter:
                break
            V[j + 1] = w / h_next

        k = j + 1
        y = solve_triangular(H[:k, :k], g[:k])
        x += Z[:k].T @ y
        r = b - A.matvec(x)
        if converged or breakdown or total >= max_iter:
            break

    true_residual = np.linalg.norm(r) / b_norm
    converged = converged or true_residual <= tol
    if not converged:
        logger.warning(f"fGMRES stopped after {total} iterations at relative residual {true_residual:.3e}")
    return x, SolveReport(iterations=total, relative_residual=float(true_residual), converged=converged,
                          breakdown=breakdown, residual_history=history)


def gershgorin_bounds(matrix: sp.spmatrix, diagonal: np.ndarray) -> Tuple[float, float]:
    """Eigenvalue enclosure of D^-1 A; the lower end is clamped to 1% of the upper."""
    scaled = sp.diags(1.0 / diagonal) @ abs(sp.csr_matrix(matrix))
    center = np.abs(np.asarray(matrix.diagonal()) / diagonal)
    radius = np.asarray(scaled.sum(axis=1)).ravel() - center
    hi = float(np.max(center + radius))
    lo = float(np.min(center - radius))
    return max(lo, 0.01 * hi), hi


def chebyshev_mass_solve(M_p: sp.spmatrix, r: np.ndarray, iters: int = 5,
                         bounds: Optional[Tuple[float, float]] = None, jacobi: bool = True) -> np.ndarray:
    """Chebyshev semi-iteration for M_p x = r, preconditioned by diag(M_p) when `jacobi`.

    `bounds` encloses the spectrum of the (scaled) matrix; a Gershgorin
    estimate is used when omitted. Equal bounds reduce to damped Richardson.
    """
    diagonal = np.asarray(M_p.diagonal(), dtype=float) if jacobi else np.ones(M_p.shape[0])
    lo, hi = bounds if bounds is not None else gershgorin_bounds(M_p, diagonal)
    if not 0.0 < lo <= hi:
        raise ConfigurationError(f"invalid Chebyshev bounds ({lo}, {hi})", key="solver.chebyshev_bounds")

    r = np.asarray(r, dtype=float)
    inv_diag = (1.0 / diagonal).reshape((-1,) + (1,) * (r.ndim - 1))
    theta, delta = 0.5 * (hi + lo), 0.5 * (hi - lo)
    x = np.zeros_like(r)
    residual = r.copy()
    d = inv_diag * residual / theta
    if delta == 0.0:
        for _ in range(iters):
            x += d
            residual = residual - M_p @ d
            d = inv_diag * residual / theta
        return x
    sigma = theta / delta
    rho = 1.0 / sigma
    for _ in range(iters):
        x += d
        residual = residual - M_p @ d
        rho_next = 1.0 / (2.0 * sigma - rho)
        d = rho_next * rho * d + (2.0 * rho_next / delta) * (inv_diag * residual)
        rho = rho_next
    return x
