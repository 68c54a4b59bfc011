"""Stochastic Galerkin Oseen solves in matricized (Kronecker) form."""
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse as sp
from scipy.sparse.linalg import LinearOperator

import config
from errors import ConfigurationError, ContractViolation, SolverError
from krylov import BlockSolver, SolveReport, chebyshev_mass_solve, fgmres, make_block_solver, sparse_lu
from mesh_fem import (Q1_MASS_JACOBI_BOUNDS, apply_dirichlet, assemble_diffusion, assemble_pressure_convection,
                      assemble_pressure_diffusion, assemble_pressure_mass, constrain, inflow_pressure_nodes,
                      saddle_matrix)
from random_field import GpcBasis, LognormalViscosity, TripleProductTensor, triple_products
from stepper_det import FlowProblem, FlowState, StepRecord, integrate_schedule

logger = logging.getLogger(__name__)


@dataclass
class SolverSettings:
    tolerance: float = config.GMRES_TOLERANCE
    max_iter: int = config.GMRES_MAX_ITER
    restart: Optional[int] = None
    block_solver: str = "exact"
    sweeps: int = config.SMOOTHER_SWEEPS
    chebyshev_iterations: int = config.CHEBYSHEV_ITERATIONS
    chebyshev_bounds: Tuple[float, float] = Q1_MASS_JACOBI_BOUNDS


class SgState(FlowState):
    """FlowState whose arrays hold one gPC coefficient column per basis function."""

    @property
    def n_xi(self) -> int:
        return self.u.shape[1]

    def matricized(self) -> np.ndarray:
        """V = [U; P], column k holding (u_k, p_k)."""
        return np.vstack([self.u, self.p])

    def copy(self) -> "SgState":
        return SgState(**vars(FlowState.copy(self)))


@dataclass(eq=False)
class SgProblem:
    """Mean flow data plus the stochastic coefficients shared by every SG step."""
    flow: FlowProblem
    viscosity: LognormalViscosity
    basis: GpcBasis
    H: TripleProductTensor
    diffusion: List[Optional[sp.csr_matrix]]
    settings: SolverSettings
    M_p: sp.csr_matrix
    A_p: sp.csc_matrix
    M_p_solve: Callable[[np.ndarray], np.ndarray]
    A_p_solve: BlockSolver
    inflow_pressure: np.ndarray

    @property
    def n_xi(self) -> int:
        return self.basis.size

    @property
    def n_hat(self) -> int:
        return self.H.n_hat


def build_sg_problem(flow: FlowProblem, viscosity: LognormalViscosity, basis: GpcBasis,
                     settings: Optional[SolverSettings] = None) -> SgProblem:
    settings = settings or SolverSettings()
    mesh, dofmap = flow.mesh, flow.dofmap
    H = triple_products(viscosity.basis, basis)
    diffusion = [assemble_diffusion(mesh, dofmap, nu) if np.any(nu) else None for nu in viscosity.coefficients]
    diffusion += [None] * (H.n_hat - len(diffusion))

    free = dofmap.free_mask
    B_c = flow.B @ sp.diags(free)
    T_inv = sp.diags(1.0 / flow.M.diagonal())
    A_p = (B_c @ T_inv @ B_c.T).tocsc()
    M_p = assemble_pressure_mass(mesh)
    if settings.block_solver == "exact":
        M_p_solve = sparse_lu(M_p).solve
    else:
        M_p_solve = functools.partial(chebyshev_mass_solve, M_p, iters=settings.chebyshev_iterations,
                                      bounds=settings.chebyshev_bounds)
    logger.info(f"SG problem: n_xi={basis.size}, n_nu={viscosity.n_nu}, n_hat={H.n_hat}, "
                f"{sum(m.nnz for m in H.matrices)} triple-product nonzeros")
    return SgProblem(flow=flow, viscosity=viscosity, basis=basis, H=H, diffusion=diffusion, settings=settings,
                     M_p=M_p, A_p=A_p, M_p_solve=M_p_solve,
                     A_p_solve=make_block_solver(A_p, settings.block_solver, settings.sweeps),
                     inflow_pressure=inflow_pressure_nodes(mesh))


@dataclass(eq=False)
class SgOseenOperator:
    """Constrained blocks F_l of the SG Oseen system; F_1 carries the B blocks."""
    blocks: List[Optional[sp.csr_matrix]]
    B: sp.csr_matrix
    H: TripleProductTensor
    k: float

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_p(self) -> int:
        return self.B.shape[0]

    @property
    def n_xi(self) -> int:
        return self.H.n_xi

    @property
    def shape(self) -> Tuple[int, int]:
        n = (self.n_u + self.n_p) * self.n_xi
        return n, n

    def as_linear_operator(self) -> LinearOperator:
        n_x = self.n_u + self.n_p
        matvec = lambda v: sg_matvec(self, v.reshape((n_x, self.n_xi), order="F")).ravel(order="F")
        return LinearOperator(self.shape, matvec=matvec, dtype=float)


def _right_multiply(X: np.ndarray, H: sp.spmatrix) -> np.ndarray:
    """X @ H for dense X and sparse H."""
    return np.asarray((H.T @ X.T).T)


def _stochastic_terms(sgp: SgProblem, wind: np.ndarray) -> List[Optional[sp.csr_matrix]]:
    """K_l = A_l + N(w_l), with N(w_l) only for l within the solution basis."""
    terms = []
    for l in range(sgp.n_hat):
        K = sgp.diffusion[l]
        if l < wind.shape[1] and np.any(wind[:, l]):
            N = sgp.flow.convection(wind[:, l])
            K = N if K is None else K + N
        terms.append(K)
    return terms


def _unconstrained_blocks(sgp: SgProblem, terms: List, k_next: float) -> List[Optional[sp.csr_matrix]]:
    blocks = [None if K is None else k_next * K for K in terms]
    blocks[0] = 2.0 * sgp.flow.M if blocks[0] is None else 2.0 * sgp.flow.M + blocks[0]
    return blocks


def assemble_sg_operator(sgp: SgProblem, state: FlowState, k_next: float, wind: np.ndarray,
                         terms: Optional[List] = None) -> SgOseenOperator:
    """F_1 = 2M + k K_1 and F_l = k K_l, constrained on the Dirichlet dofs."""
    if wind.shape != (sgp.flow.n_u, sgp.n_xi):
        raise ContractViolation(f"wind must have shape {(sgp.flow.n_u, sgp.n_xi)}, got {wind.shape}")
    terms = terms if terms is not None else _stochastic_terms(sgp, wind)
    free = sgp.flow.dofmap.free_mask
    blocks = [None if F is None else constrain(F, free, identity=(l == 0))
              for l, F in enumerate(_unconstrained_blocks(sgp, terms, k_next))]
    B_c = (sgp.flow.B @ sp.diags(free)).tocsr()
    return SgOseenOperator(blocks=blocks, B=B_c, H=sgp.H, k=k_next)


def sg_matvec(op: SgOseenOperator, V: np.ndarray) -> np.ndarray:
    """Y = sum_l Fcal_l V H_l for V of shape (n_u + n_p, n_xi)."""
    n_u = op.n_u
    if V.shape != (n_u + op.n_p, op.n_xi):
        raise ContractViolation(f"V must have shape {(n_u + op.n_p, op.n_xi)}, got {V.shape}")
    U, P = V[:n_u], V[n_u:]
    Y_u = op.B.T @ P
    for F, H in zip(op.blocks, op.H.matrices):
        if F is None or H.nnz == 0:
            continue
        Y_u = Y_u + _right_multiply(F @ U, H)
    return np.vstack([Y_u, op.B @ U])


def kronecker_matrix(op: SgOseenOperator) -> sp.csr_matrix:
    """Explicit sum_l H_l (x) Fcal_l; for inspection and small checks only."""
    total = None
    for l, (F, H) in enumerate(zip(op.blocks, op.H.matrices)):
        if F is None:
            continue
        Fcal = saddle_matrix(F, op.B) if l == 0 else sp.block_diag((F, sp.csr_matrix((op.n_p, op.n_p))))
        term = sp.kron(H, Fcal)
        total = term if total is None else total + term
    return total.tocsr()


def diagonal_block(op: SgOseenOperator, j: int) -> sp.csc_matrix:
    """Saddle-point block (j, j): Fcal_1 + sum_{l>=2} h_{l,jj} Fcal_l."""
    F = op.blocks[0].copy()
    for F_l, H in zip(op.blocks[1:], op.H.matrices[1:]):
        if F_l is not None and H[j, j] != 0.0:
            F = F + H[j, j] * F_l
    return saddle_matrix(F, op.B)


class MeanBasedPcd:
    """Block upper-triangular PCD preconditioner built from the mean (l = 1) operator.

    Each gPC column is preconditioned independently:
    p = -A_p^-1 F_p M_p^-1 r_p, then u = F_1^-1 (r_u - B^T p). The exact mode factorizes
    A_p, M_p and F_1; the iterated mode uses ILU sweeps for A_p and F_1 and Chebyshev for M_p.
    """

    def __init__(self, sgp: SgProblem, op: SgOseenOperator, mean_wind: np.ndarray):
        s = sgp.settings
        mesh = sgp.flow.mesh
        self.n_u = op.n_u
        self.B = op.B
        self.M_p_solve = sgp.M_p_solve
        self.A_p_solve = sgp.A_p_solve
        self.F_solve = make_block_solver(op.blocks[0], s.block_solver, s.sweeps)

        K_p = assemble_pressure_diffusion(mesh, sgp.viscosity.mean_field)
        if np.any(mean_wind):
            K_p = K_p + assemble_pressure_convection(mesh, mean_wind)
        F_p = (2.0 * sgp.M_p + op.k * K_p).tocsr()
        keep = np.ones(F_p.shape[0])
        keep[sgp.inflow_pressure] = 0.0
        self.F_p = (sp.diags(keep) @ F_p @ sp.diags(keep) + sp.diags((1.0 - keep) * F_p.diagonal())).tocsr()

    def apply(self, R: np.ndarray) -> np.ndarray:
        R_u, R_p = R[:self.n_u], R[self.n_u:]
        z = self.M_p_solve(R_p)
        P = -self.A_p_solve(self.F_p @ z)
        U = self.F_solve(R_u - self.B.T @ P)
        return np.vstack([U.reshape(R_u.shape), P.reshape(R_p.shape)])


def pcd_apply(pcd: MeanBasedPcd, R: np.ndarray) -> np.ndarray:
    return pcd.apply(R)


def sg_oseen_solve(op: SgOseenOperator, pcd: MeanBasedPcd, RHS: np.ndarray, tol: float = 1e-8,
                   max_iter: int = 100, restart: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    """fGMRES on the matricized system from a zero initial iterate."""
    n_x, n_xi = RHS.shape
    precond = lambda v: pcd.apply(v.reshape((n_x, n_xi), order="F")).ravel(order="F")
    x, report = fgmres(op.as_linear_operator(), precond, RHS.ravel(order="F"), tol, max_iter, restart)
    if not report.converged:
        raise SolverError(f"fGMRES did not converge: residual {report.relative_residual:.3e} "
                          f"after {report.iterations} iterations")
    X = x.reshape((n_x, n_xi), order="F")
    return X[:op.n_u], X[op.n_u:], report


def sg_step(sgp: SgProblem, state: FlowState, k_next: float, wind: np.ndarray) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    """One SG Oseen step: assemble, build the right-hand side with the lift, precondition and solve."""
    flow = sgp.flow
    terms = _stochastic_terms(sgp, wind)
    op = assemble_sg_operator(sgp, state, k_next, wind, terms)

    rhs = flow.M @ state.du
    for K, H in zip(terms, sgp.H.matrices):
        if K is not None and H.nnz:
            rhs = rhs - _right_multiply(K @ state.u, H)

    dofs = flow.dofmap.dirichlet_dofs
    lift = np.zeros_like(state.u)
    lift[dofs, 0] = flow.boundary.values(state.t + k_next)
    lift[dofs] = (lift[dofs] - state.u[dofs]) / k_next
    for F, H in zip(_unconstrained_blocks(sgp, terms, k_next), sgp.H.matrices):
        if F is not None and H.nnz:
            rhs = rhs - _right_multiply(F @ lift, H)
    rhs_p = -(flow.B @ lift)
    rhs[dofs] = lift[dofs]

    pcd = MeanBasedPcd(sgp, op, wind[:, 0])
    s = sgp.settings
    return sg_oseen_solve(op, pcd, np.vstack([rhs, rhs_p]), s.tolerance, s.max_iter, s.restart)


def sg_initial_state(sgp: SgProblem, k_first: float) -> SgState:
    """Rest state with the acceleration modes of the first boundary update; modes >= 2 start at zero.

    As in the deterministic start, u_prev = U0 - k_first dU0.
    """
    flow = sgp.flow
    n_xi = sgp.n_xi
    U0 = np.zeros((flow.n_u, n_xi))
    U0[:, 0] = flow.boundary.lift(0.0)
    rhs = np.zeros_like(U0)
    for K, H in zip(_stochastic_terms(sgp, U0), sgp.H.matrices):
        if K is not None and H.nnz:
            rhs = rhs - _right_multiply(K @ U0, H)
    dofs = flow.dofmap.dirichlet_dofs
    update = np.zeros((len(dofs), n_xi))
    update[:, 0] = (flow.boundary.values(k_first) - U0[dofs, 0]) / k_first
    Mc, Bc, f_u, f_p = apply_dirichlet(flow.M, flow.B, rhs, np.zeros((flow.n_p, n_xi)), dofs, update)
    solution = sparse_lu(saddle_matrix(Mc, Bc)).solve(np.vstack([f_u, f_p]))
    dU0, P0 = solution[:flow.n_u], solution[flow.n_u:]
    return SgState(t=0.0, k=k_first, u=U0, du=dU0, p=P0, u_prev=U0 - k_first * dU0, du_prev=dU0.copy(),
                   t_prev=-k_first)


@dataclass
class SgSchedule:
    landings: List[float]
    barriers: List[float]

    @property
    def final_time(self) -> float:
        return self.landings[-1]

    @property
    def steps(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.landings]))


def substep_size(interval: float, n_xi: int) -> float:
    """interval / n_xi rounded down to a power of ten."""
    return 10.0 ** math.floor(math.log10(interval / n_xi) + 1e-9)


def build_sg_schedule(det_history: Sequence, n_xi: int, barriers: Sequence[float]) -> SgSchedule:
    """Landing times from a deterministic run: each interval split into power-of-ten sub-steps."""
    times = [r.t if isinstance(r, StepRecord) else float(r) for r in det_history
             if not isinstance(r, StepRecord) or r.accepted]
    times = sorted(set(times))
    if len(times) < 2:
        raise ConfigurationError("deterministic history is empty", key="schedule")
    end = times[-1]
    stops = sorted(set(float(b) for b in barriers if 0.0 < b <= end))

    landings = []
    for a, b in zip(times[:-1], times[1:]):
        h = substep_size(b - a, n_xi)
        targets = [s for s in stops if a < s < b] + [b]
        t = a
        for target in targets:
            while t < target:
                nxt = t + h
                if nxt >= target - 1e-12 * max(1.0, target):
                    nxt = target
                landings.append(nxt)
                t = nxt
    logger.info(f"SG schedule: {len(landings)} steps over {len(times) - 1} deterministic intervals")
    return SgSchedule(landings=landings, barriers=[0.0] + stops if 0.0 in barriers else stops)


@dataclass(eq=False)
class SgRunResult:
    snapshots: Dict[float, SgState]
    history: List[StepRecord]
    times: List[float] = field(default_factory=list)
    mode_norms: List[np.ndarray] = field(default_factory=list)
    mode_norms_x: List[np.ndarray] = field(default_factory=list)
    divergence: List[float] = field(default_factory=list)


def mode_norms(U: np.ndarray, n_nodes: Optional[int] = None) -> np.ndarray:
    """Euclidean norm of each velocity coefficient column (x component only when n_nodes is given)."""
    return np.linalg.norm(U if n_nodes is None else U[:n_nodes], axis=0)


def sg_run(sgp: SgProblem, schedule: SgSchedule, averaging_period: int = config.AVERAGING_PERIOD) -> SgRunResult:
    """Evolve all gPC coefficients on the prescribed schedule."""
    state = sg_initial_state(sgp, schedule.landings[0])
    result = SgRunResult(snapshots={}, history=[])
    n_nodes = sgp.flow.dofmap.n_nodes

    def record(s: FlowState, entry: StepRecord):
        result.times.append(s.t)
        result.mode_norms.append(mode_norms(s.u))
        result.mode_norms_x.append(mode_norms(s.u, n_nodes))
        divergence = float(np.max(np.linalg.norm(sgp.flow.B @ s.u, axis=0)))
        result.divergence.append(divergence)
        if entry.step:
            logger.debug(f"SG step {entry.step}: t={s.t:.6e}, k={entry.k:.3e}, "
                         f"{entry.gmres_iterations} fGMRES iterations, max |B u_k|={divergence:.2e}")

    def solve(s, k, w):
        return sg_step(sgp, s, k, w)

    run = integrate_schedule(state, schedule.landings, schedule.barriers, solve, averaging_period, record)
    result.snapshots = {t: SgState(**vars(snap)) for t, snap in run.snapshots.items()}
    result.history = run.history
    return result
