"""Adaptive TR-AB2 integrator for the incompressible Navier-Stokes equations."""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse as sp

import config
from errors import ConfigurationError, ContractViolation, SolverError
from krylov import SolveReport, sparse_lu
from mesh_fem import (BoundaryData, DofMap, Mesh, apply_dirichlet, assemble_convection, assemble_diffusion,
                      assemble_divergence, assemble_mass, saddle_matrix)

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class FlowProblem:
    """Assembled data shared read-only by every solver on one mesh and viscosity field."""
    mesh: Mesh
    dofmap: DofMap
    boundary: BoundaryData
    viscosity: np.ndarray
    M: sp.csr_matrix
    A: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def n_u(self) -> int:
        return self.dofmap.n_u

    @property
    def n_p(self) -> int:
        return self.dofmap.n_p

    @property
    def area(self) -> float:
        return self.mesh.area

    def convection(self, wind: np.ndarray) -> sp.csr_matrix:
        return assemble_convection(self.mesh, self.dofmap, wind)

    def with_viscosity(self, viscosity: np.ndarray) -> "FlowProblem":
        viscosity = np.asarray(viscosity, dtype=float)
        return replace(self, viscosity=viscosity, A=assemble_diffusion(self.mesh, self.dofmap, viscosity))


def build_flow_problem(mesh: Mesh, dofmap: DofMap, boundary: BoundaryData, viscosity) -> FlowProblem:
    viscosity = np.broadcast_to(np.asarray(viscosity, dtype=float), (mesh.n_nodes,)).copy()
    return FlowProblem(mesh=mesh, dofmap=dofmap, boundary=boundary, viscosity=viscosity,
                       M=assemble_mass(mesh, dofmap), A=assemble_diffusion(mesh, dofmap, viscosity),
                       B=assemble_divergence(mesh, dofmap))


@dataclass(eq=False)
class FlowState:
    """Velocity, acceleration and pressure at t and at the previous level t_prev.

    Arrays are vectors for a deterministic flow and (n, n_xi) matrices of gPC
    coefficients for a stochastic Galerkin flow.
    """
    t: float
    k: float
    u: np.ndarray
    du: np.ndarray
    p: np.ndarray
    u_prev: np.ndarray
    du_prev: np.ndarray
    t_prev: float

    def copy(self) -> "FlowState":
        return FlowState(t=self.t, k=self.k, u=self.u.copy(), du=self.du.copy(), p=self.p.copy(),
                         u_prev=self.u_prev.copy(), du_prev=self.du_prev.copy(), t_prev=self.t_prev)


@dataclass
class StepperConfig:
    tolerance: float = config.TOLERANCE
    initial_step: float = config.INITIAL_STEP
    reject_factor: float = config.REJECT_FACTOR
    averaging_period: int = config.AVERAGING_PERIOD
    final_time: float = config.FINAL_TIME
    barriers: Sequence[float] = config.TIME_BARRIERS
    max_rejections: int = config.MAX_REJECTIONS
    zero_error_growth: float = config.ZERO_ERROR_GROWTH
    max_step: Optional[float] = None

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ConfigurationError("must be positive", key="stepper.tolerance")
        if self.initial_step <= 0:
            raise ConfigurationError("must be positive", key="stepper.initial_step")
        if not 0.0 < self.reject_factor < 1.0:
            raise ConfigurationError("must lie in (0, 1)", key="stepper.reject_factor")
        if self.averaging_period < 2:
            raise ConfigurationError("must be at least 2", key="stepper.averaging_period")
        if self.final_time <= 0:
            raise ConfigurationError("must be positive", key="stepper.final_time")
        if self.max_rejections < 1:
            raise ConfigurationError("must be at least 1", key="stepper.max_rejections")
        if self.zero_error_growth <= 1.0:
            raise ConfigurationError("must exceed 1", key="stepper.zero_error_growth")
        if self.max_step is not None and self.max_step <= 0:
            raise ConfigurationError("must be positive", key="stepper.max_step")
        barriers = [float(t) for t in self.barriers]
        if barriers != sorted(barriers) or (barriers and (barriers[0] < 0 or barriers[-1] > self.final_time)):
            raise ConfigurationError(f"barriers must be sorted within [0, {self.final_time}]", key="barriers")
        self.barriers = tuple(barriers)

    @property
    def reject_threshold(self) -> float:
        return self.tolerance / self.reject_factor ** 3

    def landing_barriers(self) -> List[float]:
        """Positive barriers plus the final time, each landed on exactly."""
        return sorted({t for t in self.barriers if t > 0.0} | {float(self.final_time)})


@dataclass
class StepRecord:
    step: int
    t: float
    k: float
    accepted: bool
    error_norm: float
    gmres_iterations: int = 0
    averaged: bool = False


@dataclass(eq=False)
class RunResult:
    snapshots: Dict[float, FlowState]
    history: List[StepRecord]
    final: FlowState

    def accepted_times(self) -> List[float]:
        return [r.t for r in self.history if r.accepted]


def solve_saddle(F: sp.spmatrix, B: sp.spmatrix, f_u: np.ndarray, f_p: np.ndarray) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    """Direct solve of [[F, B^T], [B, 0]] [u; p] = [f_u; f_p]."""
    K = saddle_matrix(F, B)
    rhs = np.concatenate([f_u, f_p])
    x = sparse_lu(K).solve(rhs)
    rhs_norm = np.linalg.norm(rhs)
    residual = np.linalg.norm(K @ x - rhs) / rhs_norm if rhs_norm > 0 else 0.0
    n_u = F.shape[0]
    return x[:n_u], x[n_u:], SolveReport(iterations=0, relative_residual=float(residual), converged=True)


def initial_acceleration(problem: FlowProblem, u0: np.ndarray, boundary_update: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Solve [M B^T; B 0][du0; p0] = [-A u0 - N(u0) u0; 0] with du0 = boundary_update on Dirichlet dofs."""
    rhs = -(problem.A @ u0) - problem.convection(u0) @ u0
    Mc, Bc, f_u, f_p = apply_dirichlet(problem.M, problem.B, rhs, np.zeros(problem.n_p),
                                       problem.dofmap.dirichlet_dofs, boundary_update)
    du0, p0, _ = solve_saddle(Mc, Bc, f_u, f_p)
    return du0, p0


def extrapolate_wind(state: FlowState, k_next: float) -> np.ndarray:
    """w = (1 + k_next/k_n) u^n - (k_next/k_n) u^{n-1}."""
    if state.k <= 0.0:
        raise ContractViolation(f"previous step size must be positive, got {state.k}")
    ratio = k_next / state.k
    return (1.0 + ratio) * state.u - ratio * state.u_prev


def oseen_step(problem: FlowProblem, state: FlowState, k_next: float, wind: np.ndarray) -> Tuple[np.ndarray, np.ndarray, SolveReport]:
    """TR update d^n and pressure p^{n+1} from (2M + kA + kN(w)) d + B^T p = M du^n - (A + N(w)) u^n."""
    K = problem.A + problem.convection(wind)
    F = 2.0 * problem.M + k_next * K
    rhs = problem.M @ state.du - K @ state.u
    dofs = problem.dofmap.dirichlet_dofs
    values = (problem.boundary.values(state.t + k_next) - state.u[dofs]) / k_next
    Fc, Bc, f_u, f_p = apply_dirichlet(F, problem.B, rhs, np.zeros(problem.n_p), dofs, values)
    return solve_saddle(Fc, Bc, f_u, f_p)


def tr_update(state: FlowState, d: np.ndarray, k_next: float) -> Tuple[np.ndarray, np.ndarray]:
    return state.u + k_next * d, 2.0 * d - state.du


def ab2_predict(state: FlowState, k_next: float) -> np.ndarray:
    ratio = k_next / state.k
    return state.u + 0.5 * k_next * ((2.0 + ratio) * state.du - ratio * state.du_prev)


def estimate_error(u_next: np.ndarray, u_star: np.ndarray, k_n: float, k_next: float,
                   mass: Optional[sp.spmatrix] = None, area: float = 1.0) -> float:
    """Mass-weighted norm sqrt(e^T M e / area) of e = (u - u*) / (3 (1 + k_n/k_next))."""
    e = (u_next - u_star) / (3.0 * (1.0 + k_n / k_next))
    if mass is None:
        return float(np.linalg.norm(e))
    return math.sqrt(max(float(e @ (mass @ e)), 0.0) / area)


def select_step(k_next: float, error_norm: float, tolerance: float, reject_factor: float = config.REJECT_FACTOR,
                zero_error_growth: float = config.ZERO_ERROR_GROWTH) -> Tuple[float, bool]:
    """k_{n+2} = k_{n+1} (tol/err)^(1/3); reject when err > tol / reject_factor^3."""
    if error_norm <= np.finfo(float).tiny:
        return k_next * zero_error_growth, False
    proposal = k_next * (tolerance / error_norm) ** (1.0 / 3.0)
    return proposal, error_norm > tolerance / reject_factor ** 3


def average_step(state: FlowState, d: np.ndarray, k_next: float, p_next: Optional[np.ndarray] = None) -> FlowState:
    """Half-step averaging of an accepted step; `state` is the pre-step level n."""
    t_star = state.t
    return FlowState(
        t=t_star + 0.5 * k_next,
        k=0.5 * (state.k + k_next),
        u=state.u + 0.5 * k_next * d,
        du=d.copy(),
        p=state.p if p_next is None else p_next,
        u_prev=0.5 * (state.u + state.u_prev),
        du_prev=0.5 * (state.du + state.du_prev),
        t_prev=state.t_prev + 0.5 * state.k,
    )


def start_state(problem: FlowProblem, k_first: float,
                acceleration: Optional[Callable] = None) -> FlowState:
    """Zero initial flow with the acceleration consistent with the first boundary update.

    u_prev is seeded as u0 - k_first du0 so the first extrapolated wind is u0 + k_first du0.
    """
    u0 = problem.boundary.lift(0.0)
    dofs = problem.dofmap.dirichlet_dofs
    update = (problem.boundary.values(k_first) - u0[dofs]) / k_first
    du0, p0 = (acceleration or initial_acceleration)(problem, u0, update)
    return FlowState(t=0.0, k=k_first, u=u0, du=du0, p=p0, u_prev=u0 - k_first * du0, du_prev=du0.copy(),
                     t_prev=-k_first)


def _accept(state: FlowState, u_next, du_next, p_next, k_next: float, t_next: float) -> FlowState:
    return FlowState(t=t_next, k=k_next, u=u_next, du=du_next, p=p_next,
                     u_prev=state.u, du_prev=state.du, t_prev=state.t)


def _next_barrier(barriers: List[float], t: float) -> Optional[float]:
    return next((b for b in barriers if b > t), None)


def run(problem: FlowProblem, stepper: StepperConfig) -> RunResult:
    """Adaptive TR-AB2 from rest to the final time, landing exactly on every barrier."""
    barriers = stepper.landing_barriers()
    k0 = stepper.initial_step
    state = start_state(problem, k0)
    history = [StepRecord(step=0, t=0.0, k=k0, accepted=True, error_norm=0.0)]
    snapshots = {0.0: state.copy()} if 0.0 in stepper.barriers else {}

    k_target = k0
    accepted = rejections = attempt = 0
    while state.t < stepper.final_time:
        attempt += 1
        k_next = min(k_target, stepper.max_step) if stepper.max_step else k_target
        barrier = _next_barrier(barriers, state.t)
        landing = state.t + k_next >= barrier - 1e-12 * max(1.0, barrier)
        if landing:
            k_next = barrier - state.t

        wind = extrapolate_wind(state, k_next)
        d, p_next, report = oseen_step(problem, state, k_next, wind)
        u_next, du_next = tr_update(state, d, k_next)
        err = estimate_error(u_next, ab2_predict(state, k_next), state.k, k_next, problem.M, problem.area)
        proposal, reject = select_step(k_next, err, stepper.tolerance, stepper.reject_factor,
                                       stepper.zero_error_growth)
        controlled = accepted >= 2

        if controlled and reject:
            rejections += 1
            history.append(StepRecord(step=accepted + 1, t=state.t + k_next, k=k_next, accepted=False,
                                      error_norm=err, gmres_iterations=report.iterations))
            logger.debug(f"Rejected step {accepted + 1}: k={k_next:.3e}, err={err:.3e}")
            if rejections >= stepper.max_rejections:
                raise SolverError(f"{rejections} consecutive rejections at t={state.t:.6g}", step=accepted + 1)
            k_target = proposal
            continue

        rejections = 0
        accepted += 1
        averaged = accepted % stepper.averaging_period == 0 and not landing
        if averaged:
            new_state = average_step(state, d, k_next, p_next)
        else:
            new_state = _accept(state, u_next, du_next, p_next, k_next, barrier if landing else state.t + k_next)
        state = new_state
        history.append(StepRecord(step=accepted, t=state.t, k=k_next, accepted=True, error_norm=err,
                                  gmres_iterations=report.iterations, averaged=averaged))
        logger.debug(f"Step {accepted}: t={state.t:.6e}, k={k_next:.3e}, err={err:.3e}")

        if accepted == 1:
            k_target = k0
        elif not landing or accepted == 2:
            k_target = proposal
        if landing:
            logger.info(f"Reached barrier t={barrier:g} after {accepted} steps")
            snapshots[barrier] = state.copy()

    return RunResult(snapshots=snapshots, history=history, final=state)


StepSolver = Callable[[FlowState, float, np.ndarray], Tuple[np.ndarray, np.ndarray, SolveReport]]


def integrate_schedule(state: FlowState, landings: Sequence[float], barriers: Sequence[float],
                       solve: StepSolver, averaging_period: int = config.AVERAGING_PERIOD,
                       record: Optional[Callable[[FlowState, StepRecord], None]] = None) -> RunResult:
    """Step through prescribed landing times with no error control.

    Averaging still runs every `averaging_period` steps away from barriers.
    Arrays in `state` may carry gPC columns; `solve` decides how a step is
    solved.
    """
    barrier_set = set(float(b) for b in barriers if b > 0.0)
    history = [StepRecord(step=0, t=state.t, k=state.k, accepted=True, error_norm=0.0)]
    snapshots = {0.0: state.copy()} if 0.0 in barriers else {}
    if record:
        record(state, history[0])

    for step, landing in enumerate(landings, start=1):
        k_next = landing - state.t
        if k_next <= 0.0:
            raise SolverError(f"schedule does not advance past t={state.t:.6g}", step=step)
        wind = extrapolate_wind(state, k_next)
        try:
            d, p_next, report = solve(state, k_next, wind)
        except SolverError as e:
            raise SolverError(str(e), step=step) from e
        at_barrier = landing in barrier_set
        averaged = step % averaging_period == 0 and not at_barrier
        if averaged:
            new_state = average_step(state, d, k_next, p_next)
        else:
            u_next, du_next = tr_update(state, d, k_next)
            new_state = _accept(state, u_next, du_next, p_next, k_next, landing)
        state = new_state
        entry = StepRecord(step=step, t=state.t, k=k_next, accepted=True, error_norm=float("nan"),
                           gmres_iterations=report.iterations, averaged=averaged)
        history.append(entry)
        if record:
            record(state, entry)
        if at_barrier:
            logger.info(f"Reached barrier t={landing:g} after {step} steps")
            snapshots[landing] = state.copy()

    return RunResult(snapshots=snapshots, history=history, final=state)


def run_fixed(problem: FlowProblem, landings: Sequence[float], barriers: Sequence[float],
              averaging_period: int = config.AVERAGING_PERIOD) -> RunResult:
    """Deterministic run on a prescribed schedule of landing times."""
    if not len(landings):
        raise ConfigurationError("schedule is empty", key="stepper.schedule")
    state = start_state(problem, landings[0])
    solve = lambda s, k, w: oseen_step(problem, s, k, w)
    return integrate_schedule(state, landings, barriers, solve, averaging_period)
