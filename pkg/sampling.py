"""Monte Carlo and sparse-grid collocation ensembles of deterministic runs."""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Sequence

import numpy as np

from errors import ConfigurationError, ContractViolation, SolverSuiteError
from random_field import GpcBasis, LognormalViscosity, gauss_hermite, sample_viscosity
from stepper_det import FlowProblem, StepperConfig, run, run_fixed

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class SampleSet:
    points: np.ndarray   # (n, m)
    weights: np.ndarray  # (n,)
    provenance: str
    seed: Optional[int] = None
    level: Optional[int] = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def m(self) -> int:
        return self.points.shape[1]


@dataclass(eq=False)
class EnsembleResult:
    """Barrier snapshots of every sample, NaN-filled where a sample failed."""
    samples: SampleSet
    barriers: List[float]
    velocity: np.ndarray   # (n_samples, n_barriers, n_u)
    pressure: np.ndarray   # (n_samples, n_barriers, n_p)
    histories: List[list] = field(default_factory=list)
    errors: List[Optional[str]] = field(default_factory=list)
    wall_clock: List[float] = field(default_factory=list)

    @property
    def succeeded(self) -> np.ndarray:
        return np.array([e is None for e in self.errors], dtype=bool)


@dataclass
class Moments:
    mean: np.ndarray
    variance: np.ndarray
    n_samples: int
    variance_defined: bool = True


def draw_mc(n: int, m: int, seed: Optional[int] = None) -> SampleSet:
    """n i.i.d. standard Gaussian points in R^m with equal weights."""
    if n < 1:
        raise ConfigurationError(f"need at least one sample, got {n}", key="sampling.n_mc")
    rng = np.random.default_rng(seed)
    return SampleSet(points=rng.standard_normal((n, m)), weights=np.full(n, 1.0 / n), provenance="mc", seed=seed)


def build_sparse_grid(m: int, level: int) -> SampleSet:
    """Smolyak combination of i-point Gauss-Hermite rules, exact for total degree 2*level + 1.

    Coinciding points of the component tensor grids are merged; weights
    can be negative.
    """
    if level < 0:
        raise ConfigurationError(f"must be nonnegative, got {level}", key="sampling.level")
    q = level + m
    rules = {i: gauss_hermite(i) for i in range(1, level + 2)}
    merged: Dict[tuple, List] = {}
    for levels in product(range(1, level + 2), repeat=m):
        norm = sum(levels)
        if not q - m + 1 <= norm <= q:
            continue
        coefficient = (-1) ** (q - norm) * math.comb(m - 1, q - norm)
        points = product(*(rules[i][0] for i in levels))
        weights = product(*(rules[i][1] for i in levels))
        for point, weight in zip(points, weights):
            key = tuple(round(x, 12) + 0.0 for x in point)
            entry = merged.setdefault(key, [np.array(point), 0.0])
            entry[1] += coefficient * math.prod(weight)

    points = np.array([v[0] for v in merged.values()]).reshape(-1, m)
    weights = np.array([v[1] for v in merged.values()])
    keep = np.abs(weights) > 1e-15
    logger.info(f"Sparse grid: m={m}, level={level}, {np.count_nonzero(keep)} points")
    return SampleSet(points=points[keep], weights=weights[keep], provenance=f"smolyak level {level}", level=level)


def _run_sample(index: int, xi: np.ndarray, problem: FlowProblem, viscosity: LognormalViscosity,
                stepper: StepperConfig, barriers: List[float], landings: Optional[Sequence[float]]):
    started = time.perf_counter()
    try:
        sample_problem = problem.with_viscosity(sample_viscosity(viscosity, xi))
        if landings is not None:
            result = run_fixed(sample_problem, landings, barriers, stepper.averaging_period)
        else:
            result = run(sample_problem, stepper)
        snaps = [result.snapshots[t] for t in barriers]
        return (np.stack([s.u for s in snaps]), np.stack([s.p for s in snaps]), result.history, None,
                time.perf_counter() - started)
    except SolverSuiteError as e:
        logger.error(f"Sample {index} (xi={np.round(xi, 4).tolist()}) failed: {e}")
        return None, None, [], str(e), time.perf_counter() - started


def run_ensemble(samples: SampleSet, problem: FlowProblem, viscosity: LognormalViscosity, stepper: StepperConfig,
                 threads: int = 1, landings: Optional[Sequence[float]] = None) -> EnsembleResult:
    """One independent deterministic run per sample point; failures are recorded, not raised."""
    barriers = sorted(set(stepper.barriers) | {float(stepper.final_time)})
    n_u, n_p = problem.n_u, problem.n_p

    def job(index):
        outcome = _run_sample(index, samples.points[index], problem, viscosity, stepper, barriers, landings)
        if (index + 1) % 10 == 0:
            logger.info(f"Ensemble progress: {index + 1}/{len(samples)} samples")
        return outcome

    with ThreadPoolExecutor(max_workers=threads) as pool:
        outcomes = list(pool.map(job, range(len(samples))))

    velocity = np.full((len(samples), len(barriers), n_u), np.nan)
    pressure = np.full((len(samples), len(barriers), n_p), np.nan)
    result = EnsembleResult(samples=samples, barriers=barriers, velocity=velocity, pressure=pressure)
    for q, (u, p, history, error, seconds) in enumerate(outcomes):
        if error is None:
            velocity[q], pressure[q] = u, p
        result.histories.append(history)
        result.errors.append(error)
        result.wall_clock.append(seconds)
    failed = len(samples) - int(result.succeeded.sum())
    if failed:
        logger.warning(f"{failed} of {len(samples)} samples failed")
    return result


def project_pseudospectral(values: np.ndarray, samples: SampleSet, basis: GpcBasis) -> np.ndarray:
    """u_k = sum_q u(xi_q) psi_k(xi_q) w_q; sample axis first in, gPC axis last out."""
    psi = basis.evaluate(samples.points) * samples.weights[:, None]
    return np.tensordot(np.moveaxis(values, 0, -1), psi, axes=([-1], [0]))


def mc_gpc_coefficients(ensemble: EnsembleResult, basis: GpcBasis) -> np.ndarray:
    """MC estimate of the velocity gPC coefficients at the barriers; not used for reported statistics."""
    ok = ensemble.succeeded
    subset = SampleSet(points=ensemble.samples.points[ok], weights=np.full(ok.sum(), 1.0 / ok.sum()),
                       provenance=ensemble.samples.provenance)
    return project_pseudospectral(ensemble.velocity[ok], subset, basis)


def gpc_moments(coefficients: np.ndarray) -> Moments:
    """Mean is the first coefficient; variance sums the squares of the others."""
    return Moments(mean=coefficients[..., 0], variance=np.sum(coefficients[..., 1:] ** 2, axis=-1),
                   n_samples=0)


def sample_moments(values: np.ndarray) -> Moments:
    """Sample mean and unbiased variance over the leading axis, ignoring failed (NaN) samples."""
    values = np.asarray(values, dtype=float)
    valid = ~np.isnan(values.reshape(len(values), -1)).any(axis=1)
    values = values[valid]
    n = len(values)
    mean = values.mean(axis=0)
    if n < 2:
        logger.warning("Variance undefined for fewer than two samples; reporting zero")
        return Moments(mean=mean, variance=np.zeros_like(mean), n_samples=n, variance_defined=False)
    return Moments(mean=mean, variance=values.var(axis=0, ddof=1), n_samples=n)


def ensemble_moments(samples: Optional[np.ndarray] = None, coefficients: Optional[np.ndarray] = None) -> Moments:
    if (samples is None) == (coefficients is None):
        raise ContractViolation("pass exactly one of samples or coefficients")
    return sample_moments(samples) if coefficients is None else gpc_moments(coefficients)


def standard_error(moments: Moments) -> np.ndarray:
    if moments.n_samples < 1:
        return np.full_like(moments.mean, np.nan)
    return np.sqrt(moments.variance / moments.n_samples)
