"""Probe statistics, density estimates and cross-method comparison tables."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import gaussian_kde, norm

import config
from errors import BarrierMismatchError, ContractViolation
from mesh_fem import Mesh, point_interpolation_matrix
from random_field import GpcBasis
from sampling import EnsembleResult, Moments, gpc_moments, sample_moments, standard_error

logger = logging.getLogger(__name__)

COMPONENTS = ("u_x", "u_y")


@dataclass
class PdfEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    source: str
    time: Optional[float] = None
    probe: Optional[int] = None
    component: Optional[int] = None

    def integral(self) -> float:
        return float(trapezoid(self.density, self.grid))


@dataclass
class ProbeStatistics:
    """Mean/variance of both velocity components at each probe and barrier."""
    method: str
    barriers: List[float]
    mean: np.ndarray       # (n_barriers, n_probes, 2)
    variance: np.ndarray
    n_samples: int = 0

    def std_error(self) -> np.ndarray:
        return standard_error(Moments(self.mean, self.variance, self.n_samples))

    def at(self, t: float):
        i = self.barriers.index(t)
        return self.mean[i], self.variance[i]


def probe_values(mesh: Mesh, probes: Sequence[Sequence[float]], velocity: np.ndarray) -> np.ndarray:
    """Velocity components at the probes; trailing axis of `velocity` is the dof axis.

    Returns an array of shape velocity.shape[:-1] + (n_probes, 2).
    """
    P = point_interpolation_matrix(mesh, probes)
    n = mesh.n_nodes
    velocity = np.asarray(velocity)
    if velocity.shape[-1] != 2 * n:
        raise ContractViolation(f"velocity must end with {2 * n} dofs, got {velocity.shape}")
    flat = velocity.reshape(-1, 2 * n)
    ux = (P @ flat[:, :n].T).T
    uy = (P @ flat[:, n:].T).T
    return np.stack([ux, uy], axis=-1).reshape(velocity.shape[:-1] + (len(probes), 2))


def probe_coefficients(mesh: Mesh, probes, coefficients: np.ndarray) -> np.ndarray:
    """gPC coefficients (n_u, n_xi) -> (n_probes, 2, n_xi) at the probes."""
    values = probe_values(mesh, probes, np.asarray(coefficients).T)   # (n_xi, n_probes, 2)
    return np.moveaxis(values, 0, -1)


def statistics_from_gpc(method: str, mesh: Mesh, probes, snapshots: Dict[float, np.ndarray]) -> ProbeStatistics:
    """Probe moments from velocity gPC coefficient snapshots keyed by barrier time."""
    barriers = sorted(snapshots)
    coeffs = np.stack([probe_coefficients(mesh, probes, snapshots[t]) for t in barriers])
    moments = gpc_moments(coeffs)
    return ProbeStatistics(method=method, barriers=barriers, mean=moments.mean, variance=moments.variance)


def statistics_from_samples(method: str, mesh: Mesh, probes, ensemble: EnsembleResult) -> ProbeStatistics:
    values = probe_values(mesh, probes, ensemble.velocity)     # (n_samples, n_barriers, n_probes, 2)
    moments = sample_moments(values)
    return ProbeStatistics(method=method, barriers=list(ensemble.barriers), mean=moments.mean,
                           variance=moments.variance, n_samples=moments.n_samples)


def surrogate_samples(coefficients: np.ndarray, basis: GpcBasis, n: int, seed: Optional[int] = 0) -> np.ndarray:
    """Evaluate a scalar gPC surrogate at n standard Gaussian points."""
    xi = np.random.default_rng(seed).standard_normal((n, basis.m))
    return basis.evaluate(xi) @ np.asarray(coefficients, dtype=float)


def probe_pdf(values: np.ndarray, source: str, time: Optional[float] = None, bandwidth: Optional[float] = None,
              n_grid: int = config.KDE_GRID_POINTS, grid: Optional[np.ndarray] = None, **labels) -> PdfEstimate:
    """Gaussian-kernel density estimate with Silverman's bandwidth.

    A forced `bandwidth`, or data without spread, falls back to an explicit
    mixture of normal bumps centred at the data.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ContractViolation("no data for the density estimate")
    spread = np.std(values)
    degenerate = values.size < 2 or spread <= 1e-14 * max(1.0, np.max(np.abs(values)))

    if bandwidth is None and not degenerate:
        kde = gaussian_kde(values, bw_method="silverman")
        h = float(np.sqrt(kde.covariance[0, 0]))
        evaluate = kde.evaluate
    else:
        if bandwidth is None:
            h = 1e-6 * max(1.0, float(np.max(np.abs(values))))
            logger.warning(f"Degenerate {source} data at t={time}: all values equal; using a narrow bump (h={h:.1e})")
        else:
            h = float(bandwidth)
        evaluate = lambda x: norm.pdf(x[:, None], loc=values[None, :], scale=h).mean(axis=1)

    if grid is None:
        grid = np.linspace(values.min() - 3.0 * h, values.max() + 3.0 * h, n_grid)
    return PdfEstimate(grid=grid, density=evaluate(grid), bandwidth=h, source=source, time=time, **labels)


def coefficient_norm_series(sg_result) -> Dict[str, np.ndarray]:
    """Per-mode Euclidean norms of the velocity coefficients at every recorded time."""
    return {
        "times": np.asarray(sg_result.times),
        "norms": np.asarray(sg_result.mode_norms),
        "norms_x": np.asarray(sg_result.mode_norms_x),
    }


def compare_report(results: Dict[str, ProbeStatistics], reference: str = "sg",
                   barriers: Optional[Sequence[float]] = None) -> List[dict]:
    """Rows of mean/variance per method, barrier, probe and component, with differences to `reference`."""
    if reference not in results:
        raise ContractViolation(f"reference method {reference!r} missing from results")
    wanted = sorted(barriers) if barriers is not None else sorted(results[reference].barriers)
    missing = set()
    for stats in results.values():
        missing |= set(wanted) - set(stats.barriers)
    if missing:
        raise BarrierMismatchError(missing)

    ref = results[reference]
    rows = []
    for t in wanted:
        ref_mean, ref_var = ref.at(t)
        for method, stats in results.items():
            mean, var = stats.at(t)
            se = stats.std_error()[stats.barriers.index(t)]
            for probe in range(mean.shape[0]):
                for c in range(2):
                    scale_mean = max(abs(ref_mean[probe, c]), 1e-300)
                    scale_var = max(abs(ref_var[probe, c]), 1e-300)
                    rows.append({
                        "barrier": t, "probe": probe, "component": COMPONENTS[c], "method": method,
                        "mean": float(mean[probe, c]), "variance": float(var[probe, c]),
                        "abs_diff_mean": float(abs(mean[probe, c] - ref_mean[probe, c])),
                        "rel_diff_mean": float(abs(mean[probe, c] - ref_mean[probe, c]) / scale_mean),
                        "abs_diff_variance": float(abs(var[probe, c] - ref_var[probe, c])),
                        "rel_diff_variance": float(abs(var[probe, c] - ref_var[probe, c]) / scale_var),
                        "std_error": float(se[probe, c]),
                    })
    return rows
