"""Hermite chaos basis, triple products and the lognormal viscosity expansion."""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse as sp
from scipy.optimize import brentq
from scipy.special import eval_hermitenorm, roots_hermitenorm

from errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class MultiIndexSet:
    m: int
    p: int
    indices: np.ndarray  # (n, m), graded, zero index first

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(eq=False)
class GpcBasis:
    """Orthonormal products of probabilists' Hermite polynomials, E[psi_k psi_l] = delta_kl."""
    index_set: MultiIndexSet

    @property
    def m(self) -> int:
        return self.index_set.m

    @property
    def degree(self) -> int:
        return self.index_set.p

    @property
    def size(self) -> int:
        return len(self.index_set)

    @property
    def indices(self) -> np.ndarray:
        return self.index_set.indices

    def evaluate(self, xi: np.ndarray) -> np.ndarray:
        """psi_k(xi) for points xi of shape (n_points, m) or (m,); returns (n_points, size)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[1] != self.m:
            raise ContractViolation(f"points must have {self.m} coordinates, got {xi.shape[1]}")
        table = univariate_hermite(self.degree, xi)       # (degree+1, n_points, m)
        values = np.ones((xi.shape[0], self.size))
        for j in range(self.m):
            values *= table[self.indices[:, j], :, j].T
        return values


@dataclass(eq=False)
class TripleProductTensor:
    """Coupling matrices H_l with entries E[psi_l psi_j psi_k], padded with zeros up to n_hat."""
    matrices: List[sp.csr_matrix]
    n_xi: int
    n_nu: int

    @property
    def n_hat(self) -> int:
        return len(self.matrices)

    def __getitem__(self, l: int) -> sp.csr_matrix:
        return self.matrices[l]

    def dense(self) -> np.ndarray:
        return np.stack([H.toarray() for H in self.matrices])


@dataclass(eq=False)
class GaussianFieldKL:
    """Truncated KL expansion g(x, xi) = g_0 + sum_j g_j(x) xi_j on the Q2 nodes."""
    mean: float
    sigma: float
    unit_modes: np.ndarray   # (m, n_nodes), sqrt(lambda_j) f_j(x) for unit variance
    eigenvalues: np.ndarray  # unit-variance eigenvalues, decreasing
    length_x: float
    length_y: float
    area: float

    @property
    def m(self) -> int:
        return len(self.unit_modes)

    @property
    def modes(self) -> np.ndarray:
        return self.sigma * self.unit_modes

    def rescaled(self, mean: float, sigma: float) -> "GaussianFieldKL":
        return GaussianFieldKL(mean=mean, sigma=sigma, unit_modes=self.unit_modes,
                               eigenvalues=self.eigenvalues, length_x=self.length_x,
                               length_y=self.length_y, area=self.area)

    def variance_capture(self) -> float:
        """Fraction of the total field variance sigma^2 * area held by the retained modes."""
        return float(np.sum(self.eigenvalues) / self.area)


@dataclass(eq=False)
class LognormalViscosity:
    coefficients: np.ndarray  # (n_nu, n_nodes)
    basis: GpcBasis
    kl: GaussianFieldKL
    mean_target: float
    cov_target: float
    calibration_node: int = 0

    @property
    def n_nu(self) -> int:
        return len(self.coefficients)

    @property
    def mean_field(self) -> np.ndarray:
        return self.coefficients[0]


def _graded(m: int, degree: int):
    if m == 1:
        yield (degree,)
        return
    for first in range(degree, -1, -1):
        for rest in _graded(m - 1, degree - first):
            yield (first,) + rest


def build_multiindices(m: int, p: int) -> MultiIndexSet:
    """All multi-indices with |alpha| <= p, by total degree, (d, 0, ...) first within a degree."""
    if m < 1 or p < 0:
        raise ContractViolation(f"need m >= 1 and p >= 0, got m={m}, p={p}")
    indices = [alpha for d in range(p + 1) for alpha in _graded(m, d)]
    return MultiIndexSet(m=m, p=p, indices=np.array(indices, dtype=np.int64).reshape(-1, m))


def build_basis(m: int, p: int) -> GpcBasis:
    return GpcBasis(build_multiindices(m, p))


def gauss_hermite(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """n-point Gauss rule for the standard normal density (weights sum to one)."""
    points, weights = roots_hermitenorm(n)
    return points, weights / math.sqrt(2.0 * math.pi)


def univariate_hermite(degree: int, x: np.ndarray) -> np.ndarray:
    """He_n(x)/sqrt(n!) for n = 0..degree, stacked on a new leading axis."""
    return np.stack([eval_hermitenorm(n, x) / math.sqrt(math.factorial(n)) for n in range(degree + 1)])


def _hermite_selection(a, b, c) -> np.ndarray:
    total = a + b + c
    return (total % 2 == 0) & (a <= b + c) & (b <= a + c) & (c <= a + b)


def triple_products(basis_large: GpcBasis, basis_small: GpcBasis,
                    quadrature_points: Optional[int] = None) -> TripleProductTensor:
    """H_l[j, k] = E[psi_l psi_j psi_k], l over the large basis, j, k over the small one."""
    if basis_large.m != basis_small.m:
        raise ContractViolation("bases must share the stochastic dimension")
    P, p = basis_large.degree, basis_small.degree
    required = (P + 2 * p) // 2 + 1
    n_points = quadrature_points or required
    if n_points < required:
        raise ContractViolation(f"{n_points} Gauss-Hermite points cannot integrate degree {P + 2 * p} exactly")

    top = max(P, p)
    points, weights = gauss_hermite(n_points)
    table = univariate_hermite(top, points)
    E1 = np.einsum("q,aq,bq,cq->abc", weights, table, table, table)
    E1 = 0.5 * (E1 + E1.transpose(0, 2, 1))
    a, b, c = np.meshgrid(*(np.arange(top + 1),) * 3, indexing="ij")
    E1[~_hermite_selection(a, b, c)] = 0.0
    eye = np.eye(top + 1)
    E1[0, :, :] = eye
    E1[:, 0, :] = eye
    E1[:, :, 0] = eye

    small = basis_small.indices
    matrices = []
    for alpha in basis_large.indices:
        H = np.ones((basis_small.size, basis_small.size))
        for j in range(basis_large.m):
            H = H * E1[alpha[j], small[:, j][:, None], small[:, j][None, :]]
        matrices.append(sp.csr_matrix(H))
    for _ in range(basis_small.size - basis_large.size):
        matrices.append(sp.csr_matrix((basis_small.size, basis_small.size)))

    nnz = sum(H.nnz for H in matrices)
    logger.debug(f"Triple products: n_hat={len(matrices)}, n_xi={basis_small.size}, {nnz} nonzeros")
    return TripleProductTensor(matrices=matrices, n_xi=basis_small.size, n_nu=basis_large.size)


def exponential_kernel_eigenpairs(half_length: float, correlation_length: float,
                                  count: int) -> List[Tuple[float, float, bool]]:
    """Leading eigenpairs of exp(-|s - t|/c) on [-a, a] as (eigenvalue, frequency, even)."""
    a, c = half_length, correlation_length
    pairs = []
    for i in range(count):
        even = lambda w: math.cos(w * a) / c - w * math.sin(w * a)
        omega = brentq(even, i * math.pi / a, (i + 0.5) * math.pi / a, xtol=1e-15)
        pairs.append((2.0 * c / (1.0 + (c * omega) ** 2), omega, True))
        odd = lambda w: w * math.cos(w * a) + math.sin(w * a) / c
        omega = brentq(odd, (i + 0.5) * math.pi / a, (i + 1) * math.pi / a, xtol=1e-15)
        pairs.append((2.0 * c / (1.0 + (c * omega) ** 2), omega, False))
    pairs.sort(key=lambda pair: -pair[0])
    return pairs[:count]


def _eigenfunction(s: np.ndarray, half_length: float, omega: float, even: bool) -> np.ndarray:
    a = half_length
    if even:
        return np.cos(omega * s) / math.sqrt(a + math.sin(2.0 * omega * a) / (2.0 * omega))
    return np.sin(omega * s) / math.sqrt(a - math.sin(2.0 * omega * a) / (2.0 * omega))


def kl_expand(sigma: float, length_x: float, length_y: float, mesh, m: int,
              terms_1d: int = 10) -> GaussianFieldKL:
    """KL modes of sigma^2 exp(-|dx|/L_x - |dy|/L_y) on the channel, evaluated at the Q2 nodes."""
    if sigma < 0:
        raise ConfigurationError("must be nonnegative", key="field.sigma")
    if length_x <= 0 or length_y <= 0:
        raise ConfigurationError("correlation lengths must be positive", key="field.correlation_length")
    if m < 1:
        raise ConfigurationError("at least one KL mode is required", key="field.m_xi")
    if m > terms_1d ** 2:
        raise ConfigurationError(f"{m} modes requested but only {terms_1d ** 2} pairs computed",
                                 key="field.kl_terms_1d")

    ax, ay = 0.5 * mesh.channel_length, mesh.channel_halfheight
    pairs_x = exponential_kernel_eigenpairs(ax, length_x, terms_1d)
    pairs_y = exponential_kernel_eigenpairs(ay, length_y, terms_1d)
    products = sorted(((px[0] * py[0], i, j) for i, px in enumerate(pairs_x) for j, py in enumerate(pairs_y)),
                      key=lambda item: -item[0])[:m]

    sx = mesh.nodes[:, 0] - ax
    sy = mesh.nodes[:, 1]
    modes = np.empty((m, mesh.n_nodes))
    for row, (lam, i, j) in enumerate(products):
        _, wx, ex = pairs_x[i]
        _, wy, ey = pairs_y[j]
        modes[row] = math.sqrt(lam) * _eigenfunction(sx, ax, wx, ex) * _eigenfunction(sy, ay, wy, ey)

    eigenvalues = np.array([item[0] for item in products])
    area = mesh.channel_length * 2.0 * mesh.channel_halfheight
    kl = GaussianFieldKL(mean=0.0, sigma=float(sigma), unit_modes=modes, eigenvalues=eigenvalues,
                         length_x=length_x, length_y=length_y, area=area)
    logger.info(f"KL expansion: {m} modes capture {kl.variance_capture():.3f} of the field variance")
    return kl


def calibration_node(kl: GaussianFieldKL) -> int:
    """Node where the truncated field variance is largest."""
    return int(np.argmax(np.sum(kl.unit_modes ** 2, axis=0)))


def calibrate(target_mean: float, cov: float, kl: GaussianFieldKL) -> Tuple[float, float]:
    """g_0 and sigma_g giving mean target_mean and CoV cov at the calibration node."""
    if cov < 0:
        raise ConfigurationError(f"CoV must be nonnegative, got {cov}", key="field.cov")
    if target_mean <= 0:
        raise ConfigurationError(f"mean viscosity must be positive, got {target_mean}", key="field.mean_viscosity")
    s_squared = math.log1p(cov * cov)
    unit = math.sqrt(float(np.sum(kl.unit_modes[:, calibration_node(kl)] ** 2)))
    sigma = math.sqrt(s_squared) / unit if unit > 0 else 0.0
    return math.log(target_mean) - 0.5 * s_squared, sigma


def lognormal_coeffs(kl: GaussianFieldKL, basis: GpcBasis) -> np.ndarray:
    """nu_l(x) = exp(g_0 + sum_j g_j^2 / 2) prod_j g_j^alpha_j / sqrt(alpha_j!)."""
    if kl.m != basis.m:
        raise ContractViolation(f"KL has {kl.m} modes but the basis has {basis.m} variables")
    g = kl.modes
    mean = np.exp(kl.mean + 0.5 * np.sum(g ** 2, axis=0))
    coefficients = np.empty((basis.size, g.shape[1]))
    for row, alpha in enumerate(basis.indices):
        term = mean.copy()
        for j, power in enumerate(alpha):
            if power:
                term *= g[j] ** power / math.sqrt(math.factorial(power))
        coefficients[row] = term
    return coefficients


def build_viscosity(mesh, mean_viscosity: float, cov: float, length_x: float, length_y: float,
                    m: int, p: int, terms_1d: int = 10) -> LognormalViscosity:
    """Calibrated lognormal viscosity expanded in the degree-2p chaos basis."""
    unit_kl = kl_expand(1.0, length_x, length_y, mesh, m, terms_1d)
    g0, sigma = calibrate(mean_viscosity, cov, unit_kl)
    kl = unit_kl.rescaled(g0, sigma)
    basis = build_basis(m, 2 * p)
    node = calibration_node(unit_kl)
    visc = LognormalViscosity(coefficients=lognormal_coeffs(kl, basis), basis=basis, kl=kl,
                              mean_target=mean_viscosity, cov_target=cov, calibration_node=node)
    if np.any(visc.mean_field <= 0):
        raise ConfigurationError("mean viscosity field must be positive", key="field.mean_viscosity")
    logger.info(f"Lognormal viscosity: n_nu={visc.n_nu}, sigma_g={sigma:.4g}, g_0={g0:.4g}, "
                f"calibrated at node {node} {tuple(mesh.nodes[node])}")
    return visc


def sample_viscosity(visc: LognormalViscosity, xi: np.ndarray) -> np.ndarray:
    """Realization nu(x, xi) = sum_l nu_l(x) psi_l(xi); 2-D xi gives one row per point."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ContractViolation("sample point must be finite")
    psi = visc.basis.evaluate(xi)
    fields = psi @ visc.coefficients
    if np.any(fields <= 0):
        logger.warning(f"Nonpositive viscosity realization (min {fields.min():.3e}); "
                       f"expansion truncation in the tail")
    return fields[0] if xi.ndim == 1 else fields
