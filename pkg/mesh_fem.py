"""Q2-Q1 (Taylor-Hood) discretization of the channel-with-obstacle domain."""
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache, reduce
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import sparse as sp

from errors import ContractViolation, GeometryError

logger = logging.getLogger(__name__)

INFLOW, WALL, OBSTACLE, OUTFLOW = 0, 1, 2, 3
TAG_NAMES = {INFLOW: "inflow", WALL: "wall", OBSTACLE: "obstacle", OUTFLOW: "outflow"}

# Jacobi-scaled Q1 mass matrix on rectangles: element eigenvalue bounds
Q1_MASS_JACOBI_BOUNDS = (0.25, 2.25)

# Local Q2 node indices (tensor order 3*b + a) of the four element sides
_SIDES = {
    "bottom": (0, 1, 2),
    "top": (6, 7, 8),
    "left": (0, 3, 6),
    "right": (2, 5, 8),
}


@dataclass(eq=False)
class Mesh:
    """Structured quadrilateral mesh of [0, L] x [-H, H] minus a rectangular obstacle.

    Q2 nodes are numbered row by row (x fastest); `elements` lists the nine Q2
    nodes of each element in tensor order, `element_vertices` the four Q1
    (pressure) nodes in tensor order, indexing into `vertices`.
    """
    nodes: np.ndarray
    elements: np.ndarray
    vertices: np.ndarray
    element_vertices: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    element_grid: np.ndarray
    spacing: float
    refinement: int
    channel_length: float
    channel_halfheight: float
    obstacle_box: Optional[Tuple[float, float, float, float]]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def vertex_coordinates(self) -> np.ndarray:
        return self.nodes[self.vertices]

    @property
    def area(self) -> float:
        area = self.channel_length * 2.0 * self.channel_halfheight
        if self.obstacle_box is not None:
            x0, x1, y0, y1 = self.obstacle_box
            area -= (x1 - x0) * (y1 - y0)
        return area

    def describe(self) -> dict:
        """Geometry summary echoed into run outputs."""
        return {
            "channel_length": self.channel_length,
            "channel_halfheight": self.channel_halfheight,
            "obstacle_box": list(self.obstacle_box) if self.obstacle_box else None,
            "refinement": self.refinement,
            "spacing": self.spacing,
            "elements": self.n_elements,
            "velocity_dofs": 2 * self.n_nodes,
            "pressure_dofs": len(self.vertices),
        }


@dataclass(eq=False)
class DofMap:
    """Velocity dofs are component-blocked: [u_x at all Q2 nodes, u_y at all Q2 nodes]."""
    n_u: int
    n_p: int
    dirichlet_mask: np.ndarray
    element_velocity_nodes: np.ndarray
    element_pressure_nodes: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.n_u // 2

    @property
    def dirichlet_dofs(self) -> np.ndarray:
        return np.flatnonzero(self.dirichlet_mask)

    @property
    def free_mask(self) -> np.ndarray:
        return (~self.dirichlet_mask).astype(float)

    def element_velocity_dofs(self, element: int) -> np.ndarray:
        nodes = self.element_velocity_nodes[element]
        return np.concatenate([nodes, nodes + self.n_nodes])


@dataclass(eq=False)
class BoundaryData:
    """Ramped Poiseuille inflow, no-slip on walls and obstacle."""
    dirichlet_dofs: np.ndarray
    profile: np.ndarray
    ramp_rate: float
    n_u: int

    def values(self, t: float) -> np.ndarray:
        # expm1 keeps the ramp accurate for the 1e-9 s start-up steps
        return -math.expm1(-self.ramp_rate * t) * self.profile

    def lift(self, t: float) -> np.ndarray:
        g = np.zeros(self.n_u)
        g[self.dirichlet_dofs] = self.values(t)
        return g


@dataclass(eq=False)
class ElementGeometry:
    weights: np.ndarray     # (n_el, n_q) quadrature weight times |J|
    q2_values: np.ndarray   # (n_q, 9)
    q2_grads: np.ndarray    # (n_el, n_q, 9, 2) physical gradients
    q1_values: np.ndarray   # (n_q, 4)
    q1_grads: np.ndarray    # (n_el, n_q, 4, 2)


def _grid_spacing(segments: Sequence[float]) -> float:
    """Largest spacing that divides every segment length."""
    fractions = [Fraction(s).limit_denominator(10**6) for s in segments]
    denominator = reduce(math.lcm, (f.denominator for f in fractions))
    numerator = reduce(math.gcd, (f.numerator * (denominator // f.denominator) for f in fractions))
    return float(Fraction(numerator, denominator))


def generate_obstacle_mesh(channel_length: float, channel_halfheight: float,
                           obstacle_box: Optional[Sequence[float]], refinement: int,
                           base_spacing: Optional[float] = None) -> Mesh:
    """Generate the structured Q2 mesh; the element count grows 4x per refinement level."""
    L, H = float(channel_length), float(channel_halfheight)
    if L <= 0 or H <= 0:
        raise GeometryError("channel length and half-height must be positive")
    if int(refinement) != refinement or refinement < 1:
        raise GeometryError(f"refinement must be a positive integer, got {refinement}")

    if obstacle_box is not None:
        x0, x1, y0, y1 = map(float, obstacle_box)
        if not (0.0 < x0 < x1 < L and -H < y0 < y1 < H):
            raise GeometryError(
                f"obstacle {obstacle_box} is not an axis-aligned box strictly inside "
                f"(0, {L}) x ({-H}, {H})")
        obstacle_box = (x0, x1, y0, y1)
        segments = [x0, x1 - x0, L - x1, y0 + H, y1 - y0, H - y1]
    else:
        segments = [L, 2.0 * H]

    h = (base_spacing or _grid_spacing(segments)) / 2 ** (refinement - 1)
    nx, ny = int(round(L / h)), int(round(2.0 * H / h))
    if abs(nx * h - L) > 1e-9 * L or abs(ny * h - 2.0 * H) > 1e-9 * H:
        raise GeometryError(f"spacing {h} does not divide the channel")

    if obstacle_box is not None:
        bounds = [x0 / h, x1 / h, (y0 + H) / h, (y1 + H) / h]
        ix0, ix1, iy0, iy1 = (int(round(b)) for b in bounds)
        if any(abs(b - round(b)) > 1e-9 for b in bounds):
            raise GeometryError(f"obstacle {obstacle_box} is not aligned with grid spacing {h}")
    else:
        ix0 = ix1 = iy0 = iy1 = 0

    # Q2 node lattice with the obstacle interior removed
    i, j = np.meshgrid(np.arange(2 * nx + 1), np.arange(2 * ny + 1), indexing="xy")
    inside = (i > 2 * ix0) & (i < 2 * ix1) & (j > 2 * iy0) & (j < 2 * iy1)
    keep = ~inside
    node_id = -np.ones(keep.shape, dtype=np.int64)
    node_id[keep] = np.arange(np.count_nonzero(keep))
    nodes = np.column_stack([i[keep] * (h / 2.0), -H + j[keep] * (h / 2.0)])

    vertex_lattice = keep & (i % 2 == 0) & (j % 2 == 0)
    vertex_id = -np.ones(keep.shape, dtype=np.int64)
    vertex_id[vertex_lattice] = np.arange(np.count_nonzero(vertex_lattice))
    vertices = node_id[vertex_lattice]

    ex, ey = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    solid = (ex >= ix0) & (ex < ix1) & (ey >= iy0) & (ey < iy1)
    ex, ey = ex[~solid], ey[~solid]
    element_grid = -np.ones((nx, ny), dtype=np.int64)
    element_grid[ex, ey] = np.arange(len(ex))

    a2, b2 = np.meshgrid(np.arange(3), np.arange(3), indexing="xy")
    elements = node_id[2 * ey[:, None] + b2.ravel(), 2 * ex[:, None] + a2.ravel()]
    a1, b1 = np.meshgrid(np.arange(2), np.arange(2), indexing="xy")
    element_vertices = vertex_id[2 * ey[:, None] + 2 * b1.ravel(), 2 * ex[:, None] + 2 * a1.ravel()]

    edges, tags = [], []
    for e, (cx, cy) in enumerate(zip(ex, ey)):
        for side, (nbx, nby, outer, outer_tag) in {
            "bottom": (cx, cy - 1, cy == 0, WALL),
            "top": (cx, cy + 1, cy == ny - 1, WALL),
            "left": (cx - 1, cy, cx == 0, INFLOW),
            "right": (cx + 1, cy, cx == nx - 1, OUTFLOW),
        }.items():
            if outer:
                tag = outer_tag
            elif element_grid[nbx, nby] < 0:
                tag = OBSTACLE
            else:
                continue
            edges.append(elements[e, list(_SIDES[side])])
            tags.append(tag)

    mesh = Mesh(
        nodes=nodes, elements=elements, vertices=vertices, element_vertices=element_vertices,
        boundary_edges=np.array(edges, dtype=np.int64), boundary_tags=np.array(tags, dtype=np.int64),
        element_grid=element_grid, spacing=h, refinement=int(refinement),
        channel_length=L, channel_halfheight=H, obstacle_box=obstacle_box,
    )
    logger.info(f"Generated mesh: {mesh.n_elements} elements, {2 * mesh.n_nodes} velocity "
                f"and {len(vertices)} pressure dofs (h={h:g})")
    return mesh


def build_dofmap(mesh: Mesh) -> DofMap:
    """Dirichlet velocity dofs are the nodes on inflow, wall and obstacle edges."""
    on_dirichlet = np.zeros(mesh.n_nodes, dtype=bool)
    on_dirichlet[mesh.boundary_edges[mesh.boundary_tags != OUTFLOW].ravel()] = True
    return DofMap(
        n_u=2 * mesh.n_nodes,
        n_p=len(mesh.vertices),
        dirichlet_mask=np.concatenate([on_dirichlet, on_dirichlet]),
        element_velocity_nodes=mesh.elements,
        element_pressure_nodes=mesh.element_vertices,
    )


def build_boundary_data(mesh: Mesh, dofmap: DofMap, ramp_rate: float = 5.0,
                        amplitude: float = 1.0) -> BoundaryData:
    """Poiseuille profile amplitude*(1 - y^2/H^2) on the inflow, zero elsewhere."""
    n = mesh.n_nodes
    dofs = dofmap.dirichlet_dofs
    inflow_nodes = np.unique(mesh.boundary_edges[mesh.boundary_tags == INFLOW])
    steady = np.zeros(dofmap.n_u)
    y = mesh.nodes[inflow_nodes, 1]
    steady[inflow_nodes] = amplitude * (1.0 - (y / mesh.channel_halfheight) ** 2)
    steady[:n][np.isin(np.arange(n), mesh.boundary_edges[mesh.boundary_tags != INFLOW].ravel())] = 0.0
    return BoundaryData(dirichlet_dofs=dofs, profile=steady[dofs], ramp_rate=ramp_rate, n_u=dofmap.n_u)


def _reference_q2(s: np.ndarray):
    values = np.stack([0.5 * s * (s - 1.0), 1.0 - s * s, 0.5 * s * (s + 1.0)], axis=-1)
    derivs = np.stack([s - 0.5, -2.0 * s, s + 0.5], axis=-1)
    return values, derivs


def _reference_q1(s: np.ndarray):
    values = np.stack([0.5 * (1.0 - s), 0.5 * (1.0 + s)], axis=-1)
    derivs = np.stack([-0.5 * np.ones_like(s), 0.5 * np.ones_like(s)], axis=-1)
    return values, derivs


def _tensor_basis(s, t, reference):
    vs, ds = reference(s)
    vt, dt = reference(t)
    n = vs.shape[-1]
    values = np.einsum("qb,qa->qba", vt, vs).reshape(len(s), n * n)
    grads = np.stack([
        np.einsum("qb,qa->qba", vt, ds).reshape(len(s), n * n),
        np.einsum("qb,qa->qba", dt, vs).reshape(len(s), n * n),
    ], axis=-1)
    return values, grads


@lru_cache(maxsize=16)
def element_geometry(mesh: Mesh) -> ElementGeometry:
    """3x3 Gauss rule, bilinear geometry map; cached per mesh."""
    g, w = np.polynomial.legendre.leggauss(3)
    s, t = np.meshgrid(g, g, indexing="xy")
    s, t = s.ravel(), t.ravel()
    weights = np.outer(w, w).ravel()

    q2_values, q2_ref_grads = _tensor_basis(s, t, _reference_q2)
    q1_values, q1_ref_grads = _tensor_basis(s, t, _reference_q1)

    corners = mesh.nodes[mesh.vertices[mesh.element_vertices]]       # (n_el, 4, 2)
    jac = np.einsum("eai,qaj->eqij", corners, q1_ref_grads)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if np.any(det <= 0.0):
        raise GeometryError("element with nonpositive Jacobian determinant")
    inv = np.empty_like(jac)
    inv[..., 0, 0] = jac[..., 1, 1] / det
    inv[..., 1, 1] = jac[..., 0, 0] / det
    inv[..., 0, 1] = -jac[..., 0, 1] / det
    inv[..., 1, 0] = -jac[..., 1, 0] / det

    return ElementGeometry(
        weights=weights[None, :] * det,
        q2_values=q2_values,
        q2_grads=np.einsum("qaj,eqji->eqai", q2_ref_grads, inv),
        q1_values=q1_values,
        q1_grads=np.einsum("qaj,eqji->eqai", q1_ref_grads, inv),
    )


def _scatter(local: np.ndarray, row_nodes: np.ndarray, col_nodes: np.ndarray, shape) -> sp.csr_matrix:
    n_el, n_a, n_b = local.shape
    rows = np.broadcast_to(row_nodes[:, :, None], (n_el, n_a, n_b))
    cols = np.broadcast_to(col_nodes[:, None, :], (n_el, n_a, n_b))
    matrix = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    matrix.sort_indices()
    return matrix


def _symmetrize(local: np.ndarray) -> np.ndarray:
    return 0.5 * (local + local.transpose(0, 2, 1))


def _vector_block(scalar: sp.csr_matrix) -> sp.csr_matrix:
    return sp.block_diag((scalar, scalar), format="csr")


def _at_quadrature(geom: ElementGeometry, mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    return np.einsum("qa,ea->eq", geom.q2_values, nodal[mesh.elements])


def _wind_at_quadrature(geom: ElementGeometry, mesh: Mesh, wind: np.ndarray) -> np.ndarray:
    n = mesh.n_nodes
    if wind.shape != (2 * n,):
        raise ContractViolation(f"wind must have length {2 * n}, got {wind.shape}")
    return np.stack([_at_quadrature(geom, mesh, wind[:n]), _at_quadrature(geom, mesh, wind[n:])], axis=-1)


def assemble_scalar_mass(mesh: Mesh) -> sp.csr_matrix:
    geom = element_geometry(mesh)
    local = _symmetrize(np.einsum("eq,qa,qb->eab", geom.weights, geom.q2_values, geom.q2_values))
    return _scatter(local, mesh.elements, mesh.elements, (mesh.n_nodes, mesh.n_nodes))


def assemble_mass(mesh: Mesh, dofmap: DofMap) -> sp.csr_matrix:
    """Velocity mass matrix M, m_ab = int phi_b . phi_a."""
    return _vector_block(assemble_scalar_mass(mesh))


def assemble_diffusion(mesh: Mesh, dofmap: DofMap, coefficient_field: np.ndarray) -> sp.csr_matrix:
    """Vector Laplacian a_ab = int nu(x) grad phi_b : grad phi_a with nu nodal on Q2 nodes."""
    coefficient_field = np.asarray(coefficient_field, dtype=float)
    if coefficient_field.shape != (mesh.n_nodes,):
        raise ContractViolation(f"coefficient field must have length {mesh.n_nodes}")
    geom = element_geometry(mesh)
    nu = _at_quadrature(geom, mesh, coefficient_field)
    local = _symmetrize(np.einsum("eq,eqai,eqbi->eab", geom.weights * nu, geom.q2_grads, geom.q2_grads))
    return _vector_block(_scatter(local, mesh.elements, mesh.elements, (mesh.n_nodes, mesh.n_nodes)))


def assemble_convection(mesh: Mesh, dofmap: DofMap, wind: np.ndarray) -> sp.csr_matrix:
    """Convection n_ab = int (w . grad phi_b) . phi_a; linear in the wind."""
    geom = element_geometry(mesh)
    wq = _wind_at_quadrature(geom, mesh, np.asarray(wind, dtype=float))
    advective = np.einsum("eqi,eqbi->eqb", wq, geom.q2_grads)
    local = np.einsum("eq,qa,eqb->eab", geom.weights, geom.q2_values, advective)
    return _vector_block(_scatter(local, mesh.elements, mesh.elements, (mesh.n_nodes, mesh.n_nodes)))


def assemble_divergence(mesh: Mesh, dofmap: DofMap) -> sp.csr_matrix:
    """Divergence B (n_p x n_u), b_cd = -int varphi_c div(phi_d)."""
    geom = element_geometry(mesh)
    shape = (dofmap.n_p, mesh.n_nodes)
    blocks = []
    for component in range(2):
        local = -np.einsum("eq,qc,eqb->ecb", geom.weights, geom.q1_values, geom.q2_grads[..., component])
        blocks.append(_scatter(local, mesh.element_vertices, mesh.elements, shape))
    return sp.hstack(blocks, format="csr")


def assemble_pressure_mass(mesh: Mesh) -> sp.csr_matrix:
    geom = element_geometry(mesh)
    local = _symmetrize(np.einsum("eq,qa,qb->eab", geom.weights, geom.q1_values, geom.q1_values))
    n_p = len(mesh.vertices)
    return _scatter(local, mesh.element_vertices, mesh.element_vertices, (n_p, n_p))


def assemble_pressure_diffusion(mesh: Mesh, coefficient_field: np.ndarray) -> sp.csr_matrix:
    """Q1 Laplacian with a Q2-nodal coefficient, used by the PCD operator F_p."""
    geom = element_geometry(mesh)
    nu = _at_quadrature(geom, mesh, np.asarray(coefficient_field, dtype=float))
    local = _symmetrize(np.einsum("eq,eqai,eqbi->eab", geom.weights * nu, geom.q1_grads, geom.q1_grads))
    n_p = len(mesh.vertices)
    return _scatter(local, mesh.element_vertices, mesh.element_vertices, (n_p, n_p))


def assemble_pressure_convection(mesh: Mesh, wind: np.ndarray) -> sp.csr_matrix:
    geom = element_geometry(mesh)
    wq = _wind_at_quadrature(geom, mesh, np.asarray(wind, dtype=float))
    advective = np.einsum("eqi,eqbi->eqb", wq, geom.q1_grads)
    local = np.einsum("eq,qa,eqb->eab", geom.weights, geom.q1_values, advective)
    n_p = len(mesh.vertices)
    return _scatter(local, mesh.element_vertices, mesh.element_vertices, (n_p, n_p))


def inflow_pressure_nodes(mesh: Mesh) -> np.ndarray:
    """Pressure (vertex) indices lying on the inflow boundary."""
    inflow = np.unique(mesh.boundary_edges[mesh.boundary_tags == INFLOW][:, [0, 2]])
    lookup = -np.ones(mesh.n_nodes, dtype=np.int64)
    lookup[mesh.vertices] = np.arange(len(mesh.vertices))
    return lookup[inflow]


def constrain(matrix: sp.spmatrix, free_mask: np.ndarray, identity: bool) -> sp.csr_matrix:
    """Zero Dirichlet rows/columns; put ones on their diagonal when `identity`."""
    keep = sp.diags(free_mask)
    constrained = keep @ matrix @ keep
    if identity:
        constrained = constrained + sp.diags(1.0 - free_mask)
    constrained = constrained.tocsr()
    constrained.sort_indices()
    return constrained


def apply_dirichlet(F: sp.spmatrix, B: sp.spmatrix, f_u: np.ndarray, f_p: np.ndarray,
                    dirichlet_dofs: np.ndarray, values: np.ndarray):
    """Symmetric elimination of Dirichlet velocity dofs.

    Couplings to the constrained dofs are moved to the right-hand side, the
    constrained rows/columns of F become identity and the constrained columns
    of B are zeroed. `f_u`, `f_p` and `values` may carry several columns.

    Returns
    -------
        F_c, B_c, f_u_c, f_p_c
    """
    dirichlet_dofs = np.asarray(dirichlet_dofs)
    if values is None or len(values) != len(dirichlet_dofs):
        raise ContractViolation("boundary values must be given on every Dirichlet dof")
    values = np.asarray(values, dtype=float)
    lift = np.zeros((F.shape[0],) + values.shape[1:])
    lift[dirichlet_dofs] = values

    f_u = np.array(f_u, dtype=float) - F @ lift
    f_p = np.array(f_p, dtype=float) - B @ lift
    f_u[dirichlet_dofs] = values

    free = np.ones(F.shape[0])
    free[dirichlet_dofs] = 0.0
    B_c = (B @ sp.diags(free)).tocsr()
    return constrain(F, free, identity=True), B_c, f_u, f_p


def saddle_matrix(F: sp.spmatrix, B: sp.spmatrix) -> sp.csc_matrix:
    """[[F, B^T], [B, 0]] in CSC form for direct factorization."""
    return sp.bmat([[F, B.T], [B, None]], format="csc")


def point_interpolation_matrix(mesh: Mesh, points: Sequence[Sequence[float]]) -> sp.csr_matrix:
    """Sparse (n_points x n_nodes) matrix evaluating a Q2 nodal scalar field at points."""
    h = mesh.spacing
    nx, ny = mesh.element_grid.shape
    rows, cols, vals = [], [], []
    for row, (x, y) in enumerate(points):
        ex = min(int(math.floor(x / h)), nx - 1)
        ey = min(int(math.floor((y + mesh.channel_halfheight) / h)), ny - 1)
        for cx, cy in ((ex, ey), (ex - 1, ey), (ex, ey - 1), (ex - 1, ey - 1)):
            if 0 <= cx < nx and 0 <= cy < ny and mesh.element_grid[cx, cy] >= 0:
                s = 2.0 * (x - cx * h) / h - 1.0
                t = 2.0 * (y + mesh.channel_halfheight - cy * h) / h - 1.0
                if -1.0 - 1e-12 <= s <= 1.0 + 1e-12 and -1.0 - 1e-12 <= t <= 1.0 + 1e-12:
                    break
        else:
            raise GeometryError(f"point ({x}, {y}) is not inside the fluid domain")
        values, _ = _tensor_basis(np.array([s]), np.array([t]), _reference_q2)
        rows.extend([row] * 9)
        cols.extend(mesh.elements[mesh.element_grid[cx, cy]])
        vals.extend(values[0])
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(points), mesh.n_nodes))


def interpolate(mesh: Mesh, function) -> np.ndarray:
    """Nodal interpolant of a vector function f(x, y) -> (u_x, u_y)."""
    ux, uy = function(mesh.nodes[:, 0], mesh.nodes[:, 1])
    return np.concatenate([np.broadcast_to(ux, mesh.n_nodes), np.broadcast_to(uy, mesh.n_nodes)]).astype(float)
