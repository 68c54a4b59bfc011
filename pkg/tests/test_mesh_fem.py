import numpy as np
import pytest
from numpy.testing import assert_allclose

import config
from errors import ContractViolation, GeometryError
from mesh_fem import (INFLOW, OBSTACLE, OUTFLOW, WALL, apply_dirichlet, assemble_convection, assemble_diffusion,
                      assemble_divergence, assemble_mass, assemble_pressure_mass, assemble_scalar_mass,
                      build_boundary_data, build_dofmap, generate_obstacle_mesh, inflow_pressure_nodes,
                      interpolate, point_interpolation_matrix)
from stepper_det import solve_saddle


def test_full_mesh_dof_counts():
    mesh = generate_obstacle_mesh(config.CHANNEL_LENGTH, config.CHANNEL_HALFHEIGHT, config.OBSTACLE_BOX, 2)
    dofmap = build_dofmap(mesh)
    assert dofmap.n_u == 12640
    assert dofmap.n_p == 1640
    assert mesh.spacing == pytest.approx(0.125)


def test_refinement_quadruples_elements():
    coarse = generate_obstacle_mesh(12.0, 1.0, config.OBSTACLE_BOX, 1)
    fine = generate_obstacle_mesh(12.0, 1.0, config.OBSTACLE_BOX, 2)
    assert fine.n_elements == 4 * coarse.n_elements
    assert coarse.describe()["velocity_dofs"] == 3280
    assert coarse.describe()["pressure_dofs"] == 440


def test_boundary_tags(small_mesh):
    counts = {tag: int(np.sum(small_mesh.boundary_tags == tag)) for tag in (INFLOW, WALL, OBSTACLE, OUTFLOW)}
    assert counts == {INFLOW: 8, WALL: 32, OBSTACLE: 8, OUTFLOW: 8}


@pytest.mark.parametrize("box", [(1.1, 1.5, -0.25, 0.25), (1.0, 1.5, -0.25, 1.5)])
def test_bad_obstacle_rejected(box):
    with pytest.raises(GeometryError):
        generate_obstacle_mesh(4.0, 1.0, box, 1, base_spacing=0.25)


def test_refinement_must_be_positive():
    with pytest.raises(GeometryError):
        generate_obstacle_mesh(4.0, 1.0, None, 0)


def test_mass_integrates_area(small_mesh, small_dofmap):
    ones = np.ones(small_mesh.n_nodes)
    assert ones @ assemble_scalar_mass(small_mesh) @ ones == pytest.approx(small_mesh.area, rel=1e-13)
    M = assemble_mass(small_mesh, small_dofmap)
    assert abs(M - M.T).max() < 1e-15


def test_diffusion_annihilates_constants(small_mesh, small_dofmap):
    A = assemble_diffusion(small_mesh, small_dofmap, np.full(small_mesh.n_nodes, 0.3))
    assert np.max(np.abs(A @ np.ones(small_dofmap.n_u))) < 1e-13
    assert abs(A - A.T).max() < 1e-14


def test_diffusion_rejects_wrong_length(small_mesh, small_dofmap):
    with pytest.raises(ContractViolation):
        assemble_diffusion(small_mesh, small_dofmap, np.ones(3))


def test_convection_is_linear_in_wind(small_mesh, small_dofmap, rng):
    wind = rng.standard_normal(small_dofmap.n_u)
    N1 = assemble_convection(small_mesh, small_dofmap, wind)
    N2 = assemble_convection(small_mesh, small_dofmap, 2.0 * wind)
    assert abs(N2 - 2.0 * N1).max() < 1e-13
    assert np.max(np.abs(N1 @ np.ones(small_dofmap.n_u))) < 1e-12


def test_divergence_of_solenoidal_field_vanishes(small_mesh, small_dofmap):
    B = assemble_divergence(small_mesh, small_dofmap)
    rotation = interpolate(small_mesh, lambda x, y: (x * y, -0.5 * y * y))
    assert np.max(np.abs(B @ rotation)) < 1e-13


def test_divergence_sign_and_scale(small_mesh, small_dofmap):
    B = assemble_divergence(small_mesh, small_dofmap)
    stretch = interpolate(small_mesh, lambda x, y: (x, 0.0 * y))
    # q sums to one, so the rows add up to -int div u = -area
    assert np.sum(B @ stretch) == pytest.approx(-small_mesh.area, rel=1e-12)


def test_pressure_mass_integrates_area(small_mesh):
    M_p = assemble_pressure_mass(small_mesh)
    ones = np.ones(M_p.shape[0])
    assert ones @ M_p @ ones == pytest.approx(small_mesh.area, rel=1e-13)


def test_point_interpolation_reproduces_quadratics(small_mesh, rng):
    points = [(0.3, 0.7), (2.0, 0.0), (3.6436, -0.5), (1.25, 0.25), (4.0, 1.0)]
    P = point_interpolation_matrix(small_mesh, points)
    f = lambda x, y: 1.0 + x * x - 2.0 * x * y + 0.5 * y * y
    nodal = f(small_mesh.nodes[:, 0], small_mesh.nodes[:, 1])
    expected = [f(x, y) for x, y in points]
    assert_allclose(P @ nodal, expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("point", [(1.25, 0.0), (5.0, 0.0), (2.0, 1.5)])
def test_point_outside_fluid(small_mesh, point):
    with pytest.raises(GeometryError):
        point_interpolation_matrix(small_mesh, [point])


def test_inflow_ramp_is_accurate_for_tiny_times(small_mesh, small_dofmap, small_boundary):
    values = small_boundary.values(1e-9)
    assert_allclose(values, 5e-9 * small_boundary.profile, rtol=1e-8)
    assert small_boundary.profile.max() == pytest.approx(1.0)
    assert np.all(small_boundary.lift(0.0) == 0.0)


def test_inflow_pressure_nodes(open_channel):
    nodes = inflow_pressure_nodes(open_channel)
    assert len(nodes) == 9
    assert np.all(open_channel.vertex_coordinates[nodes, 0] == 0.0)


def test_dirichlet_requires_values(small_flow):
    dofs = small_flow.dofmap.dirichlet_dofs
    with pytest.raises(ContractViolation):
        apply_dirichlet(small_flow.M, small_flow.B, np.zeros(small_flow.n_u), np.zeros(small_flow.n_p),
                        dofs, np.zeros(len(dofs) - 1))


def test_dirichlet_handles_several_columns(small_flow, small_boundary, rng):
    dofs = small_flow.dofmap.dirichlet_dofs
    F = 2.0 * small_flow.M + 0.01 * small_flow.A
    f_u = rng.standard_normal((small_flow.n_u, 2))
    values = np.column_stack([small_boundary.profile, -small_boundary.profile])
    Fc, Bc, g_u, g_p = apply_dirichlet(F, small_flow.B, f_u, np.zeros((small_flow.n_p, 2)), dofs, values)
    _, _, h_u, h_p = apply_dirichlet(F, small_flow.B, f_u[:, 1], np.zeros(small_flow.n_p), dofs, values[:, 1])
    assert_allclose(g_u[:, 1], h_u)
    assert_allclose(g_p[:, 1], h_p)
    assert abs(Fc - Fc.T).max() < 1e-15
    assert np.all(Bc[:, dofs].toarray() == 0.0)


def test_stokes_reproduces_poiseuille(open_channel):
    """Parabolic inflow with a do-nothing outflow is an exact Q2-Q1 solution."""
    nu = 0.1
    dofmap = build_dofmap(open_channel)
    boundary = build_boundary_data(open_channel, dofmap)
    A = assemble_diffusion(open_channel, dofmap, np.full(open_channel.n_nodes, nu))
    B = assemble_divergence(open_channel, dofmap)
    Fc, Bc, f_u, f_p = apply_dirichlet(A, B, np.zeros(dofmap.n_u), np.zeros(dofmap.n_p),
                                       dofmap.dirichlet_dofs, boundary.profile)
    u, p, _ = solve_saddle(Fc, Bc, f_u, f_p)

    exact = interpolate(open_channel, lambda x, y: (1.0 - y * y, 0.0 * y))
    assert_allclose(u, exact, atol=1e-10)
    x = open_channel.vertex_coordinates[:, 0]
    assert_allclose(p, 2.0 * nu * (open_channel.channel_length - x), atol=1e-9)
