import numpy as np
import pytest

from mesh_fem import build_boundary_data, build_dofmap, generate_obstacle_mesh
from random_field import build_basis, build_viscosity
from stepper_det import build_flow_problem

SHORT_CHANNEL = dict(channel_length=4.0, channel_halfheight=1.0, obstacle_box=(1.0, 1.5, -0.25, 0.25))


@pytest.fixture(scope="session")
def small_mesh():
    """16 x 8 element channel with a 2 x 2 element obstacle."""
    return generate_obstacle_mesh(**SHORT_CHANNEL, refinement=1)


@pytest.fixture(scope="session")
def open_channel():
    """Obstacle-free 2 x 2 channel for Poiseuille checks."""
    return generate_obstacle_mesh(2.0, 1.0, None, refinement=1, base_spacing=0.25)


@pytest.fixture(scope="session")
def small_dofmap(small_mesh):
    return build_dofmap(small_mesh)


@pytest.fixture(scope="session")
def small_boundary(small_mesh, small_dofmap):
    return build_boundary_data(small_mesh, small_dofmap)


@pytest.fixture(scope="session")
def small_flow(small_mesh, small_dofmap, small_boundary):
    return build_flow_problem(small_mesh, small_dofmap, small_boundary, 0.05)


@pytest.fixture(scope="session")
def small_viscosity(small_mesh):
    return build_viscosity(small_mesh, 0.05, 0.1, 3.0, 0.5, m=2, p=2, terms_1d=6)


@pytest.fixture(scope="session")
def basis_2_2():
    return build_basis(2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
