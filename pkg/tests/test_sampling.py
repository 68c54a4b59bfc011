import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import ConfigurationError, ContractViolation
from random_field import build_basis, sample_viscosity
from sampling import (SampleSet, build_sparse_grid, draw_mc, ensemble_moments, gpc_moments, project_pseudospectral,
                      run_ensemble, sample_moments, standard_error)
from stepper_det import StepperConfig, run_fixed

LANDINGS = [round(1e-3 * i, 12) for i in range(1, 5)]


def test_mc_draws_are_reproducible():
    a, b = draw_mc(50, 3, seed=7), draw_mc(50, 3, seed=7)
    assert a.points.shape == (50, 3)
    assert np.array_equal(a.points, b.points)
    assert a.weights.sum() == pytest.approx(1.0)
    assert not np.array_equal(a.points, draw_mc(50, 3, seed=8).points)


def test_mc_needs_samples():
    with pytest.raises(ConfigurationError) as info:
        draw_mc(0, 2)
    assert info.value.key == "sampling.n_mc"


def test_level_zero_grid_is_the_origin():
    grid = build_sparse_grid(2, 0)
    assert len(grid) == 1
    assert np.all(grid.points == 0.0)
    assert grid.weights[0] == pytest.approx(1.0)


def test_sparse_grid_merges_shared_points():
    grid = build_sparse_grid(2, 2)
    assert len(grid) == 13
    assert len({tuple(np.round(p, 12)) for p in grid.points}) == 13
    assert grid.level == 2


@pytest.mark.parametrize("powers, moment", [((0, 0), 1.0), ((2, 0), 1.0), ((2, 2), 1.0), ((4, 0), 3.0),
                                            ((1, 3), 0.0), ((3, 2), 0.0), ((5, 0), 0.0), ((1, 4), 0.0)])
def test_sparse_grid_integrates_low_degree_monomials(powers, moment):
    grid = build_sparse_grid(2, 2)
    values = grid.points[:, 0] ** powers[0] * grid.points[:, 1] ** powers[1]
    assert grid.weights @ values == pytest.approx(moment, abs=1e-12)


def test_negative_level_rejected():
    with pytest.raises(ConfigurationError):
        build_sparse_grid(2, -1)


def test_projection_recovers_polynomial_coefficients(rng):
    basis = build_basis(2, 2)
    grid = build_sparse_grid(2, 3)
    coefficients = rng.standard_normal((3, basis.size))
    values = basis.evaluate(grid.points) @ coefficients.T
    assert_allclose(project_pseudospectral(values, grid, basis), coefficients, atol=1e-12)


def test_gpc_moments():
    moments = gpc_moments(np.array([[2.0, 3.0, 4.0], [1.0, 0.0, 0.0]]))
    assert_allclose(moments.mean, [2.0, 1.0])
    assert_allclose(moments.variance, [25.0, 0.0])


def test_sample_moments_skip_failed_samples():
    values = np.array([[1.0, 2.0], [3.0, 6.0], [np.nan, np.nan], [5.0, 10.0]])
    moments = sample_moments(values)
    assert moments.n_samples == 3
    assert_allclose(moments.mean, [3.0, 6.0])
    assert_allclose(moments.variance, [4.0, 16.0])
    assert_allclose(standard_error(moments), np.sqrt([4.0, 16.0]) / np.sqrt(3.0))


def test_single_sample_has_undefined_variance(caplog):
    with caplog.at_level(logging.WARNING):
        moments = sample_moments(np.array([[1.0, 2.0]]))
    assert not moments.variance_defined
    assert np.all(moments.variance == 0.0)
    assert "Variance undefined" in caplog.text


def test_ensemble_moments_needs_exactly_one_source():
    with pytest.raises(ContractViolation):
        ensemble_moments()
    with pytest.raises(ContractViolation):
        ensemble_moments(samples=np.ones((2, 1)), coefficients=np.ones((1, 3)))


def test_ensemble_on_common_schedule(small_flow, small_viscosity):
    stepper = StepperConfig(final_time=0.004, barriers=(0.002,))
    points = np.array([[0.0, 0.0], [1.0, -0.5]])
    samples = SampleSet(points=points, weights=np.full(2, 0.5), provenance="test")
    ensemble = run_ensemble(samples, small_flow, small_viscosity, stepper, threads=2, landings=LANDINGS)

    assert ensemble.barriers == [0.002, 0.004]
    assert ensemble.velocity.shape == (2, 2, small_flow.n_u)
    assert ensemble.succeeded.all()
    assert not np.isnan(ensemble.velocity).any()

    direct = run_fixed(small_flow.with_viscosity(sample_viscosity(small_viscosity, points[1])), LANDINGS,
                       [0.002, 0.004])
    assert_allclose(ensemble.velocity[1, 1], direct.snapshots[0.004].u, rtol=1e-12, atol=1e-15)
    assert not np.allclose(ensemble.velocity[0, 1], ensemble.velocity[1, 1])


def test_failed_sample_is_recorded(small_flow, small_viscosity, caplog):
    stepper = StepperConfig(final_time=0.004, barriers=(0.002,))
    samples = SampleSet(points=np.zeros((1, 2)), weights=np.ones(1), provenance="test")
    with caplog.at_level(logging.WARNING):
        ensemble = run_ensemble(samples, small_flow, small_viscosity, stepper, landings=[0.002, 0.001, 0.004])
    assert not ensemble.succeeded[0]
    assert "does not advance" in ensemble.errors[0]
    assert np.isnan(ensemble.velocity).all()
    assert "1 of 1 samples failed" in caplog.text
