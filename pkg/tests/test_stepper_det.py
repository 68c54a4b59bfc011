import numpy as np
import pytest
from numpy.testing import assert_allclose

import stepper_det
from errors import ConfigurationError, ContractViolation, SolverError
from mesh_fem import build_boundary_data
from stepper_det import (FlowState, StepperConfig, ab2_predict, average_step, build_flow_problem, estimate_error,
                         extrapolate_wind, run, run_fixed, select_step, start_state, tr_update)


def scalar_state(u, du, t, k, t_prev, u_prev=0.0, du_prev=0.0, p=0.0):
    arr = lambda v: np.array([float(v)])
    return FlowState(t=t, k=k, u=arr(u), du=arr(du), p=arr(p), u_prev=arr(u_prev), du_prev=arr(du_prev),
                     t_prev=t_prev)


def test_step_acceptance_boundary():
    tol = 1e-4
    threshold = tol / 0.7 ** 3
    assert threshold == pytest.approx(2.91545e-4, rel=1e-5)
    _, reject = select_step(0.01, 2.9154e-4, tol)
    assert not reject
    proposal, reject = select_step(0.01, 2.9156e-4, tol)
    assert reject
    assert proposal == pytest.approx(0.01 * (tol / 2.9156e-4) ** (1 / 3))


def test_zero_error_grows_by_fixed_factor():
    proposal, reject = select_step(1e-9, 0.0, 1e-4)
    assert proposal == pytest.approx(1e-8)
    assert not reject


def test_wind_extrapolation():
    state = scalar_state(u=3.0, du=0.0, t=1.0, k=0.5, t_prev=0.5, u_prev=2.0)
    assert extrapolate_wind(state, 0.25)[0] == pytest.approx(1.5 * 3.0 - 0.5 * 2.0)


def test_wind_extrapolation_needs_positive_step():
    state = scalar_state(u=1.0, du=0.0, t=0.0, k=0.0, t_prev=0.0)
    with pytest.raises(ContractViolation):
        extrapolate_wind(state, 0.1)


def test_error_estimate_is_exact_for_cubics():
    """For u = t^3 and uniform steps the estimate equals the trapezoid error."""
    u, du = (lambda t: t ** 3), (lambda t: 3 * t ** 2)
    t, k = 1.0, 0.1
    state = scalar_state(u=u(t), du=du(t), t=t, k=k, t_prev=t - k, u_prev=u(t - k), du_prev=du(t - k))
    d = 0.5 * (du(t) + du(t + k))
    u_next, du_next = tr_update(state, d, k)
    assert du_next[0] == pytest.approx(du(t + k))
    u_star = ab2_predict(state, k)
    err = estimate_error(u_next, u_star, k, k)
    assert err == pytest.approx(abs(u_next[0] - u(t + k)), rel=1e-8)


def test_error_estimate_vanishes_for_quadratics():
    u, du = (lambda t: 2 * t ** 2 - t), (lambda t: 4 * t - 1)
    t, k_prev, k = 0.7, 0.05, 0.2
    state = scalar_state(u=u(t), du=du(t), t=t, k=k_prev, t_prev=t - k_prev, u_prev=u(t - k_prev),
                         du_prev=du(t - k_prev))
    u_next, _ = tr_update(state, 0.5 * (du(t) + du(t + k)), k)
    assert estimate_error(u_next, ab2_predict(state, k), k_prev, k) < 1e-14


def test_average_step():
    state = scalar_state(u=2.0, du=1.0, t=1.0, k=0.2, t_prev=0.8, u_prev=1.0, du_prev=3.0, p=5.0)
    d = np.array([4.0])
    averaged = average_step(state, d, 0.4, p_next=np.array([7.0]))
    assert averaged.t == pytest.approx(1.2)
    assert averaged.k == pytest.approx(0.3)
    assert averaged.t_prev == pytest.approx(0.9)
    assert averaged.u[0] == pytest.approx(2.0 + 0.2 * 4.0)
    assert averaged.du[0] == pytest.approx(4.0)
    assert averaged.u_prev[0] == pytest.approx(1.5)
    assert averaged.du_prev[0] == pytest.approx(2.0)
    assert averaged.p[0] == 7.0


@pytest.mark.parametrize("field, value, key", [
    ("tolerance", 0.0, "stepper.tolerance"),
    ("reject_factor", 1.5, "stepper.reject_factor"),
    ("averaging_period", 1, "stepper.averaging_period"),
    ("max_step", -1.0, "stepper.max_step"),
])
def test_stepper_config_validation(field, value, key):
    with pytest.raises(ConfigurationError) as info:
        StepperConfig(**{field: value})
    assert info.value.key == key


def test_barriers_must_fit_the_horizon():
    with pytest.raises(ConfigurationError):
        StepperConfig(final_time=1.0, barriers=(0.5, 2.0))


def test_zero_inflow_stays_at_rest(small_mesh, small_dofmap):
    boundary = build_boundary_data(small_mesh, small_dofmap, amplitude=0.0)
    problem = build_flow_problem(small_mesh, small_dofmap, boundary, 0.05)
    result = run(problem, StepperConfig(final_time=1e-3, barriers=(1e-3,)))
    assert np.all(result.final.u == 0.0)
    steps = [r.k for r in result.history if r.accepted and r.step >= 3]
    assert all(b == pytest.approx(10 * a) for a, b in zip(steps[:3], steps[1:4]))
    assert result.final.t == 1e-3


@pytest.fixture(scope="module")
def short_run(small_flow):
    stepper = StepperConfig(tolerance=1e-4, initial_step=1e-9, final_time=0.05, barriers=(0.0, 0.01, 0.05))
    return stepper, run(small_flow, stepper)


def test_adaptive_run_lands_on_barriers(short_run):
    stepper, result = short_run
    assert sorted(result.snapshots) == [0.0, 0.01, 0.05]
    assert result.snapshots[0.01].t == 0.01
    assert result.final.t == 0.05


def test_accepted_errors_respect_threshold(short_run):
    stepper, result = short_run
    controlled = [r for r in result.history if r.accepted and r.step >= 3]
    assert controlled
    assert all(r.error_norm <= stepper.reject_threshold for r in controlled)


def test_startup_uses_initial_step_twice(short_run):
    _, result = short_run
    first = [r for r in result.history if r.accepted and r.step in (1, 2)]
    assert [r.k for r in first] == [1e-9, 1e-9]


def test_initial_step_growth(short_run):
    _, result = short_run
    ks = [r.k for r in result.history if r.accepted and r.step >= 2]
    ratios = [b / a for a, b in zip(ks[:6], ks[1:7])]
    assert max(ratios) >= 1e3


def test_averaging_every_period(short_run):
    stepper, result = short_run
    averaged = [r.step for r in result.history if r.accepted and r.averaged]
    assert averaged
    assert all(step % stepper.averaging_period == 0 for step in averaged)


def test_velocity_stays_discretely_divergence_free(short_run, small_flow):
    _, result = short_run
    for snap in result.snapshots.values():
        assert np.linalg.norm(small_flow.B @ snap.u) <= 1e-8 * max(np.linalg.norm(snap.u), 1.0)


def test_fixed_schedule_reproduces_adaptive_run(short_run, small_flow):
    stepper, result = short_run
    landings = result.accepted_times()[1:]
    replay = run_fixed(small_flow, landings, stepper.landing_barriers(), stepper.averaging_period)
    for t in (0.01, 0.05):
        assert_allclose(replay.snapshots[t].u, result.snapshots[t].u, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("k_next", [1e-3, 5e-4])
def test_first_wind_follows_initial_acceleration(small_flow, k_next):
    state = start_state(small_flow, 1e-3)
    assert np.any(state.du != 0.0)
    expected = state.u + k_next * state.du
    assert_allclose(extrapolate_wind(state, k_next), expected, rtol=1e-12, atol=1e-15)


def test_rejection_limit_counts_the_configured_number(small_flow, monkeypatch):
    monkeypatch.setattr(stepper_det, "select_step", lambda k, err, *args: (0.5 * k, True))
    stepper = StepperConfig(final_time=1e-3, barriers=(1e-3,), max_rejections=3)
    with pytest.raises(SolverError, match="3 consecutive rejections") as info:
        run(small_flow, stepper)
    assert info.value.step == 3
