"""Indirect solver: pointwise Hamiltonian quantities, the coupled
state-costate flow against hand-coded adjoint systems, shooting residual
regression, Newton solve behavior, and the reference samplers."""
from __future__ import annotations

import numpy as np
import pytest

from nhtrack.geometry import (
    AdmissibleState,
    ControlVector,
    constraint_residual,
    wrap_angle,
)
from nhtrack.ode import TimeGrid, integrate
from nhtrack.pmp import (
    AnalyticReference,
    Costate,
    FlowDivergedError,
    RolloutReference,
    ShootingSettings,
    SingularJacobianError,
    TrackingProblem,
    abnormal_diagnostic,
    hamiltonian,
    optimal_control,
    optimal_hamiltonian,
    pmp_rhs,
    running_cost,
    shooting_residual,
    solve_shooting,
)
from nhtrack.systems import SleighParams, particle_model, sleigh_model

SLEIGH_PARAMS = SleighParams(mass_m=1.0, inertia_J=4.0, offset_a=0.2)


def case2_reference():
    return AnalyticReference(
        q_base=[1.0, 0.0, 1.0], q_slope=[0.0, 0.0, 1.0],
        v_base=[0.0, 1.0], v_slope=[0.0, 0.0],
    )


def case2_problem(**overrides):
    kwargs = dict(
        reference=case2_reference(),
        horizon_T=4.0,
        epsilon=7.0,
        omega=1.0,
        initial_state=AdmissibleState(q=[0.5, 0.2, 0.7], v=[0.5, 0.4]),
    )
    kwargs.update(overrides)
    return TrackingProblem(**kwargs)


def hand_particle_rhs(problem):
    """Independently hand-coded coupled flow for the flat particle.

    State equations plus the adjoint system written out componentwise from
    the optimal Hamiltonian (c = y / (1 + y^2)):

        lamdot_1 = -lam0 (x - x_r)
        lamdot_2 =  l1 v2 - lam0 (y - y_r) + m2 v1 v2 (1 - y^2)/(1 + y^2)^2
        lamdot_3 = -lam0 (z - z_r)
        mudot_1  = -l2 - lam0 (v1 - v1_r) + m2 c v2
        mudot_2  = -l3 + l1 y - lam0 (v2 - v2_r) + m2 c v1
    """
    lam0, eps = problem.lambda0, problem.epsilon
    ref = problem.reference

    def rhs(t, y):
        x, yy, z, v1, v2, l1, l2, l3, m1, m2 = y
        r = ref(t)
        xr, yr, zr = r.q
        v1r, v2r = r.v
        c = yy / (1.0 + yy * yy)
        u1 = -m1 / (lam0 * eps)
        u2 = -m2 / (lam0 * eps)
        return np.array([
            -yy * v2,
            v1,
            v2,
            u1,
            -c * v1 * v2 + u2,
            -lam0 * (x - xr),
            l1 * v2 - lam0 * (yy - yr)
            + m2 * v1 * v2 * (1.0 - yy * yy) / (1.0 + yy * yy) ** 2,
            -lam0 * (z - zr),
            -l2 - lam0 * (v1 - v1r) + m2 * c * v2,
            -l3 + l1 * yy - lam0 * (v2 - v2r) + m2 * c * v1,
        ])

    return rhs


def hand_sleigh_rhs(problem, params):
    """Hand-coded coupled flow for the sleigh (eta = a sqrt(m)/(J + m a^2),
    s = sqrt(J + m a^2), sm = sqrt(m)); the theta tracking error is wrapped."""
    lam0, eps = problem.lambda0, problem.epsilon
    ref = problem.reference
    eta = params.eta
    s = np.sqrt(params.inertia_J + params.mass_m * params.offset_a**2)
    sm = np.sqrt(params.mass_m)

    def rhs(t, y):
        x1, x2, th, v1, v2, l1, l2, l3, m1, m2 = y
        r = ref(t)
        u1 = -m1 / (lam0 * eps)
        u2 = -m2 / (lam0 * eps)
        return np.array([
            np.cos(th) / sm * v2,
            np.sin(th) / sm * v2,
            v1 / s,
            -eta * v1 * v2 + u1,
            eta * v1 * v1 + u2,
            -lam0 * (x1 - r.q[0]),
            -lam0 * (x2 - r.q[1]),
            -lam0 * wrap_angle(th - r.q[2])
            + v2 * (l1 * np.sin(th) - l2 * np.cos(th)) / sm,
            -lam0 * (v1 - r.v[0]) - l3 / s + eta * m1 * v2 - 2.0 * eta * m2 * v1,
            -lam0 * (v2 - r.v[1]) - (l1 * np.cos(th) + l2 * np.sin(th)) / sm
            + eta * m1 * v1,
        ])

    return rhs


# ---------------------------------------------------------------------------
# running cost


def test_running_cost_zero_on_reference():
    model = particle_model()
    prob = case2_problem()
    state = prob.reference(1.7)
    assert running_cost(model, prob, 1.7, state, np.zeros(2)) == 0.0


def test_running_cost_arithmetic():
    # |dq|^2 = 4, |dv|^2 = 1, eps = 9, |u|^2 = 2 -> (4 + 1 + 18)/2 = 11.5
    model = particle_model()
    prob = case2_problem(epsilon=9.0)
    ref = prob.reference(0.0)
    state = AdmissibleState(q=ref.q + [2.0, 0.0, 0.0], v=ref.v + [1.0, 0.0])
    u = np.array([1.0, 1.0])
    assert running_cost(model, prob, 0.0, state, u) == pytest.approx(
        11.5, abs=1e-14
    )


def test_running_cost_control_term_scaling():
    model = particle_model()
    prob = case2_problem()
    state = AdmissibleState(q=[0.3, -0.4, 2.0], v=[1.0, -2.0])
    u = np.array([0.7, -1.1])
    base = running_cost(model, prob, 1.0, state, np.zeros(2))
    single = running_cost(model, prob, 1.0, state, u)
    double = running_cost(model, prob, 1.0, state, 2.0 * u)
    assert double - base == pytest.approx(4.0 * (single - base), rel=1e-12)


def test_running_cost_accepts_control_vector():
    model = particle_model()
    prob = case2_problem()
    state = AdmissibleState(q=[0.3, -0.4, 2.0], v=[1.0, -2.0])
    u = np.array([0.7, -1.1])
    assert running_cost(model, prob, 1.0, state, ControlVector(u=u)) == (
        running_cost(model, prob, 1.0, state, u)
    )


def test_running_cost_wraps_angle_error():
    model = sleigh_model(SLEIGH_PARAMS)
    ref = AnalyticReference(
        q_base=[0.0, 0.0, 0.5], q_slope=np.zeros(3),
        v_base=[0.0, 0.0], v_slope=np.zeros(2),
    )
    prob = TrackingProblem(
        reference=ref, horizon_T=1.0, epsilon=1.0, omega=1.0,
        initial_state=ref(0.0),
    )
    state = AdmissibleState(q=[0.0, 0.0, 0.5 + 2.0 * np.pi], v=[0.0, 0.0])
    assert running_cost(model, prob, 0.0, state, np.zeros(2)) == pytest.approx(
        0.0, abs=1e-25
    )


def test_running_cost_rejects_time_outside_horizon():
    model = particle_model()
    prob = case2_problem()
    with pytest.raises(ValueError, match="horizon"):
        running_cost(model, prob, -1.0, prob.reference(0.0), np.zeros(2))
    with pytest.raises(ValueError, match="horizon"):
        running_cost(model, prob, 4.5, prob.reference(0.0), np.zeros(2))


# ---------------------------------------------------------------------------
# pointwise control and Hamiltonian


def test_optimal_control_zero_mu():
    u = optimal_control(np.zeros(2), epsilon=7.0, lambda0=1.0)
    np.testing.assert_array_equal(u.u, np.zeros(2))


def test_optimal_control_arithmetic():
    u = optimal_control(np.array([2.0, -3.0]), epsilon=9.0, lambda0=1.0)
    np.testing.assert_allclose(u.u, [-2.0 / 9.0, 1.0 / 3.0], rtol=1e-15)


def test_optimal_control_stationarity():
    # dH/du = lam0 eps u + mu vanishes identically at the minimizer
    rng = np.random.default_rng(7)
    for _ in range(50):
        mu = rng.uniform(-5, 5, size=2)
        eps = rng.uniform(0.1, 10)
        lam0 = rng.uniform(0.1, 2)
        u = optimal_control(mu, eps, lam0).u
        np.testing.assert_allclose(lam0 * eps * u + mu, 0.0, atol=1e-12)


@pytest.mark.parametrize("eps,lam0", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (1.0, -2.0)])
def test_optimal_control_rejects_nonpositive_parameters(eps, lam0):
    with pytest.raises(ValueError):
        optimal_control(np.zeros(2), eps, lam0)


def test_hamiltonian_trivial_zero():
    model = particle_model()
    prob = case2_problem()
    state = prob.reference(2.0)
    assert hamiltonian(
        model, prob, 2.0, state, Costate.zero(model), np.zeros(2)
    ) == 0.0


def test_hamiltonian_minimized_at_optimal_control():
    model = particle_model()
    prob = case2_problem()
    rng = np.random.default_rng(11)
    for _ in range(10):
        t = rng.uniform(0, 4)
        state = AdmissibleState(q=rng.uniform(-2, 2, 3), v=rng.uniform(-2, 2, 2))
        costate = Costate(lam=rng.uniform(-2, 2, 3), mu=rng.uniform(-2, 2, 2))
        h_star = optimal_hamiltonian(model, prob, t, state, costate)
        for _ in range(100):
            u = rng.uniform(-10, 10, 2)
            assert h_star <= hamiltonian(model, prob, t, state, costate, u) + 1e-12


def test_optimal_hamiltonian_is_hamiltonian_at_minimizer():
    model = particle_model()
    prob = case2_problem()
    state = AdmissibleState(q=[0.1, 0.6, -0.3], v=[1.2, -0.8])
    costate = Costate(lam=[0.5, -1.0, 2.0], mu=[0.3, -0.7])
    u = optimal_control(costate.mu, prob.epsilon, prob.lambda0)
    assert optimal_hamiltonian(model, prob, 1.0, state, costate) == (
        hamiltonian(model, prob, 1.0, state, costate, u)
    )


def test_optimal_hamiltonian_particle_flat_plane_termwise():
    # at y = 0 the constraint plane is flat and H* collapses to
    #   tracking/2 + lam2 v1 + lam3 v2 - |mu|^2 / (2 eps)      (lam0 = 1)
    model = particle_model()
    prob = case2_problem(epsilon=7.0)
    t = 0.0
    state = AdmissibleState(q=[0.8, 0.0, 0.4], v=[1.5, -0.6])
    costate = Costate(lam=[0.9, -1.3, 0.5], mu=[2.0, -3.0])
    ref = prob.reference(t)
    tracking = np.sum((state.q - ref.q) ** 2) + np.sum((state.v - ref.v) ** 2)
    expected = (
        0.5 * tracking
        + (-1.3) * 1.5
        + 0.5 * (-0.6)
        - (2.0**2 + 3.0**2) / (2.0 * 7.0)
    )
    assert optimal_hamiltonian(model, prob, t, state, costate) == pytest.approx(
        expected, rel=1e-14
    )


# ---------------------------------------------------------------------------
# coupled state-costate flow


def test_pmp_rhs_matches_hand_coded_particle_adjoints():
    model = particle_model()
    prob = case2_problem()
    hand = hand_particle_rhs(prob)
    rng = np.random.default_rng(3)
    for _ in range(100):
        t = rng.uniform(0, 4)
        state = AdmissibleState(q=rng.uniform(-2, 2, 3), v=rng.uniform(-2, 2, 2))
        costate = Costate(lam=rng.uniform(-2, 2, 3), mu=rng.uniform(-2, 2, 2))
        (qd, vd), (ld, md) = pmp_rhs(model, prob, t, state, costate)
        got = np.concatenate([qd, vd, ld, md])
        want = hand(t, np.concatenate([state.q, state.v, costate.lam, costate.mu]))
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


def test_pmp_rhs_matches_hand_coded_sleigh_adjoints():
    model = sleigh_model(SLEIGH_PARAMS)
    ref = AnalyticReference(
        q_base=[0.0, 0.5, 0.1], q_slope=[0.1, 0.0, 0.2],
        v_base=[0.3, 1.0], v_slope=np.zeros(2),
    )
    prob = TrackingProblem(
        reference=ref, horizon_T=5.0, epsilon=1.0, omega=1.0,
        initial_state=AdmissibleState(q=np.zeros(3), v=[1.0, 1.0]),
    )
    hand = hand_sleigh_rhs(prob, SLEIGH_PARAMS)
    rng = np.random.default_rng(4)
    for _ in range(100):
        t = rng.uniform(0, 5)
        state = AdmissibleState(q=rng.uniform(-2, 2, 3), v=rng.uniform(-2, 2, 2))
        costate = Costate(lam=rng.uniform(-2, 2, 3), mu=rng.uniform(-2, 2, 2))
        (qd, vd), (ld, md) = pmp_rhs(model, prob, t, state, costate)
        got = np.concatenate([qd, vd, ld, md])
        want = hand(t, np.concatenate([state.q, state.v, costate.lam, costate.mu]))
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


def test_pmp_rhs_zero_costate_on_reference():
    # on the reference with zero costate every tracking and coupling term
    # vanishes, so the costate derivatives are exactly zero
    model = particle_model()
    prob = case2_problem()
    state = prob.reference(1.3)
    (qd, vd), (ld, md) = pmp_rhs(model, prob, 1.3, state, Costate.zero(model))
    np.testing.assert_array_equal(ld, np.zeros(3))
    np.testing.assert_array_equal(md, np.zeros(2))


@pytest.mark.parametrize("system", ["particle", "sleigh"])
def test_costate_rhs_is_minus_gradient_of_optimal_hamiltonian(system):
    if system == "particle":
        model = particle_model()
        prob = case2_problem()
        t_hi = 4.0
    else:
        model = sleigh_model(SLEIGH_PARAMS)
        prob = TrackingProblem(
            reference=AnalyticReference(
                q_base=[0.0, 0.5, 0.1], q_slope=[0.1, 0.0, 0.2],
                v_base=[0.3, 1.0], v_slope=np.zeros(2),
            ),
            horizon_T=5.0, epsilon=1.0, omega=1.0,
            initial_state=AdmissibleState(q=np.zeros(3), v=[1.0, 1.0]),
        )
        t_hi = 5.0

    rng = np.random.default_rng(5)
    step = 1e-6
    for _ in range(100):
        t = rng.uniform(0, t_hi)
        q = rng.uniform(-2, 2, 3)
        v = rng.uniform(-2, 2, 2)
        costate = Costate(lam=rng.uniform(-2, 2, 3), mu=rng.uniform(-2, 2, 2))
        _, (ld, md) = pmp_rhs(
            model, prob, t, AdmissibleState(q=q, v=v), costate
        )

        grad_q = np.empty(3)
        for i in range(3):
            qp, qm = q.copy(), q.copy()
            qp[i] += step
            qm[i] -= step
            grad_q[i] = (
                optimal_hamiltonian(model, prob, t, AdmissibleState(q=qp, v=v), costate)
                - optimal_hamiltonian(model, prob, t, AdmissibleState(q=qm, v=v), costate)
            ) / (2.0 * step)
        grad_v = np.empty(2)
        for a in range(2):
            vp, vm = v.copy(), v.copy()
            vp[a] += step
            vm[a] -= step
            grad_v[a] = (
                optimal_hamiltonian(model, prob, t, AdmissibleState(q=q, v=vp), costate)
                - optimal_hamiltonian(model, prob, t, AdmissibleState(q=q, v=vm), costate)
            ) / (2.0 * step)

        np.testing.assert_allclose(ld, -grad_q, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(md, -grad_v, rtol=1e-5, atol=1e-5)


def test_pmp_rhs_raises_on_nonfinite_derivatives():
    model = particle_model()
    prob = case2_problem()
    state = AdmissibleState(q=[0.0, 1.0, 0.0], v=[1e308, 1e308])
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(ArithmeticError, match="non-finite"):
            pmp_rhs(model, prob, 0.0, state, Costate.zero(model))


def test_optimal_hamiltonian_conserved_for_time_independent_reference():
    # the reference enters H* only through gamma_r(t); freezing it makes the
    # flow autonomous, so H* is a first integral of the exact extremal flow
    model = particle_model()
    ref = AnalyticReference(
        q_base=[1.0, 0.0, 1.0], q_slope=np.zeros(3),
        v_base=[0.0, 1.0], v_slope=np.zeros(2),
    )
    prob = TrackingProblem(
        reference=ref, horizon_T=2.0, epsilon=7.0, omega=1.0,
        initial_state=AdmissibleState(q=[0.5, 0.2, 0.7], v=[0.5, 0.4]),
    )
    alpha = Costate(lam=[0.4, -0.3, 0.8], mu=[0.6, -0.2])

    def f(t, y):
        state = AdmissibleState.from_vector(y[:5], 3)
        costate = Costate(lam=y[5:8], mu=y[8:])
        (qd, vd), (ld, md) = pmp_rhs(model, prob, t, state, costate)
        return np.concatenate([qd, vd, ld, md])

    y0 = np.concatenate([prob.initial_state.as_vector(), alpha.as_vector()])
    times, ys = integrate(f, y0, TimeGrid(0.0, 2.0, 200))
    values = [
        optimal_hamiltonian(
            model, prob, t,
            AdmissibleState.from_vector(y[:5], 3),
            Costate(lam=y[5:8], mu=y[8:]),
        )
        for t, y in zip(times, ys)
    ]
    drift = np.max(np.abs(np.asarray(values) - values[0]))
    assert drift <= 1e-4


# ---------------------------------------------------------------------------
# shooting residual


def test_shooting_residual_short_horizon_limit():
    # as T -> 0 the flow is the identity and the mayer residual collapses to
    # (alpha_lam - omega dq(0), alpha_mu - omega dv(0))
    model = particle_model()
    prob = case2_problem(horizon_T=1e-9)
    alpha = Costate(lam=[0.3, -0.8, 1.2], mu=[0.5, -0.4])
    settings = ShootingSettings(inner_grid=TimeGrid(0.0, 1e-9, 1))
    r = shooting_residual(model, prob, alpha, settings)
    dq0 = prob.initial_state.q - prob.reference(0.0).q
    dv0 = prob.initial_state.v - prob.reference(0.0).v
    expected = np.concatenate([alpha.lam - dq0, alpha.mu - dv0])
    np.testing.assert_allclose(r, expected, atol=1e-6)


# regression oracle: particle Case 2 at alpha = 0 on the h = 1e-3 flow,
# frozen from the hand-coded adjoint system integrated by plain RK4
CASE2_ALPHA0_RESIDUAL = np.array([
    2.6558832129454113,
    -7.8681938862746774,
    11.752460419935462,
    4.2218168770702134,
    5.461233482467085,
])


def test_shooting_residual_case2_regression():
    model = particle_model()
    prob = case2_problem()
    grid = TimeGrid(0.0, 4.0, 4000)
    r = shooting_residual(
        model, prob, Costate.zero(model), ShootingSettings(inner_grid=grid)
    )
    np.testing.assert_allclose(r, CASE2_ALPHA0_RESIDUAL, atol=1e-9)

    # recompute the oracle in place from the independent hand-coded flow
    _, ys = integrate(hand_particle_rhs(prob), np.concatenate(
        [prob.initial_state.as_vector(), np.zeros(5)]
    ), grid)
    ref_T = prob.reference(4.0)
    hand = np.concatenate([
        ys[-1, 5:8] - prob.omega * (ys[-1, :3] - ref_T.q),
        ys[-1, 8:] - prob.omega * (ys[-1, 3:5] - ref_T.v),
    ])
    np.testing.assert_allclose(r, hand, atol=1e-9)


def test_shooting_residual_hard_mode_is_terminal_mismatch():
    model = particle_model()
    prob = case2_problem(terminal_mode="hard", horizon_T=0.5)
    grid = TimeGrid(0.0, 0.5, 500)
    alpha = Costate(lam=[0.1, 0.2, -0.3], mu=[0.4, -0.5])
    r = shooting_residual(model, prob, alpha, ShootingSettings(inner_grid=grid))

    def f(t, y):
        state = AdmissibleState.from_vector(y[:5], 3)
        costate = Costate(lam=y[5:8], mu=y[8:])
        (qd, vd), (ld, md) = pmp_rhs(model, prob, t, state, costate)
        return np.concatenate([qd, vd, ld, md])

    _, ys = integrate(
        f, np.concatenate([prob.initial_state.as_vector(), alpha.as_vector()]), grid
    )
    ref_T = prob.reference(0.5)
    expected = np.concatenate([ys[-1, :3] - ref_T.q, ys[-1, 3:5] - ref_T.v])
    np.testing.assert_allclose(r, expected, atol=1e-7)


def test_shooting_residual_diverged_flow_reports_blowup_time():
    model = particle_model()
    prob = case2_problem()
    alpha = Costate(lam=np.zeros(3), mu=[1e14, 1e14])
    with pytest.raises(FlowDivergedError) as info:
        shooting_residual(model, prob, alpha)
    assert 0.0 <= info.value.t <= 4.0


def test_shooting_residual_rejects_mismatched_grid():
    model = particle_model()
    prob = case2_problem()
    settings = ShootingSettings(inner_grid=TimeGrid(0.0, 3.0, 100))
    with pytest.raises(ValueError, match="inner_grid"):
        shooting_residual(model, prob, Costate.zero(model), settings)


# ---------------------------------------------------------------------------
# shooting solve


def short_case2_problem():
    return case2_problem(horizon_T=1.0)


def test_solve_shooting_short_horizon_converges_and_reports():
    model = particle_model()
    prob = short_case2_problem()
    settings = ShootingSettings(inner_grid=TimeGrid(0.0, 1.0, 50))
    alpha, traj, report = solve_shooting(model, prob, settings=settings)

    assert report.converged
    assert report.residual_norm <= settings.newton_tol
    assert report.message == "converged"
    assert len(report.records) == report.iterations
    assert report.records[-1].residual_norm == report.residual_norm

    # residual at the returned costate agrees with the report
    r = shooting_residual(model, prob, alpha, settings)
    assert np.linalg.norm(r) <= settings.newton_tol

    # trajectory series shapes and the stationarity of the reported controls
    assert traj.times.shape == (51,)
    assert traj.q.shape == (51, 3)
    assert traj.v.shape == (51, 2)
    assert traj.u.shape == (51, 2)
    assert traj.lam.shape == (51, 3)
    assert traj.mu.shape == (51, 2)
    np.testing.assert_allclose(
        prob.lambda0 * prob.epsilon * traj.u + traj.mu, 0.0, atol=1e-14
    )
    np.testing.assert_array_equal(traj.q[0], prob.initial_state.q)
    np.testing.assert_array_equal(traj.v[0], prob.initial_state.v)


def test_solve_shooting_already_converged_returns_zero_iterations():
    model = particle_model()
    prob = short_case2_problem()
    settings = ShootingSettings(inner_grid=TimeGrid(0.0, 1.0, 50))
    alpha, _, first = solve_shooting(model, prob, settings=settings)
    assert first.converged

    again, _, report = solve_shooting(model, prob, alpha0=alpha, settings=settings)
    assert report.converged
    assert report.iterations == 0
    assert report.records == ()
    assert "already within tolerance" in report.message
    np.testing.assert_array_equal(again.as_vector(), alpha.as_vector())


def test_solve_shooting_nonconvergence_is_reported_not_raised():
    model = particle_model()
    prob = case2_problem()  # full T = 4 from cold start stalls quickly
    settings = ShootingSettings(
        inner_grid=TimeGrid(0.0, 4.0, 100), max_iters=2
    )
    _, _, report = solve_shooting(model, prob, settings=settings)
    assert not report.converged
    assert report.iterations == 2
    assert len(report.records) == 2
    assert "no convergence" in report.message
    assert np.isfinite(report.residual_norm)


def test_solve_shooting_horizon_continuation_reaches_full_horizon():
    # continuation warm-starts through shortened horizons; the returned log
    # covers only the final full-horizon solve
    model = particle_model()
    prob = case2_problem()
    settings = ShootingSettings(
        inner_grid=TimeGrid(0.0, 4.0, 200),
        continuation="horizon",
        continuation_stages=4,
    )
    alpha, traj, report = solve_shooting(model, prob, settings=settings)
    assert report.converged
    assert traj.times[-1] == pytest.approx(4.0, abs=1e-12)
    r = shooting_residual(model, prob, alpha, settings)
    assert np.linalg.norm(r) <= settings.newton_tol


def test_constraint_residual_of_flow_refines_at_integrator_order():
    # differentiate the discrete q-series by 4th-order central differences;
    # the annihilator applied to it must shrink at the flow's order
    model = particle_model()
    prob = short_case2_problem()
    alpha = Costate(lam=[0.1, -0.2, 0.3], mu=[0.2, 0.1])

    def f(t, y):
        state = AdmissibleState.from_vector(y[:5], 3)
        costate = Costate(lam=y[5:8], mu=y[8:])
        (qd, vd), (ld, md) = pmp_rhs(model, prob, t, state, costate)
        return np.concatenate([qd, vd, ld, md])

    y0 = np.concatenate([prob.initial_state.as_vector(), alpha.as_vector()])

    def worst_residual(steps):
        grid = TimeGrid(0.0, 1.0, steps)
        _, ys = integrate(f, y0, grid)
        q = ys[:, :3]
        h = grid.h
        worst = 0.0
        for j in range(2, steps - 1):
            qdot = (q[j - 2] - 8 * q[j - 1] + 8 * q[j + 1] - q[j + 2]) / (12 * h)
            worst = max(worst, abs(constraint_residual(model, q[j], qdot)[0]))
        return worst

    coarse, fine = worst_residual(100), worst_residual(200)
    assert coarse / fine >= 8.0


# ---------------------------------------------------------------------------
# abnormal-extremal diagnostic


def test_abnormal_diagnostic_static_arc_admits_nontrivial_costate():
    model = particle_model()
    times = np.linspace(0.0, 2.0, 81)
    q = np.tile([0.3, 0.7, -0.2], (81, 1))
    v = np.zeros((81, 2))
    report = abnormal_diagnostic(model, times, q, v)
    assert report.nontrivial_solution
    assert report.singular_value_ratio < 1e-10


def test_abnormal_diagnostic_moving_arc_does_not():
    from nhtrack.geometry import dynamics_rhs

    model = particle_model()

    def f(t, y):
        state = AdmissibleState.from_vector(y, 3)
        qd, vd = dynamics_rhs(model, state, np.array([0.1 * np.sin(t), 0.2]))
        return np.concatenate([qd, vd])

    times, ys = integrate(f, np.array([0.0, 0.5, 0.0, 0.4, 0.8]), TimeGrid(0.0, 2.0, 80))
    report = abnormal_diagnostic(model, times, ys[:, :3], ys[:, 3:])
    assert not report.nontrivial_solution
    assert report.singular_value_ratio > 1e-3


# ---------------------------------------------------------------------------
# validation and error surfaces


def test_tracking_problem_epsilon_zero_names_singular_exclusion():
    with pytest.raises(ValueError, match="singular"):
        case2_problem(epsilon=0.0)


@pytest.mark.parametrize(
    "overrides",
    [
        {"epsilon": -1.0},
        {"lambda0": 0.0},
        {"lambda0": -1.0},
        {"horizon_T": 0.0},
        {"omega": -0.5},
        {"terminal_mode": "soft"},
        {"state_weight": -1.0},
    ],
)
def test_tracking_problem_validation(overrides):
    with pytest.raises(ValueError):
        case2_problem(**overrides)


def test_costate_rejects_nonfinite_entries():
    with pytest.raises(ValueError, match="finite"):
        Costate(lam=[np.nan, 0.0, 0.0], mu=[0.0, 0.0])
    with pytest.raises(ValueError, match="finite"):
        Costate(lam=np.zeros(3), mu=[np.inf, 0.0])


def test_costate_vector_roundtrip():
    model = particle_model()
    z = Costate.zero(model)
    assert z.lam.shape == (3,)
    assert z.mu.shape == (2,)
    c = Costate(lam=[1.0, 2.0, 3.0], mu=[4.0, 5.0])
    np.testing.assert_array_equal(c.as_vector(), [1.0, 2.0, 3.0, 4.0, 5.0])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"newton_tol": 0.0},
        {"fd_step": -1e-6},
        {"damping": 0.0},
        {"max_iters": 0},
        {"max_halvings": 0},
        {"continuation": "omega"},
        {"continuation_stages": 0},
    ],
)
def test_shooting_settings_validation(kwargs):
    with pytest.raises(ValueError):
        ShootingSettings(**kwargs)


def test_singular_jacobian_error_suggests_regularization():
    err = SingularJacobianError(1e15)
    assert err.cond == 1e15
    assert "epsilon" in str(err)


# ---------------------------------------------------------------------------
# reference samplers


def test_analytic_reference_is_affine_in_time():
    ref = case2_reference()
    s = ref(2.5)
    np.testing.assert_allclose(s.q, [1.0, 0.0, 3.5], rtol=1e-15)
    np.testing.assert_allclose(s.v, [0.0, 1.0], rtol=1e-15)


def test_rollout_reference_matches_direct_integration_at_nodes():
    from nhtrack.geometry import dynamics_rhs

    model = particle_model()
    start = AdmissibleState(q=[0.0, 0.5, 0.0], v=[0.4, 0.8])
    ref = RolloutReference(model, start, horizon=1.0, step=1e-3)

    def f(t, y):
        state = AdmissibleState.from_vector(y, 3)
        qd, vd = dynamics_rhs(model, state, np.zeros(2))
        return np.concatenate([qd, vd])

    _, ys = integrate(f, start.as_vector(), TimeGrid(0.0, 0.25, 250))
    node = ref(0.25)
    np.testing.assert_allclose(node.as_vector(), ys[-1], atol=1e-13)


def test_rollout_reference_endpoints_are_bit_identical():
    model = particle_model()
    start = AdmissibleState(q=[0.0, 0.5, 0.0], v=[0.4, 0.8])
    ref = RolloutReference(model, start, horizon=1.0, step=1e-3)

    np.testing.assert_array_equal(ref(0.0).as_vector(), start.as_vector())
    np.testing.assert_array_equal(ref(-1e-10).as_vector(), start.as_vector())
    end_a = ref(1.0).as_vector()
    end_b = ref(1.0).as_vector()
    end_c = ref(1.0 + 1e-10).as_vector()
    np.testing.assert_array_equal(end_a, end_b)
    np.testing.assert_array_equal(end_a, end_c)


def test_rollout_reference_interpolates_between_nodes():
    from nhtrack.geometry import dynamics_rhs

    model = particle_model()
    start = AdmissibleState(q=[0.0, 0.5, 0.0], v=[0.4, 0.8])
    ref = RolloutReference(model, start, horizon=1.0, step=1e-3)

    def f(t, y):
        state = AdmissibleState.from_vector(y, 3)
        qd, vd = dynamics_rhs(model, state, np.zeros(2))
        return np.concatenate([qd, vd])

    t = 0.2505
    _, ys = integrate(f, start.as_vector(), TimeGrid(0.0, t, 5010))
    np.testing.assert_allclose(ref(t).as_vector(), ys[-1], atol=1e-10)


def test_rollout_reference_rejects_out_of_range_times():
    model = particle_model()
    start = AdmissibleState(q=[0.0, 0.5, 0.0], v=[0.4, 0.8])
    ref = RolloutReference(model, start, horizon=1.0, step=1e-2)
    with pytest.raises(ValueError, match="horizon"):
        ref(-0.1)
    with pytest.raises(ValueError, match="horizon"):
        ref(1.1)


@pytest.mark.parametrize("kwargs", [{"horizon": 0.0}, {"horizon": -1.0}, {"step": 0.0}])
def test_rollout_reference_validation(kwargs):
    model = particle_model()
    start = AdmissibleState(q=[0.0, 0.5, 0.0], v=[0.4, 0.8])
    full = {"horizon": 1.0, "step": 1e-2}
    full.update(kwargs)
    with pytest.raises(ValueError):
        RolloutReference(model, start, **full)
