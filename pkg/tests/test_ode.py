"""Fixed-step RK4: tableau value, convergence order, error reporting."""
from __future__ import annotations

import numpy as np
import pytest

from nhtrack.ode import IntegrationError, TimeGrid, integrate, rk4_step


def test_grid_rejects_bad_parameters():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 10)
    with pytest.raises(ValueError):
        TimeGrid(2.0, 1.0, 10)


def test_grid_times():
    grid = TimeGrid(1.0, 3.0, 4)
    assert grid.h == pytest.approx(0.5)
    np.testing.assert_allclose(grid.times(), [1.0, 1.5, 2.0, 2.5, 3.0])


def test_rk4_zero_field():
    y = np.array([1.0, -2.0, 3.0])
    out = rk4_step(lambda t, x: np.zeros(3), 0.0, y, 0.1)
    np.testing.assert_array_equal(out, y)


def test_rk4_exponential_tableau_value():
    # hand evaluation for f = y, y0 = 1, h = 0.1:
    # k1 = 1, k2 = 1.05, k3 = 1.0525, k4 = 1.10525
    # y1 = 1 + (0.1/6)(k1 + 2 k2 + 2 k3 + k4)
    h = 0.1
    k1 = 1.0
    k2 = 1.0 + 0.5 * h * k1
    k3 = 1.0 + 0.5 * h * k2
    k4 = 1.0 + h * k3
    expected = 1.0 + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    out = rk4_step(lambda t, y: y, 0.0, np.array([1.0]), h)
    assert out[0] == pytest.approx(expected, abs=0)
    assert out[0] == pytest.approx(1.1051708333333332, abs=1e-15)


def test_rk4_linear_field_sixteenfold_error_reduction():
    def endpoint_error(steps):
        _, ys = integrate(lambda t, y: y, np.array([1.0]), TimeGrid(0.0, 1.0, steps))
        return abs(ys[-1, 0] - np.e)

    ratio = endpoint_error(50) / endpoint_error(100)
    assert 12.0 <= ratio <= 20.0


def test_rk4_observed_order_on_smooth_field():
    # nonlinear scalar field with known solution: y' = y^2, y(0) = 0.5,
    # y(t) = 1/(2 - t)
    def err(steps):
        _, ys = integrate(
            lambda t, y: y**2, np.array([0.5]), TimeGrid(0.0, 1.0, steps)
        )
        return abs(ys[-1, 0] - 1.0)

    order = np.log2(err(64) / err(128))
    assert abs(order - 4.0) <= 0.2


def test_rk4_nonfinite_stage_reports_index():
    with pytest.raises(IntegrationError) as info:
        rk4_step(lambda t, y: y * np.nan, 0.0, np.array([1.0]), 0.1)
    assert info.value.stage == 1

    def blows_up_off_node(t, y):
        # finite at the step start, NaN at the half step: stage 2 trips
        return y * (np.nan if t > 0.0 else 1.0)

    with pytest.raises(IntegrationError) as info:
        rk4_step(blows_up_off_node, 0.0, np.array([1.0]), 0.1)
    assert info.value.stage == 2
    assert "stage 2" in str(info.value)


def test_integrate_shapes_and_initial_sample():
    times, ys = integrate(lambda t, y: np.zeros(2), np.array([3.0, -1.0]), TimeGrid(0.5, 1.5, 10))
    assert times.shape == (11,)
    assert ys.shape == (11, 2)
    assert times[0] == 0.5
    np.testing.assert_array_equal(ys[0], [3.0, -1.0])
    # zero field: constant sequence
    assert np.all(ys == ys[0])
