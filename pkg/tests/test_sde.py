import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsde_lab.core import ProblemSpec, build_grid, constant_control, sample_brownian
from fbsde_lab.errors import ConfigurationError, SimulationBlowupError
from fbsde_lab.sde import dump_paths_csv, restart_forward, simulate_flow, simulate_forward


def linear_spec(a=0.0, s=1.0, c=0.0):
    return ProblemSpec(
        b=lambda t, x, u, w: a * x + u,
        sigma=lambda t, x, u, w: s + c * x,
        f=lambda t, x, y, z, u, w: np.zeros(x.shape[0]),
        h=lambda x, w: x[:, 0],
    )


def test_pure_brownian_state_equals_driver(grid, driver):
    st_ = simulate_forward(linear_spec(), constant_control(0.0), 0.0, grid, driver)
    np.testing.assert_array_equal(st_.X[:, :, 0], driver.W)


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(1, 60))
def test_deterministic_linear_matches_euler_recursion(a, x0, N):
    g = build_grid(0.0, 1.0, N)
    d = sample_brownian(g, 4, 0)
    st_ = simulate_forward(linear_spec(a=a, s=0.0), constant_control(0.0), x0, g, d)
    np.testing.assert_allclose(st_.X[:, -1, 0], x0 * (1 + a * g.dt) ** N, rtol=1e-9, atol=1e-12)


def test_restart_leaves_earlier_nodes_empty(grid, driver):
    st_ = restart_forward(linear_spec(), constant_control(0.0), 10, 1.0, grid, driver, end=30)
    assert np.all(np.isnan(st_.X[:, :10]))
    assert np.all(np.isnan(st_.X[:, 31:]))
    np.testing.assert_allclose(st_.X[:, 30, 0], 1.0 + driver.W[:, 30] - driver.W[:, 10])


def test_flow_derivative_matches_finite_difference(grid, driver):
    spec = ProblemSpec(
        b=lambda t, x, u, w: np.sin(x),
        sigma=lambda t, x, u, w: 0.3 * np.cos(x),
        f=lambda *a: None, h=lambda *a: None,
    )
    law = constant_control(0.0)
    base = simulate_forward(spec, law, 0.4, grid, driver)
    bump = simulate_forward(spec, law, 0.4 + 1e-6, grid, driver)
    flow = simulate_flow(spec, law, base, driver)
    fd = (bump.X[:, -1, 0] - base.X[:, -1, 0]) / 1e-6
    np.testing.assert_allclose(flow.dX[:, -1, 0, 0], fd, rtol=1e-4, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_is_reported(grid):
    spec = ProblemSpec(b=lambda t, x, u, w: x ** 3 * 1e3, sigma=lambda t, x, u, w: 0 * x,
                       f=None, h=None)
    d = sample_brownian(grid, 4, 0)
    with pytest.raises(SimulationBlowupError) as info:
        simulate_forward(spec, constant_control(0.0), 10.0, grid, d)
    assert info.value.step >= 0


def test_grid_mismatch(driver):
    with pytest.raises(ConfigurationError):
        simulate_forward(linear_spec(), constant_control(0.0), 0.0, build_grid(0, 1, 10), driver)


def test_bad_initial_state(grid, driver):
    with pytest.raises(ConfigurationError):
        simulate_forward(linear_spec(), constant_control(0.0), [1.0, 2.0], grid, driver)


def test_frozen_law_replays_controls(grid, driver):
    from fbsde_lab.core import linear_feedback
    spec = linear_spec(a=0.2, s=0.5)
    st_ = simulate_forward(spec, linear_feedback(-1.0), 1.0, grid, driver)
    again = simulate_forward(spec, st_.frozen_law(), 1.0, grid, driver)
    np.testing.assert_allclose(again.X, st_.X)


def test_dump_csv(tmp_path, grid, driver):
    st_ = simulate_forward(linear_spec(), constant_control(0.0), 0.0, grid, driver)
    path = tmp_path / "paths.csv"
    dump_paths_csv(st_, path, max_paths=2)
    lines = path.read_text().splitlines()
    assert lines[0] == "path,node,x0"
    assert len(lines) == 1 + 2 * (grid.N + 1)
