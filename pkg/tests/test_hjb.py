from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterhom.coefficients import constant_field, quadratic_spec
from clusterhom.diffusion import Control
from clusterhom.hjb import (
    CFLError, Grid, MaskMismatchError, _node_data, a_priori_bound, comparison_check, control_objective,
    convergence_study, explicit_step, max_stable_dt, solve_hjb_control_mc, solve_hjb_fd,
)


def _stencil_oracle(u, grid, fld, b, dt, p_bound):
    """Independent node-by-node evaluation of one explicit step (quadratic H)."""
    n = grid.n_side
    U = u.reshape(n, n)
    X = grid.coordinates().reshape(n, n, 2)
    mask = grid.mask.reshape(n, n)
    out = U.copy()
    h, eps = grid.h, grid.epsilon
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            if not mask[i, j]:
                continue
            y = X[i, j] / eps
            lam = float(fld.a(y[None])[0])
            v = 0.5 * fld.div_a(y[None])[0]
            c = U[i, j]
            nb = [(U[i + 1, j], U[i - 1, j]), (U[i, j + 1], U[i, j - 1])]
            total = 0.0
            p = []
            for k, (up, um) in enumerate(nb):
                lap = up - 2 * c + um
                total += 0.5 * eps * lam * lap / h ** 2
                total += (v[k] * (up - c) if v[k] > 0 else v[k] * (c - um)) / h
                total += lam * (p_bound + abs(b[k])) * lap / (2 * h)
                p.append((up - um) / (2 * h))
            p = np.array(p)
            total += lam * (0.5 * p @ p + b @ p)
            out[i, j] = c + dt * total
    return out.ravel()


@pytest.mark.parametrize("eps", [1.0, 0.5])
def test_one_step_matches_stencil_oracle(small_field, backend, eps):
    b = np.array([0.3, -0.8])
    spec = quadratic_spec(b)
    # a 5x5 grid straddling the boundary layer of the sample
    grid = Grid.build(small_field, eps, 0.5, 0.25, d=2)
    grid.mask[:] = True  # evolve every inner node; exterior nodes then test the zero-coefficient path
    rng = np.random.default_rng(0)
    u = rng.normal(size=grid.n_nodes)
    pb = 3.0
    nd = _node_data(grid, small_field, spec, pb)
    dt = 0.5 * max_stable_dt(grid, nd)
    got = explicit_step(u, grid, small_field, spec, dt, pb, nd)
    want = _stencil_oracle(u, grid, small_field, b, dt, pb)
    assert np.max(np.abs(got - want)) <= 1e-13 * max(1.0, np.abs(u).max())


def test_constants_are_stationary(small_field):
    grid = Grid.build(small_field, 0.25, 1.0, 1 / 16)
    sol = solve_hjb_fd(small_field, quadratic_spec([0.5, 0.5]), lambda x: np.full(len(x), 2.5), 0.25, 0.5, grid)
    assert np.all(sol.final.values == 2.5)


def test_exterior_nodes_never_change(small_field):
    grid = Grid.build(small_field, 0.25, 1.0, 1 / 16)
    f = lambda x: np.sin(x[:, 0]) + x[:, 1] ** 2
    sol = solve_hjb_fd(small_field, quadratic_spec(), f, 0.25, 0.5, grid)
    fixed = np.ones(grid.n_nodes, bool)
    fixed[grid.interior()] = False
    assert np.array_equal(sol.final.values[fixed], f(grid.coordinates())[fixed])


def test_a_priori_bound(small_field):
    grid = Grid.build(small_field, 0.25, 1.0, 1 / 16)
    spec = quadratic_spec([1.0, 0.0])
    f = lambda x: np.cos(3 * x[:, 0])
    sol = solve_hjb_fd(small_field, spec, f, 0.25, 0.5, grid)
    assert np.abs(sol.final.values).max() <= a_priori_bound(small_field, spec, f, grid, 0.5) + 1e-12


def test_cfl_violation_names_inequality():
    fld = constant_field(1.0)
    grid = Grid(2, 1.0, 1 / 16, 0.5, dt=1.0)
    grid.mask = np.ones(grid.n_nodes, bool)
    with pytest.raises(CFLError, match="<= 1 violated"):
        solve_hjb_fd(fld, quadratic_spec(), lambda x: x[:, 0], 0.5, 0.1, grid)


def test_mask_mismatch_detected(small_sample, small_field):
    _, g = small_sample
    other = constant_field(1.0)
    with pytest.raises(MaskMismatchError):
        Grid.build(other, 0.5, 1.0, 0.125, d=2, graph=g)
    Grid.build(small_field, 0.5, 1.0, 0.125, graph=g)


def test_scheme_is_monotone(small_field):
    grid = Grid.build(small_field, 0.5, 1.0, 1 / 8)
    spec = quadratic_spec([0.4, 0.1])
    pb = 6.0
    nd = _node_data(grid, small_field, spec, pb)
    dt = max_stable_dt(grid, nd)
    rng = np.random.default_rng(1)
    for _ in range(20):
        u = 0.7 * rng.uniform(-1, 1, grid.n_nodes)  # |D0 u| <= 1.4 / (2h) = 5.6 < pb
        bump = u.copy()
        k = rng.integers(grid.n_nodes)
        bump[k] += rng.uniform(0, 0.05)
        assert np.all(explicit_step(bump, grid, small_field, spec, dt, pb, nd)
                      >= explicit_step(u, grid, small_field, spec, dt, pb, nd) - 1e-14)


def test_scaling_identity(small_field):
    eps, L, h, T = 0.5, 1.0, 0.125, 0.25
    f = lambda x: np.sin(2 * x[:, 0]) + 0.5 * x[:, 1]
    g1 = Grid.build(small_field, eps, L, h)
    g2 = Grid.build(small_field, 1.0, L / eps, h / eps)
    u = solve_hjb_fd(small_field, quadratic_spec(), f, eps, T, g1, p_bound=5.0)
    v = solve_hjb_fd(small_field, quadratic_spec(), lambda y: f(eps * y) / eps, 1.0, T / eps, g2, p_bound=5.0)
    assert u.n_steps == v.n_steps
    assert np.allclose(u.final.values, eps * v.final.values, rtol=0, atol=1e-12)


def test_additive_invariance_and_order(small_field):
    grid = Grid.build(small_field, 0.5, 1.0, 1 / 8)
    spec = quadratic_spec([0.2, 0.0])
    f1 = lambda x: np.sin(x[:, 0]) * x[:, 1]
    rep = comparison_check(small_field, spec, f1, lambda x: f1(x) + 0.75, 0.5, 0.5, grid)
    assert rep.sup_distance == pytest.approx(0.75, abs=1e-12)
    assert rep.max_difference <= rep.data_max_difference + 1e-12
    rep = comparison_check(small_field, spec, f1, lambda x: f1(x) + 0.1 * (1 + np.cos(x[:, 0])), 0.5, 0.5, grid)
    assert rep.max_difference <= 1e-10  # u1 <= u2 everywhere


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_contraction_on_random_pairs(seed):
    fld = constant_field(1.0)
    grid = Grid(2, 1.0, 1 / 8, 0.5)
    grid.mask = np.ones(grid.n_nodes, bool)
    rng = np.random.default_rng(seed)
    c1, c2 = rng.normal(size=(2, 3))
    f1 = lambda x: c1[0] * x[:, 0] + c1[1] * np.sin(x[:, 1]) + c1[2]
    f2 = lambda x: c2[0] * x[:, 0] + c2[1] * np.sin(x[:, 1]) + c2[2]
    rep = comparison_check(fld, quadratic_spec(), f1, f2, 0.5, 0.25, grid)
    assert rep.contraction_ok and rep.comparison_ok


def test_zero_control_is_definition():
    fld = constant_field(1.0)
    spec = quadratic_spec()
    f = lambda x: x[:, 0] ** 2
    est = solve_hjb_control_mc(fld, spec, f, 0.5, 1.0, [0.0, 0.0], [Control.zero()], 500, 0.05, seed=2)
    J, se = control_objective(fld, spec, f, 0.5, 1.0, np.zeros(2), Control.zero(), 500, 0.05, seed=2)
    assert est.value == J and est.se == se


def test_best_constant_control_recovers_linear_solution():
    theta = np.array([1.0, 0.0])
    fld = constant_field(1.0)
    spec = quadratic_spec()
    f = lambda x: x @ theta
    ctl = [Control.constant(c * theta) for c in (0.0, 0.5, 1.0, 1.5)]
    est = solve_hjb_control_mc(fld, spec, f, 0.25, 1.0, [0.0, 0.0], ctl, 2000, 0.02, seed=1)
    assert est.best == 2
    assert abs(est.value - 0.25) <= 3 * est.se


def test_control_mc_below_fd(small_sample, small_field):
    _, g = small_sample
    eps, T = 0.5, 0.5
    theta = np.array([1.0, 0.0])
    f = lambda x: x @ theta
    spec = quadratic_spec()
    grid = Grid.build(small_field, eps, 2.0, 1 / 16)
    fd = solve_hjb_fd(small_field, spec, f, eps, T, grid).value_at([0.0, 0.0])
    est = solve_hjb_control_mc(small_field, spec, f, eps, T, [0.0, 0.0],
                               [Control.zero(), Control.constant(theta)], 500, 0.02, seed=0, graph=g)
    assert est.value <= fd + 3 * est.se


def test_control_mc_rejects_points_off_cluster(small_sample, small_field):
    _, g = small_sample
    far = g.config.points.max(0) + 2.0
    with pytest.raises(ValueError):
        solve_hjb_control_mc(small_field, quadratic_spec(), lambda x: x[:, 0], 1.0, 1.0, far,
                             [Control.zero()], 10, 0.1, graph=g)


def test_convergence_constant_case_decreasing():
    theta = np.array([1.0, 0.0])
    tab = convergence_study(constant_field(1.0), quadratic_spec(), lambda x: x @ theta, [0.5, 0.25, 0.125],
                            1.0, 1.5, lambda e: e / 8, lambda t, X: X @ theta + 0.25 * t)
    # sup |u_hom| over the measured set (|x| <= 0.75, t <= 1) is 1
    assert tab.decreasing and tab.errors[-1] <= 0.05
