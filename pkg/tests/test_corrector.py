from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chain_graph
from clusterhom.cluster import chemical_distance
from clusterhom.corrector import (
    CorrectorMap, GradientFieldSample, NoLoopError, closed_loop_residual, constant_gradient,
    environment_gradient, induced_mean, line_integral, mollify_gradient, path_integral_V, random_spline_gradient,
    rotational_field, sample_component_points, shoelace_area, sublinearity_scan,
)
from clusterhom.environment import BoxDomain, condition_on_origin


@pytest.fixture(scope="module")
def wide_sample():
    return condition_on_origin(4.0, BoxDomain(2, 10.0), seed=8)


@pytest.fixture(scope="module")
def palm_ensemble():
    return [condition_on_origin(4.0, BoxDomain(2, 6.0), seed=100 + s) for s in range(60)]


def _points_on(graph, n, seed=0):
    return sample_component_points(graph, n, seed=seed)


def test_constant_field_gives_linear_corrector(small_sample):
    _, graph = small_sample
    c = np.array([0.7, -1.3])
    G = constant_gradient(c)
    xs = _points_on(graph, 30)
    for x in xs:
        assert path_integral_V(graph, G, x) == pytest.approx(c @ x, abs=1e-12)
    cmap = CorrectorMap.build(graph, G)
    assert np.allclose(cmap(xs), xs @ c, atol=1e-12)


def test_origin_and_off_cluster_are_zero(small_sample):
    _, graph = small_sample
    G = constant_gradient([1.0, 2.0])
    assert path_integral_V(graph, G, [0.0, 0.0]) == 0.0
    far = np.array([[5.9, 5.9], [-5.9, 5.9], [5.9, -5.9], [-5.9, -5.9], [0.0, 5.95]])
    off = far[~graph.contains(graph.unbounded_proxy, far)]
    off = off[[len(graph.covering_balls(x)) == 0 for x in off]]
    assert len(off) > 0
    for x in off:
        assert path_integral_V(graph, G, x) == 0.0


def test_spline_gradient_is_path_independent():
    G = random_spline_gradient(2, 2.0, h=0.5, seed=3)
    a, b = np.array([-1.7, 0.2]), np.array([1.4, 1.1])
    p1 = np.array([a, [0.0, -1.3], [0.9, -0.2], b])
    p2 = np.array([a, [-0.3, 2.1], [1.9, 1.9], [1.2, 0.4], b])
    i1, i2 = line_integral(G, p1), line_integral(G, p2)
    assert abs(i1 - i2) <= 1e-6
    assert i1 == pytest.approx(float(G.potential(b[None])[0] - G.potential(a[None])[0]), abs=1e-10)


def test_knot_splitting_beats_plain_quadrature():
    G = random_spline_gradient(2, 2.0, h=0.5, seed=4)
    a, b = np.array([-1.9, -0.3]), np.array([1.8, 1.2])
    exact = float(G.potential(b[None])[0] - G.potential(a[None])[0])
    from dataclasses import replace

    plain = line_integral(replace(G, knots=None), np.array([a, b]), max_piece=10.0)
    split = line_integral(G, np.array([a, b]))
    assert abs(split - exact) <= 1e-12
    assert abs(plain - exact) > abs(split - exact)


def test_tree_map_matches_polyline_integrals(small_sample):
    _, graph = small_sample
    G = environment_gradient(graph.config.points, radius=1.0)
    xs = _points_on(graph, 15, seed=2)
    cmap = CorrectorMap.build(graph, G)
    g0 = G.potential(np.zeros((1, 2)))[0]
    want = G.potential(xs) - g0
    assert np.allclose(cmap(xs), want, atol=1e-6)
    assert np.allclose([path_integral_V(graph, G, x) for x in xs], want, atol=1e-6)


def test_constant_loops_vanish(small_sample):
    _, graph = small_sample
    rep = closed_loop_residual(graph, constant_gradient([1.0, -0.5]), n_loops=10, seed=1)
    assert rep.max_abs <= 1e-10 and rep.member


def test_gradient_loops_vanish(small_sample):
    _, graph = small_sample
    G = random_spline_gradient(2, 5.0, h=0.5, seed=5)
    rep = closed_loop_residual(graph, G, n_loops=10, seed=2)
    assert rep.max_abs <= 1e-6 and rep.member


def test_rotational_circulation_is_twice_area(small_sample):
    _, graph = small_sample
    rep = closed_loop_residual(graph, rotational_field(), n_loops=10, seed=3)
    assert np.allclose(rep.circulations, 2 * rep.areas, atol=1e-9)
    assert np.abs(rep.areas).max() > 1e-3
    assert not rep.member


def test_shoelace_unit_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert shoelace_area(sq) == 1.0
    assert shoelace_area(sq[::-1]) == -1.0


def test_loop_sampler_without_component():
    g = chain_graph([[0.0, 0.0]], half_width=5.0)
    with pytest.raises(NoLoopError):
        sample_component_points(g, 3)


def test_induced_mean_of_environment_gradient_is_zero(palm_ensemble):
    rep = induced_mean(palm_ensemble, lambda graph: environment_gradient(graph.config.points), [1.0, 0.0])
    assert rep.n_used >= 50
    assert rep.zero_within(3.0)


def test_induced_mean_of_constant_field(palm_ensemble):
    c = np.array([0.8, 0.3])
    e = np.array([1.0, 0.0])
    rep = induced_mean(palm_ensemble, constant_gradient(c), e)
    assert rep.mean == pytest.approx(c @ e * rep.arrivals.mean(), abs=1e-12)
    assert rep.mean > 0 and not rep.zero_within(3.0)


def test_induced_mean_rejects_empty():
    with pytest.raises(ValueError):
        induced_mean([], constant_gradient([1.0, 0.0]), [1.0, 0.0])


def test_sublinearity_of_compact_gradient(wide_sample):
    _, graph = wide_sample
    G = random_spline_gradient(2, 2.0, h=0.5, seed=6)
    radii = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0]
    rep = sublinearity_scan(graph, G, radii, density=8.0, epsilons=(0.1,))
    assert rep.eventually_nonincreasing()
    sup_v = 2 * np.abs(G.potential(np.stack(np.meshgrid(*[np.linspace(-3, 3, 121)] * 2), -1).reshape(-1, 2))).max()
    # ratios are bounded by sup|V|/r once the support is covered
    assert np.all(rep.ratios[2:] <= sup_v / np.asarray(radii[2:]) + 1e-9)
    rho = rep.rho["k=1,eps=0.1"]
    assert rho[-1] == 0.0  # eps r exceeds the oscillation of V


def test_sublinearity_constant_plateau(wide_sample):
    _, graph = wide_sample
    c = np.array([1.0, 0.0])
    rep = sublinearity_scan(graph, constant_gradient(c), [2.0, 4.0, 8.0], density=8.0)
    assert np.all(rep.ratios <= 1.0 + 1e-12)
    assert np.all(rep.ratios >= 0.8)
    assert np.allclose(rep.ray_ratios, 1.0, atol=1e-12) or len(rep.ray_ratios) == 0


def test_sublinearity_rejects_large_radius(small_sample):
    _, graph = small_sample
    with pytest.raises(ValueError):
        sublinearity_scan(graph, constant_gradient([1.0, 0.0]), [1.0, 7.0])


def test_mollify_keeps_constants_and_linear_fields():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, size=(50, 2))
    c = constant_gradient([0.4, -0.9])
    assert np.allclose(mollify_gradient(c, 0.3)(x), c(x), atol=1e-14)
    A = np.array([[1.0, 0.5], [0.5, -2.0]])
    lin = GradientFieldSample(lambda y: y @ A, np.inf, "gradient", potential=lambda y: 0.5 * np.einsum("ij,jk,ik->i", y, A, y))
    assert np.allclose(mollify_gradient(lin, 0.4)(x), lin(x), atol=1e-12)


def test_mollify_error_is_second_order():
    G = random_spline_gradient(2, 2.0, h=0.5, seed=7)
    x = np.random.default_rng(1).uniform(-1, 1, size=(40, 2))
    errs = [np.abs(mollify_gradient(G, r)(x) - G(x)).max() for r in (0.08, 0.04, 0.02)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates >= 1.8)


def test_mollify_sup_bound():
    G = random_spline_gradient(2, 2.0, h=0.5, seed=8)
    x = np.random.default_rng(2).uniform(-3, 3, size=(400, 2))
    M = mollify_gradient(G, 0.5)
    assert M.bound == G.bound
    assert M.sup_on(x) <= G.bound + 1e-12
    fine = np.random.default_rng(3).uniform(-3.5, 3.5, size=(20_000, 2))
    assert M.sup_on(x) <= G.sup_on(fine) + 1e-2
    with pytest.raises(ValueError):
        mollify_gradient(G, 0.0)


def test_corrector_is_additive(small_sample):
    _, graph = small_sample
    G1 = random_spline_gradient(2, 4.0, h=0.5, seed=9)
    G2 = constant_gradient([0.3, 0.2])
    # same knots, so both sides use the same exact piecewise rule
    S = GradientFieldSample(lambda y: G1(y) + G2(y), G1.bound + G2.bound, "gradient", knots=G1.knots)
    xs = _points_on(graph, 10, seed=4)
    for x in xs:
        v = path_integral_V(graph, S, x)
        assert v == pytest.approx(path_integral_V(graph, G1, x) + path_integral_V(graph, G2, x), abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_corrector_lipschitz_in_chemical_distance(small_sample, seed):
    _, graph = small_sample
    G = random_spline_gradient(2, 4.0, h=0.5, seed=seed % 50)
    x, y = _points_on(graph, 2, seed=seed)
    path = chemical_distance(graph, x, y)
    dv = abs(path_integral_V(graph, G, x) - path_integral_V(graph, G, y))
    assert dv <= G.bound * path.length + 1e-9


def test_unknown_provenance_rejected():
    with pytest.raises(ValueError):
        GradientFieldSample(lambda x: x, 1.0, "made-up")
