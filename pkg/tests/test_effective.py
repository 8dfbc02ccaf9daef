from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterhom.coefficients import DriftField, constant_field, quadratic_spec
from clusterhom.effective import (
    CorrectorProblem, EffectiveHamiltonianTable, box_grid, brute_force_Hbar, double_transform,
    equivalence_check, feynman_kac_table, hopf_lax, legendre_of_rate, legendre_transform, softmax_mean,
    variational_Hbar, variational_table,
)

# a boundary-layer window of the conftest sample (partial coverage of the cluster)
LAYER_CENTER = [2.52682843, -3.978092]


def test_constant_torus_value():
    spec = quadratic_spec()
    for th in ([1.0, 0.0], [0.6, -0.8], [1.5, 0.5]):
        r = variational_Hbar(constant_field(1.0), spec, th, half_width=1.0, h=0.25)
        assert r.value == pytest.approx(0.25 * np.dot(th, th), abs=1e-10)


def test_constant_torus_with_drift():
    b = np.array([0.4, -0.2])
    th = np.array([0.7, 0.3])
    r = variational_Hbar(constant_field(1.0), quadratic_spec(b), th, half_width=1.0, h=0.25)
    assert r.value == pytest.approx(0.25 * th @ th + 0.5 * b @ th, abs=1e-10)


def test_zero_theta_on_torus_sample(torus_sample):
    _, _, fld = torus_sample
    r = variational_Hbar(fld, quadratic_spec(), [0.0, 0.0], h=0.25)
    # central differences break the exact chain rule behind H(0) = 0; only grid-level error remains
    assert abs(r.value) <= 1e-2


@pytest.mark.parametrize("use_layer", [False, True])
def test_optimizer_against_refined_enumeration(small_field, use_layer):
    fld = small_field if use_layer else constant_field(1.0)
    center = LAYER_CENTER if use_layer else None
    spec = quadratic_spec()
    a = 0.15
    prob = CorrectorProblem.build(fld, spec, [1.0, 0.0], 0.5, 0.25, center=center, periodic=False)
    assert prob.n_free == 9
    r = variational_Hbar(fld, spec, [1.0, 0.0], problem=prob, betas=(1, 10, 100, 1e3, 1e4), maxiter=2000, bound=a)
    brute, arg = brute_force_Hbar(prob, np.linspace(-a, a, 5), refine=40)
    assert np.all(np.abs(arg) <= a)
    assert abs(r.value - brute) <= 1e-2
    # the returned value is the hard max of phi at the returned g
    assert r.value == pytest.approx(float(prob.phi(r.g).max()), abs=1e-14)
    assert all(s["sandwich_ok"] for s in r.stages)


def test_coarse_enumeration_is_an_upper_bound(small_field):
    spec = quadratic_spec()
    prob = CorrectorProblem.build(small_field, spec, [0.0, 1.0], 0.5, 0.25, center=LAYER_CENTER, periodic=False)
    coarse, _ = brute_force_Hbar(prob, np.linspace(-0.1, 0.1, 3))
    fine, _ = brute_force_Hbar(prob, np.linspace(-0.1, 0.1, 3), refine=10)
    assert fine <= coarse
    r = variational_Hbar(small_field, spec, [0.0, 1.0], problem=prob, maxiter=1000, bound=0.1)
    assert r.value <= coarse + 1e-12


def test_brute_force_rejects_large_problems(small_field):
    prob = CorrectorProblem.build(small_field, quadratic_spec(), [1.0, 0.0], 1.0, 0.25, center=LAYER_CENTER,
                                  periodic=False)
    with pytest.raises(ValueError):
        brute_force_Hbar(prob, np.linspace(-1, 1, 9))


@pytest.mark.parametrize("periodic", [False, True])
def test_objective_gradient_matches_finite_differences(small_field, torus_sample, periodic):
    fld = torus_sample[2] if periodic else small_field
    spec = quadratic_spec([0.3, -0.5])
    prob = CorrectorProblem.build(fld, spec, [0.8, 0.4], 1.0, 0.125, center=LAYER_CENTER, periodic=periodic)
    rng = np.random.default_rng(0)
    eps = 1e-6
    worst = 0.0
    for _ in range(10):
        g = 0.1 * rng.normal(size=prob.n_free)
        beta = float(rng.choice([1.0, 10.0]))

        def obj(x):
            return softmax_mean(prob.phi(x), beta)[0]

        _, w = softmax_mean(prob.phi(g), beta)
        _, grad = prob.phi_and_vjp(g, w)
        for _ in range(10):
            u = rng.normal(size=prob.n_free)
            u /= np.linalg.norm(u)
            fd = (obj(g + eps * u) - obj(g - eps * u)) / (2 * eps)
            an = grad @ u
            worst = max(worst, abs(fd - an) / max(abs(an), 1e-3))
    assert worst <= 1e-5


def test_phi_and_vjp_values_agree_with_phi(small_field):
    prob = CorrectorProblem.build(small_field, quadratic_spec(), [1.0, 0.0], 1.0, 0.25, center=LAYER_CENTER,
                                  periodic=False)
    g = np.random.default_rng(1).normal(size=prob.n_free)
    vals, _ = prob.phi_and_vjp(g, np.ones(len(prob.evaluate)) / len(prob.evaluate))
    assert np.array_equal(vals, prob.phi(g))


def test_discrete_gradient_is_curl_free(torus_sample):
    prob = CorrectorProblem.build(torus_sample[2], quadratic_spec(), [1.0, 0.0], 2.0, 0.25, periodic=True)
    g = np.random.default_rng(2).normal(size=prob.n_free)
    G = prob.gradient_field(g)
    curl = prob.D[0] @ G[:, 1] - prob.D[1] @ G[:, 0]
    assert np.max(np.abs(curl)) <= 1e-10 * max(1.0, np.abs(G).max())


def test_softmax_sandwich():
    phi = np.random.default_rng(3).normal(size=200)
    for beta in (1.0, 10.0, 100.0):
        val, w = softmax_mean(phi, beta)
        assert val <= phi.max() + 1e-12
        assert phi.max() <= val + np.log(len(phi)) / beta + 1e-12
        assert w.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------- Legendre


def _table(fn, half_width=3.0, n=61):
    return EffectiveHamiltonianTable.from_function(fn, box_grid(2, half_width, n))


def test_quadratic_is_self_dual():
    tab = _table(lambda t: 0.5 * t @ t)
    v = box_grid(2, 1.0, 21)
    rt = legendre_transform(tab, v)
    assert np.allclose(rt.values, 0.5 * (v ** 2).sum(1), atol=1e-12)
    assert not rt.nonconvex


def test_linear_shift_rule():
    b = np.array([0.5, -0.3])
    tab = _table(lambda t: 0.5 * t @ t + b @ t)
    v = box_grid(2, 1.0, 21)
    rt = legendre_transform(tab, v)
    assert np.allclose(rt.values, 0.5 * ((v - b) ** 2).sum(1), atol=1e-12)


def test_double_transform_of_convex_table_is_identity():
    tab = _table(lambda t: 0.25 * t @ t + 0.1 * np.abs(t).sum(), half_width=2.0, n=9)
    assert np.allclose(double_transform(tab), tab.values, atol=1e-9)
    assert tab.is_convex()


def test_double_transform_is_the_hull():
    def w(t):
        return (t @ t - 1.0) ** 2

    def hull(t):
        r = np.linalg.norm(t)
        return 0.0 if r <= 1 else w(t)

    n, hw = 13, 1.5
    tab = _table(w, half_width=hw, n=n)
    hh = double_transform(tab)
    want = np.array([hull(t) for t in tab.thetas])
    # modulus of the hull over one grid step
    step = 2 * hw / (n - 1)
    fine = box_grid(2, hw, 4 * n)
    modulus = max(abs(hull(t) - hull(t + step * e)) for t in fine for e in np.eye(2)
                  if np.all(np.abs(t + step * e) <= hw))
    assert np.all(hh <= tab.values + 1e-9)
    assert np.max(np.abs(hh - want)) <= 2 * modulus
    assert not tab.is_convex()
    assert legendre_transform(tab).nonconvex


def test_hull_matches_linear_programs():
    from clusterhom.effective import _double_transform_lp

    rng = np.random.default_rng(5)
    th = box_grid(2, 1.5, 9)
    for _ in range(5):
        val = rng.normal(size=len(th)) + (th ** 2).sum(1)
        tab = EffectiveHamiltonianTable(th, val, np.zeros(len(th)), "x")
        assert np.allclose(double_transform(tab), _double_transform_lp(th, val), atol=1e-10)
    flat = EffectiveHamiltonianTable(th, th @ [1.0, 2.0], np.zeros(len(th)), "x")
    assert np.allclose(double_transform(flat), flat.values, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_transform_reverses_order(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    A = A @ A.T + 0.1 * np.eye(2)
    c = rng.normal(size=2)
    s, k = rng.uniform(0, 1), rng.uniform(0, 0.5)
    t1 = _table(lambda t: 0.5 * t @ A @ t + c @ t, half_width=2.0, n=21)
    t2 = _table(lambda t: 0.5 * t @ A @ t + c @ t + 0.5 * s * t @ t + k, half_width=2.0, n=21)
    v = box_grid(2, 1.5, 11)
    assert np.all(legendre_transform(t1, v).values >= legendre_transform(t2, v).values - 1e-12)


def test_legendre_of_rate_recovers_convex_table():
    tab = _table(lambda t: 0.5 * t @ t, half_width=2.0, n=41)
    rt = legendre_transform(tab, box_grid(2, 2.0, 41))
    inner = tab.thetas[np.all(np.abs(tab.thetas) <= 1.0, axis=1)]
    assert np.allclose(legendre_of_rate(rt, inner), 0.5 * (inner ** 2).sum(1), atol=1e-12)


# ---------------------------------------------------------------- Hopf-Lax


def _quadratic_rate():
    tab = _table(lambda t: 0.5 * t @ t, half_width=3.0, n=61)
    return legendre_transform(tab, box_grid(2, 2.0, 81))


def test_hopf_lax_linear_data():
    rate = _quadratic_rate()
    th0 = np.array([0.5, -0.3])

    def f(x):
        return np.atleast_2d(x) @ th0

    t = 0.7
    xs = np.array([[0.0, 0.0], [1.0, 2.0], [-0.4, 0.9]])
    vals = np.array([hopf_lax(f, rate, t, x).value for x in xs])
    assert np.allclose(vals, xs @ th0 + t * 0.5 * th0 @ th0, atol=1e-12)
    mid = hopf_lax(f, rate, t, 0.5 * (xs[1] + xs[2])).value
    assert mid == pytest.approx(0.5 * (vals[1] + vals[2]), abs=1e-12)


def test_hopf_lax_small_time():
    rate = _quadratic_rate()

    def f(x):
        x = np.atleast_2d(x)
        return np.sin(x[:, 0]) + 0.5 * x[:, 1]

    x = np.array([0.3, -0.2])
    hl = hopf_lax(f, rate, 1e-3, x)
    assert hl.value >= f(x)[0] - 1e-12  # v = 0 costs nothing
    assert abs(hl.value - f(x)[0]) <= 1e-2


def test_hopf_lax_quadratic_data():
    rate = _quadratic_rate()

    def f(x):
        return -(np.atleast_2d(x) ** 2).sum(1)

    for x, t in (([0.6, -0.3], 0.5), ([0.2, 0.4], 1.5), ([-0.5, 0.1], 0.25)):
        x = np.array(x)
        hl = hopf_lax(f, rate, t, x)
        assert hl.value == pytest.approx(-(x @ x) / (1 + 2 * t), abs=2e-3)
        assert not hl.boundary


def test_hopf_lax_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        hopf_lax(lambda x: x[:, 0], _quadratic_rate(), 0.0, [0.0, 0.0])


# ---------------------------------------------------------------- equivalence


def test_equivalence_constant_environment():
    b = np.array([0.5, 0.0])
    thetas = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-0.7, 0.7]])
    fld = constant_field(1.0)
    fk = feynman_kac_table(fld, DriftField.constant(b), thetas, 10.0, 2000, dt=0.02, seed=4)
    var = variational_table(fld, quadratic_spec(b), thetas, half_width=1.0, h=0.25)
    exact = 0.25 * (thetas ** 2).sum(1) + 0.5 * thetas @ b
    assert np.allclose(var.values, exact, atol=1e-10)
    rows = equivalence_check(fk, var)
    assert all(r.holds for r in rows)
    assert np.all(np.abs(fk.values - exact) <= 3 * fk.errors + 2 / 10.0)
    assert rows[0].feynman_kac == 0.0 and rows[0].gap == pytest.approx(0.0, abs=1e-10)


def test_equivalence_flags_and_mismatch():
    th = np.array([[1.0, 0.0]])
    fk = EffectiveHamiltonianTable(th, [0.5], [0.01], "feynman_kac")
    var = EffectiveHamiltonianTable(th, [0.8], [0.0], "variational")
    (row,) = equivalence_check(fk, var)
    assert row.holds and row.finite_size_flag
    (row,) = equivalence_check(var, fk)
    assert not row.holds
    other = EffectiveHamiltonianTable([[0.0, 1.0]], [0.5], [0.0], "variational")
    with pytest.raises(ValueError):
        equivalence_check(fk, other)


def test_table_rejects_nonfinite():
    with pytest.raises(ValueError):
        EffectiveHamiltonianTable([[0.0, 0.0]], [np.nan], [0.0], "x")
