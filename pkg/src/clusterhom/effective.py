"""Effective Hamiltonian: entropy-relaxed variational estimate, Legendre transform, Hopf-Lax.

Variational estimate. On a micro-grid of spacing ``h`` the corrector is a grid function g
with G = D g by central differences. Two geometries are supported: a torus (periodic
differences, every node free), which is the default for periodic and constant fields, and
a compact window where g vanishes on ``margin`` layers at the edge and is zero-padded
beyond. The compact window is biased low: letting g grow linearly across the window
turns the min-max into a Dirichlet eigenvalue problem. At every in-cluster free node

    phi_n(g) = 1/2 sum_k D_k(lambda (D_k g + theta_k))_n + H(x_n, D g + theta)

and H-bar(theta) is approximated by min_g max_n phi_n. The max is relaxed to the
mean-normalised soft-max (1/beta) log mean exp(beta phi), which sits between
max - log(N)/beta and max, and beta is annealed over a schedule.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .coefficients import CoefficientField, DriftField, HamiltonianSpec


class OptimizerDivergence(RuntimeError):
    def __init__(self, message: str, last_g: np.ndarray):
        super().__init__(message)
        self.last_g = last_g


# --------------------------------------------------------------------------
# discrete corrector problem
# --------------------------------------------------------------------------

def _central_diff(n: int, d: int, k: int, h: float, periodic: bool = False) -> sp.csr_matrix:
    """Central difference along axis k on an n^d grid, zero outside the window unless periodic."""
    off = sp.diags([np.ones(n - 1), -np.ones(n - 1)], [1, -1], shape=(n, n), format="lil")
    if periodic:
        off[n - 1, 0] = 1.0
        off[0, n - 1] = -1.0
    off = off.tocsr() / (2.0 * h)
    eye = sp.identity(n, format="csr")
    mats = [off if j == k else eye for j in range(d)]
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out.tocsr()


@dataclass
class CorrectorProblem:
    """Discretised min-max problem for one theta on a fixed window."""

    h: float
    n_side: int
    d: int
    center: np.ndarray
    theta: np.ndarray
    lam: np.ndarray  # (N,) lambda at every window node
    b: np.ndarray  # (N, d)
    free: np.ndarray  # flat indices where g may be nonzero
    evaluate: np.ndarray  # flat indices where phi is evaluated (free and in cluster)
    D: list  # central differences (N x N)
    M: list  # D_k restricted to free columns
    spec: HamiltonianSpec
    coords: np.ndarray | None = None
    periodic: bool = False

    @classmethod
    def build(cls, fld: CoefficientField, spec: HamiltonianSpec, theta, half_width: float, h: float,
              center=None, margin: int = 1, support_ratio: float = 1.0, d: int | None = None,
              periodic: bool | None = None) -> "CorrectorProblem":
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        d = d or len(theta)
        if periodic is None:
            periodic = fld.period is not None or fld.is_constant
        if periodic:
            return cls._build_torus(fld, spec, theta, half_width, h, center, d)
        n_half = half_width / h
        if abs(n_half - round(n_half)) > 1e-9:
            raise ValueError("half_width must be a multiple of h")
        n = 2 * int(round(n_half)) + 1
        if not 0 < support_ratio <= 1:
            raise ValueError("support_ratio must lie in (0, 1]")
        c = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
        ax = (np.arange(n) - (n - 1) // 2) * h
        X = np.stack([g.ravel() for g in np.meshgrid(*[ax] * d, indexing="ij")], axis=1) + c
        lam = fld.a(X)
        b = spec.b(X)
        idx = np.indices((n,) * d).reshape(d, -1).T
        # free region: central support_ratio fraction, at least ``margin`` layers from the edge
        lo = max(margin, int(round((1 - support_ratio) * (n - 1) / 2)))
        free_mask = np.all((idx >= lo) & (idx <= n - 1 - lo), axis=1)
        free = np.flatnonzero(free_mask)
        evaluate = np.flatnonzero(free_mask & (lam > 0))
        if len(evaluate) == 0:
            raise ValueError("no in-cluster node inside the corrector support")
        D = [_central_diff(n, d, k, h) for k in range(d)]
        M = [Dk[:, free].tocsr() for Dk in D]
        return cls(h, n, d, c, theta, lam, b, free, evaluate, D, M, spec, X, False)

    @classmethod
    def _build_torus(cls, fld, spec, theta, half_width, h, center, d) -> "CorrectorProblem":
        if fld.period is not None:
            half_width = 0.5 * fld.period
            c = np.asarray(fld.period_lo, dtype=np.float64) + half_width
        else:
            c = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
        n_f = 2 * half_width / h
        if abs(n_f - round(n_f)) > 1e-9:
            raise ValueError("torus side must be a multiple of h")
        n = int(round(n_f))
        ax = np.arange(n) * h - half_width
        X = np.stack([g.ravel() for g in np.meshgrid(*[ax] * d, indexing="ij")], axis=1) + c
        lam = fld.a(X)
        b = spec.b(X)
        free = np.arange(n ** d)
        evaluate = np.flatnonzero(lam > 0)
        if len(evaluate) == 0:
            raise ValueError("no in-cluster node on the torus grid")
        D = [_central_diff(n, d, k, h, periodic=True) for k in range(d)]
        return cls(h, n, d, c, theta, lam, b, free, evaluate, D, D, spec, X, True)

    @property
    def n_free(self) -> int:
        return len(self.free)

    def coordinates(self) -> np.ndarray:
        return self.coords

    def full(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_side ** self.d)
        out[self.free] = g
        return out

    def gradient_field(self, g: np.ndarray) -> np.ndarray:
        """G = D g at every window node, shape (N, d)."""
        return np.stack([Mk @ g for Mk in self.M], axis=1)

    def phi(self, g: np.ndarray) -> np.ndarray:
        G = self.gradient_field(g)
        P = G + self.theta
        div = np.zeros(len(self.lam))
        for k, Dk in enumerate(self.D):
            div += Dk @ (self.lam * P[:, k])
        e = self.evaluate
        return 0.5 * div[e] + self.spec.h(self.lam[e], self.b[e], P[e])

    def phi_and_vjp(self, g: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """phi at the evaluation nodes and d(w . phi)/dg."""
        G = self.gradient_field(g)
        P = G + self.theta
        e = self.evaluate
        div = np.zeros(len(self.lam))
        for k, Dk in enumerate(self.D):
            div += Dk @ (self.lam * P[:, k])
        Hp = self.spec.dh_dp(self.lam[e], self.b[e], P[e])
        vals = 0.5 * div[e] + self.spec.h(self.lam[e], self.b[e], P[e])
        W = np.zeros(len(self.lam))
        W[e] = w
        grad = np.zeros(self.n_free)
        for k, (Dk, Mk) in enumerate(zip(self.D, self.M)):
            t = 0.5 * self.lam * (Dk.T @ W)
            t[e] += w * Hp[:, k]
            grad += Mk.T @ t
        return vals, grad


def softmax_mean(phi: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """(1/beta) log mean exp(beta phi) and its weights (summing to one)."""
    z = beta * phi
    mx = float(z.max())
    e = np.exp(z - mx)
    s = e.sum()
    return (mx + math.log(s / len(phi))) / beta, e / s


@dataclass
class VariationalResult:
    theta: np.ndarray
    value: float  # hard max at the returned g
    g: np.ndarray
    stages: list  # per beta: dict(beta, softmax, hardmax, iterations, sandwich_ok)
    problem: CorrectorProblem
    converged: bool
    message: str

    @property
    def n_nodes(self) -> int:
        return len(self.problem.evaluate)


def variational_Hbar(fld: CoefficientField, spec: HamiltonianSpec, theta, half_width: float = 4.0,
                     h: float = 0.0625, betas: Sequence[float] = (1.0, 10.0, 100.0), maxiter: int = 500,
                     center=None, margin: int = 1, support_ratio: float = 1.0, g0=None,
                     problem: CorrectorProblem | None = None, periodic: bool | None = None,
                     bound: float | None = None) -> VariationalResult:
    """min over g of the soft-max of phi, annealed in beta; returns the hard max at the final g.

    ``bound`` restricts every g value to [-bound, bound]. The compact window needs it for a
    finite minimum, since central differences leave odd-even modes that only the box stops.
    """
    prob = problem or CorrectorProblem.build(fld, spec, theta, half_width, h, center, margin, support_ratio,
                                             periodic=periodic)
    g = np.zeros(prob.n_free) if g0 is None else np.asarray(g0, dtype=np.float64).copy()
    stages = []
    converged = True
    message = ""
    logn = math.log(len(prob.evaluate))
    for beta in betas:
        def fun(x, beta=beta):
            ph = prob.phi(x)
            val, w = softmax_mean(ph, beta)
            _, grad = prob.phi_and_vjp(x, w)
            return val, grad

        box = None if bound is None else [(-bound, bound)] * prob.n_free
        res = minimize(fun, g, jac=True, method="L-BFGS-B", bounds=box, options={"maxiter": maxiter, "maxcor": 20})
        if not np.all(np.isfinite(res.x)):
            raise OptimizerDivergence(f"non-finite iterate at beta={beta}", g)
        g = res.x
        ph = prob.phi(g)
        soft, _ = softmax_mean(ph, beta)
        hard = float(ph.max())
        ok = soft <= hard + 1e-12 and hard <= soft + logn / beta + 1e-12
        if not ok:
            raise AssertionError(f"soft-max sandwich violated at beta={beta}")
        stages.append({"beta": float(beta), "softmax": float(soft), "hardmax": hard,
                       "iterations": int(res.nit), "sandwich_ok": bool(ok)})
        if not res.success and res.status != 1:
            converged = False
            message = str(res.message)
    return VariationalResult(prob.theta, float(prob.phi(g).max()), g, stages, prob, converged, message)


def _enumerate(problem: CorrectorProblem, grids: np.ndarray, chunk: int) -> tuple[float, np.ndarray]:
    """min over the product grid (one row of candidate values per free node) of max phi."""
    m, k = grids.shape
    total = k ** m
    if total > 50_000_000:
        raise ValueError("enumeration too large")
    best = np.inf
    arg = None
    e = problem.evaluate
    lam_e = problem.lam[e][:, None]
    b_e = problem.b[e][:, None, :]
    rows = np.arange(m)[:, None]
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = (idx[:, None] // (k ** np.arange(m))[None, :]) % k
        Gs = grids[rows, digits.T]  # (m, c)
        P = [Mk @ Gs + problem.theta[j] for j, Mk in enumerate(problem.M)]  # each (N, c)
        div = sum(Dk @ (problem.lam[:, None] * Pk) for Dk, Pk in zip(problem.D, P))
        Pe = np.stack([Pk[e] for Pk in P], axis=-1)  # (E, c, d)
        phi = 0.5 * div[e] + problem.spec.h(lam_e, b_e, Pe)
        mx = phi.max(axis=0)
        j = int(np.argmin(mx))
        if mx[j] < best:
            best, arg = float(mx[j]), Gs[:, j].copy()
    return best, arg


def brute_force_Hbar(problem: CorrectorProblem, values: np.ndarray, refine: int = 0,
                     chunk: int = 100_000) -> tuple[float, np.ndarray]:
    """min over g in values^free of max phi, by enumeration (tiny problems only).

    ``refine`` further levels enumerate the 3^free neighbourhood of the incumbent with
    the step halved each time (clipped to the range of ``values``); the objective is a
    max of convex functions of g, so this derivative-free zoom approaches the box minimum.
    """
    values = np.asarray(values, dtype=np.float64)
    m = problem.n_free
    best, arg = _enumerate(problem, np.tile(values, (m, 1)), chunk)
    lo, hi = values.min(), values.max()
    step = (hi - lo) / max(len(values) - 1, 1)
    for _ in range(refine):
        grids = np.clip(arg[:, None] + step * np.array([-1.0, 0.0, 1.0])[None, :], lo, hi)
        val, cand = _enumerate(problem, grids, chunk)
        if val < best:
            best, arg = val, cand
        else:
            step *= 0.5
    return best, arg


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

def theta_grid(d: int = 2, directions: int = 8, radii: Sequence[float] = (0.5, 1.0, 1.5),
               include_zero: bool = True) -> np.ndarray:
    """Directions evenly spaced on the circle (d = 2) or +-e_k (other d), times radii."""
    if d == 2:
        ang = 2 * np.pi * np.arange(directions) / directions
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        dirs = np.concatenate([np.eye(d), -np.eye(d)])
    rows = [np.zeros(d)] if include_zero else []
    for r in radii:
        rows.extend(r * dirs)
    return np.array(rows)


@dataclass
class EffectiveHamiltonianTable:
    thetas: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    method: str
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=np.float64))
        self.values = np.asarray(self.values, dtype=np.float64)
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("table values must be finite")

    def convexity_defect(self) -> float:
        """max over the table of H - H** (zero for a convex table)."""
        return float(np.max(self.values - double_transform(self)))

    def is_convex(self, tol: float = 1e-9) -> bool:
        return self.convexity_defect() <= tol

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        d = self.thetas.shape[1]
        wr.writerow([f"theta{k}" for k in range(d)] + ["value", "error", "method"])
        for th, v, e in zip(self.thetas, self.values, self.errors):
            wr.writerow([repr(float(x)) for x in th] + [repr(float(v)), repr(float(e)), self.method])
        return buf.getvalue()

    def to_record(self) -> dict:
        return {"method": self.method, "thetas": self.thetas.tolist(), "values": self.values.tolist(),
                "errors": self.errors.tolist(), "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2, sort_keys=True)

    @classmethod
    def from_function(cls, fn: Callable, thetas, method: str = "analytic") -> "EffectiveHamiltonianTable":
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        return cls(thetas, np.array([fn(t) for t in thetas]), np.zeros(len(thetas)), method)


def box_grid(d: int, half_width: float, n: int) -> np.ndarray:
    ax = np.linspace(-half_width, half_width, n)
    return np.stack([g.ravel() for g in np.meshgrid(*[ax] * d, indexing="ij")], axis=1)


@dataclass
class RateTable:
    velocities: np.ndarray
    values: np.ndarray
    argmax: np.ndarray  # maximising theta per velocity
    nonconvex: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        d = self.velocities.shape[1]
        wr.writerow([f"v{k}" for k in range(d)] + ["I"])
        for v, i in zip(self.velocities, self.values):
            wr.writerow([repr(float(x)) for x in v] + [repr(float(i))])
        return buf.getvalue()

    def __call__(self, v) -> np.ndarray:
        """Nearest-grid-point lookup."""
        v = np.atleast_2d(v)
        j = np.argmin(((v[:, None, :] - self.velocities[None]) ** 2).sum(-1), axis=1)
        return self.values[j]


def legendre_transform(table: EffectiveHamiltonianTable, velocities=None, n: int = 41,
                       tol: float = 1e-9) -> RateTable:
    """I(v) = max over table thetas of <theta, v> - H(theta)."""
    th = table.thetas
    if velocities is None:
        velocities = box_grid(th.shape[1], _slope_bound(table), n)
    v = np.atleast_2d(np.asarray(velocities, dtype=np.float64))
    S = v @ th.T - table.values[None, :]
    j = np.argmax(S, axis=1)
    return RateTable(v, S[np.arange(len(v)), j], th[j], not table.is_convex(tol))


def _slope_bound(table: EffectiveHamiltonianTable) -> float:
    th, val = table.thetas, table.values
    diff = np.linalg.norm(th[:, None] - th[None], axis=-1)
    np.fill_diagonal(diff, np.inf)
    return float(np.max(np.abs(val[:, None] - val[None]) / diff))


def double_transform(table: EffectiveHamiltonianTable, velocities=None) -> np.ndarray:
    """H** at the table thetas: the lower convex envelope on the table.

    By default the envelope is the max of the lower facet planes of the lifted point set
    (one Qhull call); flat tables, which Qhull rejects, fall back to one small LP per theta.
    """
    th, val = table.thetas, table.values
    if velocities is not None:
        rt = legendre_transform(table, velocities, tol=np.inf)
        return np.max(th @ rt.velocities.T - rt.values[None, :], axis=1)
    from scipy.spatial import ConvexHull, QhullError

    try:
        hull = ConvexHull(np.column_stack([th, val]))
    except QhullError:
        return _double_transform_lp(th, val)
    eq = hull.equations
    lower = eq[eq[:, -2] < -1e-12]
    planes = -(th @ lower[:, :-2].T + lower[:, -1]) / lower[:, -2]
    return np.minimum(planes.max(axis=1), val)


def _double_transform_lp(th: np.ndarray, val: np.ndarray) -> np.ndarray:
    from scipy.optimize import linprog

    n, d = th.shape
    out = np.empty(n)
    A = np.vstack([th.T, np.ones(n)])
    for i in range(n):
        # min sum_j mu_j H_j  s.t.  sum mu_j theta_j = theta_i, sum mu_j = 1, mu >= 0
        bvec = np.concatenate([th[i], [1.0]])
        res = linprog(val, A_eq=A, b_eq=bvec, bounds=[(0, None)] * n, method="highs")
        out[i] = res.fun if res.success else val[i]
    return out


def legendre_of_rate(rate: RateTable, thetas) -> np.ndarray:
    """I*(theta) = max over the velocity grid of <theta, v> - I(v)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    return np.max(thetas @ rate.velocities.T - rate.values[None, :], axis=1)


@dataclass
class HopfLaxValue:
    value: float
    argmax_velocity: np.ndarray
    boundary: bool  # maximiser on the edge of the velocity grid


def hopf_lax(f: Callable, rate: RateTable, t: float, x) -> HopfLaxValue:
    """sup over the velocity grid of f(x + t v) - t I(v)."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=np.float64)
    V = rate.velocities
    vals = np.asarray(f(x + t * V), dtype=np.float64).ravel() - t * rate.values
    j = int(np.argmax(vals))
    lo, hi = V.min(0), V.max(0)
    on_edge = bool(np.any(np.isclose(V[j], lo) | np.isclose(V[j], hi)))
    return HopfLaxValue(float(vals[j]), V[j].copy(), on_edge)


def hopf_lax_field(f: Callable, rate: RateTable, t: float, X) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.array([hopf_lax(f, rate, t, x).value for x in X])


# --------------------------------------------------------------------------
# estimator tables and the equivalence check
# --------------------------------------------------------------------------

def variational_table(fld, spec, thetas, **kw) -> EffectiveHamiltonianTable:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    results = [variational_Hbar(fld, spec, th, **kw) for th in thetas]
    return EffectiveHamiltonianTable(thetas, [r.value for r in results], np.zeros(len(thetas)), "variational",
                                     {"stages": [r.stages for r in results]})


def feynman_kac_table(fld, drift: DriftField | None, thetas, T: float, n_paths: int, dt: float = 0.01,
                      seed: int = 0, tilted: bool = True, **kw) -> EffectiveHamiltonianTable:
    from .diffusion import feynman_kac_table as _fk

    est = _fk(fld, drift, thetas, T, n_paths, dt=dt, seed=seed, tilted=tilted, **kw)
    return EffectiveHamiltonianTable(np.atleast_2d(thetas), [e.value for e in est], [e.se for e in est],
                                     "feynman_kac", {"T": T, "n_paths": n_paths, "dt": dt, "tilted": tilted})


@dataclass
class EquivalenceRow:
    theta: list
    feynman_kac: float
    feynman_kac_se: float
    variational: float
    gap: float
    holds: bool
    finite_size_flag: bool


def equivalence_check(fk: EffectiveHamiltonianTable, var: EffectiveHamiltonianTable,
                      n_se: float = 3.0, flag_ratio: float = 0.25, rtol: float = 1e-12) -> list[EquivalenceRow]:
    """Per theta: FK - n_se SE <= variational (up to rounding); gaps above flag_ratio (relative) are flagged."""
    if fk.thetas.shape != var.thetas.shape or not np.allclose(fk.thetas, var.thetas):
        raise ValueError("tables must share the theta grid")
    rows = []
    for th, a, se, b in zip(fk.thetas, fk.values, fk.errors, var.values):
        gap = b - a
        scale = max(abs(a), abs(b), 1e-12)
        rows.append(EquivalenceRow(th.tolist(), float(a), float(se), float(b), float(gap),
                                   bool(a - n_se * se <= b + rtol * scale), bool(abs(gap) / scale > flag_ratio)))
    return rows
