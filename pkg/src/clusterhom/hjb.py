"""Explicit monotone finite differences for the scaled HJB equation on eps * cluster.

    d_t u = (eps/2) div(a(x/eps) grad u) + H(x/eps, grad u)

The viscous term is split as (eps/2) lambda Lap u + (1/2) div a(x/eps) . grad u.
Per interior node and axis k the update is

    u += dt * [ (eps/2) lambda D2_k u + v_k D^up_k u + H(D0 u) + alpha_k (u+ - 2u + u-) / (2h) ]

with v = div a / 2 upwinded and alpha_k >= |dH/dp_k| on |p|_inf <= p_bound
(Lax-Friedrichs). Nodes outside the cluster and on the box edge are clamped to f.
"""
from __future__ import annotations

import csv
import math
import time as _time
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Sequence

import numpy as np

from . import _accel
from ._accel import njit
from .coefficients import CoefficientField, HamiltonianSpec
from .diffusion import GENERATOR_SCALE_HJB, Control, simulate_ensemble


class CFLError(ValueError):
    """The explicit step violates the monotonicity condition."""


class MaskMismatchError(ValueError):
    """Grid mask disagrees with the cluster membership test."""


# --------------------------------------------------------------------------
# grid
# --------------------------------------------------------------------------

@dataclass
class Grid:
    """Uniform grid on [-L, L]^d (macro coordinates) with the cluster mask at scale eps."""

    d: int
    half_width: float
    h: float
    epsilon: float
    dt: float | None = None
    mask: np.ndarray | None = None  # in-cluster flag per node (flattened, C order)

    def __post_init__(self):
        if self.h <= 0 or self.epsilon <= 0 or self.half_width <= 0:
            raise ValueError("h, epsilon and half_width must be positive")
        n = self.half_width / self.h
        if abs(n - round(n)) > 1e-9:
            raise ValueError("half_width must be a multiple of h")
        self.n_side = 2 * int(round(n)) + 1

    @property
    def shape(self) -> tuple:
        return (self.n_side,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.n_side ** self.d

    @property
    def axis(self) -> np.ndarray:
        m = (self.n_side - 1) // 2
        return np.arange(-m, m + 1) * self.h

    @property
    def strides(self) -> np.ndarray:
        return np.array([self.n_side ** (self.d - 1 - k) for k in range(self.d)], dtype=np.int64)

    def coordinates(self) -> np.ndarray:
        g = np.meshgrid(*[self.axis] * self.d, indexing="ij")
        return np.stack([x.ravel() for x in g], axis=1)

    def edge(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.d, -1).T
        return np.any((idx == 0) | (idx == self.n_side - 1), axis=1)

    def interior(self) -> np.ndarray:
        """Flat indices of nodes that evolve: in the cluster and off the box edge."""
        mask = np.ones(self.n_nodes, bool) if self.mask is None else self.mask
        return np.flatnonzero(mask & ~self.edge())

    def node_index(self, x) -> int:
        x = np.asarray(x, dtype=np.float64)
        m = (self.n_side - 1) // 2
        ijk = np.rint(x / self.h).astype(int) + m
        if np.any(np.abs(ijk * self.h - m * self.h - x) > 1e-9):
            raise ValueError("point is not a grid node")
        return int(ijk @ self.strides)

    @classmethod
    def build(cls, fld: CoefficientField, epsilon: float, half_width: float, h: float, d: int | None = None,
              dt: float | None = None, graph=None, component: int | None = None) -> "Grid":
        d = d or fld.dimension or 2
        g = cls(d, half_width, h, epsilon, dt)
        g.mask = fld.a(g.coordinates() / epsilon) > 0
        if graph is not None:
            cid = graph.unbounded_proxy if component is None else component
            inside = graph.contains(cid, g.coordinates() / epsilon)
            if not np.array_equal(inside, g.mask):
                raise MaskMismatchError(f"{int((inside != g.mask).sum())} nodes disagree with cluster.contains")
        return g


@dataclass
class GridFunction:
    values: np.ndarray
    time: float


@dataclass
class HJBSolution:
    grid: Grid
    snapshots: list
    dt: float
    n_steps: int
    p_bound: float
    p_max_observed: float
    runtime: float
    backend: str

    @property
    def final(self) -> GridFunction:
        return self.snapshots[-1]

    def value_at(self, x, which: int = -1) -> float:
        return float(self.snapshots[which].values[self.grid.node_index(x)])

    def write_csv(self, path) -> None:
        X = self.grid.coordinates()
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x{k}" for k in range(self.grid.d)] + ["t", "u"])
            for snap in self.snapshots:
                for x, u in zip(X, snap.values):
                    wr.writerow([repr(float(v)) for v in x] + [repr(float(snap.time)), repr(float(u))])

    def save_binary(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, times=np.array([s.time for s in self.snapshots]),
                     values=np.stack([s.values for s in self.snapshots]),
                     h=self.grid.h, half_width=self.grid.half_width, epsilon=self.grid.epsilon,
                     d=self.grid.d, mask=self.grid.mask)


# --------------------------------------------------------------------------
# coefficients at the nodes
# --------------------------------------------------------------------------

@dataclass
class _NodeData:
    nodes: np.ndarray
    lam: np.ndarray
    v: np.ndarray  # div a / 2
    b: np.ndarray
    alpha: np.ndarray
    plus: np.ndarray  # (n, d) neighbour indices
    minus: np.ndarray


def _node_data(grid: Grid, fld: CoefficientField, spec: HamiltonianSpec, p_bound: float) -> _NodeData:
    nodes = grid.interior()
    x = grid.coordinates()[nodes] / grid.epsilon
    _, lam, diva = fld.evaluate(x)
    b = spec.b(x)
    alpha = np.asarray(spec.p_lipschitz(lam, b, p_bound), dtype=np.float64)
    st = grid.strides
    plus = nodes[:, None] + st[None, :]
    minus = nodes[:, None] - st[None, :]
    return _NodeData(nodes, lam, 0.5 * diva, b, alpha, plus, minus)


def max_stable_dt(grid: Grid, nd: _NodeData) -> float:
    if len(nd.nodes) == 0:
        return np.inf
    rate = (grid.epsilon * nd.lam[:, None] / grid.h ** 2 + (nd.alpha + np.abs(nd.v)) / grid.h).sum(1)
    mx = float(rate.max())
    return np.inf if mx == 0 else 1.0 / mx


def check_cfl(grid: Grid, nd: _NodeData, dt: float) -> None:
    lim = max_stable_dt(grid, nd)
    if dt > lim * (1 + 1e-12):
        raise CFLError(f"dt * max_i sum_k (eps lambda_i / h^2 + (alpha_ik + |v_ik|) / h) <= 1 violated: "
                       f"dt = {dt:.6g} > {lim:.6g}")


# --------------------------------------------------------------------------
# step kernels
# --------------------------------------------------------------------------

KIND_QUADRATIC, KIND_POWER = 0, 1


@njit
def _step_numba(u, out, nodes, plus, minus, lam, v, b, alpha, h, dt, eps, kind, pa, pc):
    n, d = plus.shape
    pmax = 0.0
    for i in range(n):
        c = nodes[i]
        uc = u[c]
        visc = 0.0
        adv = 0.0
        lf = 0.0
        p2 = 0.0
        bp = 0.0
        for k in range(d):
            up = u[plus[i, k]]
            um = u[minus[i, k]]
            lap = up - 2.0 * uc + um
            visc += lap
            lf += alpha[i, k] * lap
            vk = v[i, k]
            if vk > 0.0:
                adv += vk * (up - uc)
            else:
                adv += vk * (uc - um)
            p = (up - um) / (2.0 * h)
            if abs(p) > pmax:
                pmax = abs(p)
            p2 += p * p
            bp += b[i, k] * p
        if kind == 0:
            ham = lam[i] * (0.5 * p2 + bp)
        else:
            ham = pc / pa * (lam[i] * p2) ** (0.5 * pa)
        out[c] = uc + dt * (0.5 * eps * lam[i] * visc / (h * h) + adv / h + ham + lf / (2.0 * h))
    return pmax


def _step_numpy(u, out, nd: _NodeData, h, dt, eps, spec: HamiltonianSpec):
    uc = u[nd.nodes]
    up = u[nd.plus]
    um = u[nd.minus]
    lap = up - 2.0 * uc[:, None] + um
    adv = np.where(nd.v > 0, nd.v * (up - uc[:, None]), nd.v * (uc[:, None] - um)).sum(1)
    p = (up - um) / (2.0 * h)
    ham = spec.h(nd.lam, nd.b, p)
    out[nd.nodes] = uc + dt * (0.5 * eps * nd.lam * lap.sum(1) / (h * h) + adv / h + ham
                               + (nd.alpha * lap).sum(1) / (2.0 * h))
    return float(np.abs(p).max(initial=0.0))


def _data_gradient_bound(grid: Grid, f0: np.ndarray) -> float:
    vals = f0.reshape(grid.shape)
    mx = 0.0
    for k in range(grid.d):
        mx = max(mx, float(np.abs(np.diff(vals, axis=k)).max(initial=0.0)) / grid.h)
    return mx


def explicit_step(u: np.ndarray, grid: Grid, fld: CoefficientField, spec: HamiltonianSpec, dt: float,
                  p_bound: float, nd: _NodeData | None = None) -> np.ndarray:
    """One explicit step (clamped nodes copied unchanged)."""
    nd = nd or _node_data(grid, fld, spec, p_bound)
    out = u.copy()
    if _accel.use_numba() and spec.kind in ("quadratic", "power"):
        kind = KIND_QUADRATIC if spec.kind == "quadratic" else KIND_POWER
        _step_numba(u, out, nd.nodes, nd.plus, nd.minus, nd.lam, nd.v, nd.b, nd.alpha, grid.h, dt,
                    grid.epsilon, kind, float(spec.alpha), float(spec.coef))
    else:
        _step_numpy(u, out, nd, grid.h, dt, grid.epsilon, spec)
    return out


def _march(fld, spec, f0, grid, T, p_bound, cfl, times):
    nd = _node_data(grid, fld, spec, p_bound)
    lim = max_stable_dt(grid, nd)
    if grid.dt is not None:
        n_steps = max(1, int(math.ceil(T / grid.dt - 1e-9)))
        dt = T / n_steps
        check_cfl(grid, nd, dt)
    else:
        n_steps = max(1, int(math.ceil(T / (cfl * lim)))) if np.isfinite(lim) else 1
        dt = T / n_steps
    snap_steps = {int(round(t / dt)): t for t in times}
    u = f0.copy()
    buf = f0.copy()
    snaps = []
    fast = _accel.use_numba() and spec.kind in ("quadratic", "power")
    kind = KIND_QUADRATIC if spec.kind == "quadratic" else KIND_POWER
    pmax = 0.0
    for n in range(n_steps + 1):
        if n in snap_steps:
            snaps.append(GridFunction(u.copy(), snap_steps[n]))
        if n == n_steps:
            break
        if fast:
            pm = _step_numba(u, buf, nd.nodes, nd.plus, nd.minus, nd.lam, nd.v, nd.b, nd.alpha, grid.h, dt,
                             grid.epsilon, kind, float(spec.alpha), float(spec.coef))
        else:
            pm = _step_numpy(u, buf, nd, grid.h, dt, grid.epsilon, spec)
        pmax = max(pmax, pm)
        u, buf = buf, u
        if not np.all(np.isfinite(u[nd.nodes])):
            raise FloatingPointError(f"non-finite values at step {n + 1}")
    return snaps, dt, n_steps, pmax


def solve_hjb_fd(fld: CoefficientField, spec: HamiltonianSpec, f: Callable, epsilon: float, T: float,
                 grid: Grid, snapshot_times: Sequence[float] | None = None, p_bound: float | None = None,
                 cfl: float = 0.9, max_restarts: int = 4) -> HJBSolution:
    """March u from f to time T; returns the solution at the snapshot times (default: 0 and T).

    ``p_bound`` bounds |D0 u|_inf for the Lax-Friedrichs coefficient (default 2 max|D f| + 1).
    Every step records the largest central gradient actually used; if it exceeds the
    bound the march is redone with 1.25 times the observed value, so the returned
    solution always comes from a monotone scheme.
    """
    if abs(grid.epsilon - epsilon) > 1e-15:
        raise ValueError("grid was built for a different epsilon")
    spec = replace(spec, divergence_drift=False)  # the split term is handled by the scheme
    t0 = _time.perf_counter()
    X = grid.coordinates()
    f0 = np.asarray(f(X), dtype=np.float64).ravel()
    if not np.all(np.isfinite(f0)):
        raise ValueError("initial data is not finite")
    if p_bound is None:
        p_bound = 2.0 * _data_gradient_bound(grid, f0) + 1.0
    times = [0.0, T] if snapshot_times is None else sorted(set(float(t) for t in snapshot_times))
    for _ in range(max_restarts + 1):
        snaps, dt, n_steps, pmax = _march(fld, spec, f0, grid, T, p_bound, cfl, times)
        if pmax <= p_bound:
            break
        p_bound = 1.25 * pmax
    else:
        raise RuntimeError(f"gradient bound still exceeded after {max_restarts} restarts")
    return HJBSolution(grid, snaps, dt, n_steps, float(p_bound), pmax, _time.perf_counter() - t0, _accel.backend())


# --------------------------------------------------------------------------
# comparison and a priori bounds
# --------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    max_difference: float  # max over nodes/times of u1 - u2
    data_max_difference: float  # max of f1 - f2
    sup_distance: float  # sup |u1 - u2|
    data_sup_distance: float
    comparison_ok: bool
    contraction_ok: bool
    tolerance: float


def comparison_check(fld, spec, f1: Callable, f2: Callable, epsilon: float, T: float, grid: Grid,
                     n_snapshots: int = 5, tol: float = 1e-10) -> ComparisonReport:
    """Discrete comparison principle and sup-norm contraction for two data sets on one grid."""
    X = grid.coordinates()
    g1, g2 = np.asarray(f1(X), float).ravel(), np.asarray(f2(X), float).ravel()
    pb = 2.0 * max(_data_gradient_bound(grid, g1), _data_gradient_bound(grid, g2)) + 1.0
    times = np.linspace(0.0, T, n_snapshots)
    s1 = solve_hjb_fd(fld, spec, f1, epsilon, T, grid, times, p_bound=pb)
    s2 = solve_hjb_fd(fld, spec, f2, epsilon, T, grid, times, p_bound=pb)
    if s1.p_bound != s2.p_bound:  # one of them had to widen the bound: use one scheme for both
        pb = max(s1.p_bound, s2.p_bound)
        s1 = solve_hjb_fd(fld, spec, f1, epsilon, T, grid, times, p_bound=pb)
        s2 = solve_hjb_fd(fld, spec, f2, epsilon, T, grid, times, p_bound=pb)
    diff = np.stack([a.values - b.values for a, b in zip(s1.snapshots, s2.snapshots)])
    md, dmd = float(diff.max()), float((g1 - g2).max())
    sd, dsd = float(np.abs(diff).max()), float(np.abs(g1 - g2).max())
    return ComparisonReport(md, dmd, sd, dsd, md <= dmd + tol, sd <= dsd + tol, tol)


def a_priori_bound(fld, spec, f: Callable, grid: Grid, T: float) -> float:
    """max|f| + T max|H(., 0)| over the interior nodes."""
    X = grid.coordinates()
    nodes = grid.interior()
    x = X[nodes] / grid.epsilon
    lam = fld.a(x)
    h0 = np.abs(spec.h(lam, spec.b(x), np.zeros_like(x))).max(initial=0.0)
    return float(np.abs(f(X)).max() + T * h0)


# --------------------------------------------------------------------------
# control Monte Carlo
# --------------------------------------------------------------------------

@dataclass
class ControlEstimate:
    value: float
    se: float
    best: int
    per_control: list  # (J, SE) per control


def _cost_control(ctl: Control, spec: HamiltonianSpec) -> Control:
    """Attach the Hamiltonian's drift so the kernel's running cost is 1/2 lambda |c - b|^2."""
    if ctl.drift is not None and spec.drift is not None and ctl.drift is not spec.drift:
        if not (np.array_equal(ctl.drift.b0, spec.drift.b0) and ctl.drift.is_constant and spec.drift.is_constant):
            raise ValueError("feedback controls must use the Hamiltonian's drift field")
    w = ctl.weight if ctl.drift is not None else 0.0
    return replace(ctl, drift=spec.drift, weight=w)


def control_objective(fld, spec, f: Callable, epsilon: float, t: float, x, ctl: Control, n_paths: int,
                      dt: float, seed: int = 0, first_stream: int = 0) -> tuple[float, float]:
    """Empirical J: mean of f(eps X_{t/eps}) - eps int_0^{t/eps} L(X_s, c_s) ds, with SE."""
    x = np.asarray(x, dtype=np.float64)
    T = t / epsilon
    if spec.kind == "quadratic":
        ens = simulate_ensemble(fld, _cost_control(ctl, spec), x / epsilon, T, dt, n_paths, seed=seed,
                                kappa=GENERATOR_SCALE_HJB, first_stream=first_stream)
        running = ens.costs
    else:
        ens = simulate_ensemble(fld, ctl, x / epsilon, T, dt, n_paths, seed=seed, kappa=GENERATOR_SCALE_HJB,
                                store_paths=True, first_stream=first_stream)
        running = np.empty(n_paths)
        for i, p in enumerate(ens.paths):
            lam = fld.a(p.states[:-1])
            running[i] = float(spec.lagrangian(lam, spec.b(p.states[:-1]), p.control_trace).sum() * dt)
    J = np.asarray(f(epsilon * ens.endpoints), dtype=np.float64).ravel() - epsilon * running
    return float(J.mean()), float(J.std(ddof=1) / math.sqrt(n_paths))


def solve_hjb_control_mc(fld, spec, f: Callable, epsilon: float, t: float, x, controls: Sequence[Control],
                         n_paths: int, dt: float, seed: int = 0, graph=None) -> ControlEstimate:
    """Restricted supremum of J over a finite control family (a lower bound for u_eps)."""
    x = np.asarray(x, dtype=np.float64)
    if graph is not None and graph.distance_to_closure(graph.unbounded_proxy, x / epsilon)[0] > 0:
        raise ValueError("x/eps is not in the cluster")
    if not controls:
        raise ValueError("empty control family")
    res = [control_objective(fld, spec, f, epsilon, t, x, c, n_paths, dt, seed, first_stream=i * n_paths)
           for i, c in enumerate(controls)]
    best = int(np.argmax([r[0] for r in res]))
    return ControlEstimate(res[best][0], res[best][1], best, res)


# --------------------------------------------------------------------------
# convergence study
# --------------------------------------------------------------------------

@dataclass
class ConvergenceRow:
    epsilon: float
    h: float
    n_nodes: int
    sup_error: float
    runtime: float


@dataclass
class ConvergenceTable:
    rows: list = dc_field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.sup_error for r in self.rows])

    @property
    def decreasing(self) -> bool:
        e = self.errors
        return bool(np.all(np.diff(e) < 0))

    def to_record(self) -> dict:
        return {"rows": [r.__dict__ for r in self.rows], "decreasing": self.decreasing}


def convergence_study(fields, spec, f: Callable, epsilons: Sequence[float], T: float, half_width: float,
                      h_of_eps: Callable[[float], float], u_hom: Callable, compact_fraction: float = 0.5,
                      n_times: int = 3, core_only: bool = True) -> ConvergenceTable:
    """sup over the inner box and t in (0, T] of |u_eps - u_hom| per eps.

    ``fields`` is one field or one per eps. Errors are measured on the inner
    ``compact_fraction`` of the box so the outer clamp stays out of the measurement,
    and (``core_only``) on nodes where the profile is saturated, m(x/eps) = 1, which
    keeps the Dirichlet layer along eps * boundary out of it as well.
    """
    table = ConvergenceTable()
    flist = fields if isinstance(fields, (list, tuple)) else [fields] * len(epsilons)
    times = np.linspace(0, T, n_times + 1)[1:]
    for fld, eps in zip(flist, epsilons):
        h = h_of_eps(eps)
        grid = Grid.build(fld, eps, half_width, h, d=spec.drift.b0.shape[0] if spec.drift is not None else None)
        sol = solve_hjb_fd(fld, spec, f, eps, T, grid, snapshot_times=np.concatenate([[0.0], times]))
        X = grid.coordinates()
        inner = np.all(np.abs(X) <= compact_fraction * half_width + 1e-12, axis=1)
        if core_only:
            inner &= fld.sigma(X / eps) >= 1.0 - 1e-12
        err = 0.0
        for snap in sol.snapshots[1:]:
            err = max(err, float(np.abs(snap.values[inner] - u_hom(snap.time, X[inner])).max()))
        table.rows.append(ConvergenceRow(float(eps), float(h), grid.n_nodes, err, sol.runtime))
    return table
