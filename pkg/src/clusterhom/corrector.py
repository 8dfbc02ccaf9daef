"""Corrector integrals V_G along cluster polylines and the diagnostics for gradient-type fields."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .cluster import ClusterGraph, DisconnectedError, ShortestPathTree, chemical_distance
from .environment import make_rng

GAUSS_ORDER = 4
MAX_PIECE = 0.025  # short pieces because spline gradients are only C^1 across knots
PROVENANCES = ("discrete-gradient", "constant", "mollified", "gradient", "rotational")


class NoLoopError(RuntimeError):
    pass


@dataclass(frozen=True)
class GradientFieldSample:
    """A vector field G on the cluster with a recorded sup bound and a provenance tag."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    bound: float
    provenance: str
    potential: Callable[[np.ndarray], np.ndarray] | None = None  # g with G = grad g, when known
    support_radius: float | None = None  # G vanishes outside this ball about the origin
    knots: tuple | None = None  # (lo, h): G is polynomial between the planes lo_k + j h

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.asarray(self.evaluator(x), dtype=np.float64)

    def sup_on(self, probes: np.ndarray) -> float:
        return float(np.linalg.norm(self(probes), axis=1).max()) if len(probes) else 0.0

    def lp_norm(self, probes: np.ndarray, delta: float = 1.0) -> float:
        """Probe average of |G|^(1+delta), raised to 1/(1+delta)."""
        p = 1.0 + delta
        return float(np.mean(np.linalg.norm(self(probes), axis=1) ** p) ** (1.0 / p))


def constant_gradient(c) -> GradientFieldSample:
    c = np.asarray(c, dtype=np.float64)
    return GradientFieldSample(lambda x: np.broadcast_to(c, x.shape).copy(), float(np.linalg.norm(c)), "constant",
                               potential=lambda x: x @ c)


def rotational_field(scale: float = 1.0) -> GradientFieldSample:
    """(-x2, x1, 0, ...): curl 2, so circulation equals twice the enclosed area. Not a gradient."""
    def ev(x):
        out = np.zeros_like(x)
        out[:, 0] = -scale * x[:, 1]
        out[:, 1] = scale * x[:, 0]
        return out
    return GradientFieldSample(ev, math.inf, "rotational")


# cubic B-spline pieces on [0,1), [1,2) for |t|
def _bspline(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    return np.where(a < 1, (4 - 6 * a ** 2 + 3 * a ** 3) / 6, np.where(a < 2, (2 - a) ** 3 / 6, 0.0))


def _bspline_d(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    s = np.sign(t)
    return s * np.where(a < 1, (-12 * a + 9 * a ** 2) / 6, np.where(a < 2, -0.5 * (2 - a) ** 2, 0.0))


@dataclass(frozen=True)
class SplinePotential:
    """g(x) = sum_j c_j prod_k B((x_k - lo_k)/h - j_k): a compactly supported C^2 potential."""

    coef: np.ndarray  # shape (n,)*d
    lo: np.ndarray
    h: float

    @property
    def d(self) -> int:
        return self.coef.ndim

    def _terms(self, x: np.ndarray):
        u = (x - self.lo) / self.h
        base = np.floor(u).astype(np.int64) - 1
        shape = np.array(self.coef.shape)
        for off in np.ndindex(*([4] * self.d)):
            j = base + np.array(off)
            ok = np.all((j >= 0) & (j < shape), axis=1)
            jj = np.where(ok[:, None], j, 0)
            c = np.where(ok, self.coef[tuple(jj.T)], 0.0)
            yield c, u - j

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros(len(x))
        for c, t in self._terms(x):
            out += c * np.prod(_bspline(t), axis=1)
        return out

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros_like(x, dtype=np.float64)
        for c, t in self._terms(x):
            b = _bspline(t)
            db = _bspline_d(t) / self.h
            for k in range(self.d):
                prod = db[:, k].copy()
                for j in range(self.d):
                    if j != k:
                        prod *= b[:, j]
                out[:, k] += c * prod
        return out

    def support_radius(self) -> float:
        nz = np.argwhere(self.coef != 0)
        if len(nz) == 0:
            return 0.0
        corners = self.lo + (nz[:, None, :] + np.array([-2.0, 2.0])[None, :, None]) * self.h
        return float(np.abs(corners).max() * math.sqrt(self.d))


def discrete_gradient(coef, lo, h: float, probes: np.ndarray | None = None) -> GradientFieldSample:
    """G = grad g for a cubic B-spline potential with coefficient grid ``coef``.

    Exact gradient, so every closed-loop circulation vanishes up to quadrature error.
    """
    sp = SplinePotential(np.asarray(coef, dtype=np.float64), np.asarray(lo, dtype=np.float64), float(h))
    # sum_j |B'(t - j)| <= 1 and the B_j form a partition of unity
    bound = float(np.abs(sp.coef).max() / sp.h * math.sqrt(sp.d))
    if probes is not None and len(probes):
        bound = float(np.linalg.norm(sp.gradient(probes), axis=1).max())
    return GradientFieldSample(sp.gradient, bound, "discrete-gradient", potential=sp.value,
                               support_radius=sp.support_radius(), knots=(sp.lo, sp.h))


def random_spline_gradient(d: int, support: float, h: float = 0.5, amplitude: float = 1.0, seed: int = 0,
                           center=None) -> GradientFieldSample:
    """Random B-spline potential with coefficients supported in the cube center + [-support, support]^d."""
    n = int(round(2 * support / h)) + 1
    rng = make_rng(seed, 11)
    coef = amplitude * rng.standard_normal((n,) * d)
    c = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
    return discrete_gradient(coef, c - support, h)


def _bump(s: np.ndarray) -> np.ndarray:
    return np.where(s < 1, (1 - s * s) ** 4, 0.0)


def environment_gradient(points: np.ndarray, amplitude: float = 1.0, radius: float = 1.0) -> GradientFieldSample:
    """G = grad g with g(x) = A sum_i beta(|x - c_i|/r): a stationary gradient of the environment.

    Shifting the configuration shifts g, so under the Palm law V_G(n_1 e) = g(n_1 e) - g(0)
    has mean zero; this is a non-trivial member of the gradient class.
    """
    pts = np.asarray(points, dtype=np.float64)
    tree = cKDTree(pts)

    def pot(x):
        out = np.zeros(len(x))
        for i, nb in enumerate(tree.query_ball_point(x, radius)):
            if nb:
                s = np.linalg.norm(pts[nb] - x[i], axis=1) / radius
                out[i] = amplitude * _bump(s).sum()
        return out

    def grad(x):
        out = np.zeros_like(x)
        for i, nb in enumerate(tree.query_ball_point(x, radius)):
            if nb:
                diff = x[i] - pts[nb]
                s = np.linalg.norm(diff, axis=1) / radius
                w = np.where(s < 1, -8 * (1 - s * s) ** 3, 0.0) / radius ** 2
                out[i] = amplitude * (w[:, None] * diff).sum(0)
        return out

    # |d beta/ds| peaks at s = 1/sqrt(7); centres within r of x lie within 2r of each other
    peak = 8 / math.sqrt(7) * (6 / 7) ** 3
    crowd = int(tree.query_ball_point(pts, 2 * radius, return_length=True).max()) if len(pts) else 0
    return GradientFieldSample(grad, abs(amplitude) * peak / radius * crowd, "gradient", potential=pot)


# --------------------------------------------------------------------------
# line integrals
# --------------------------------------------------------------------------

def _gauss(order: int = GAUSS_ORDER):
    t, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (t + 1.0), 0.5 * w


def _split_at_knots(starts, ends, lo, h):
    """Cut each segment where it crosses a knot plane; returns (sub_starts, sub_ends, owner)."""
    sa, se, own = [], [], []
    for i, (a, b) in enumerate(zip(starts, ends)):
        cuts = [0.0, 1.0]
        for k in range(len(a)):
            dk = b[k] - a[k]
            if dk == 0:
                continue
            u0, u1 = sorted(((a[k] - lo[k]) / h, (b[k] - lo[k]) / h))
            j = np.arange(math.floor(u0) + 1, math.ceil(u1))
            cuts.extend((lo[k] + j * h - a[k]) / dk)
        c = np.unique(np.clip(cuts, 0.0, 1.0))
        pts = a + c[:, None] * (b - a)
        sa.append(pts[:-1])
        se.append(pts[1:])
        own.append(np.full(len(c) - 1, i))
    return np.concatenate(sa), np.concatenate(se), np.concatenate(own)


def segment_integrals(G: GradientFieldSample, starts: np.ndarray, ends: np.ndarray,
                      max_piece: float = MAX_PIECE, order: int = GAUSS_ORDER) -> np.ndarray:
    """int_0^1 G(a + s(b-a)).(b-a) ds for each row pair, composite Gauss-Legendre.

    Fields with knots are integrated piece by piece between knot planes, where a
    spline gradient is a polynomial and the rule is exact.
    """
    starts = np.atleast_2d(starts)
    ends = np.atleast_2d(ends)
    if len(starts) == 0:
        return np.zeros(0)
    if G.knots is not None:
        sa, se, own = _split_at_knots(starts, ends, *G.knots)
        part = segment_integrals(replace(G, knots=None), sa, se, max_piece=math.inf, order=order)
        return np.bincount(own, weights=part, minlength=len(starts))
    delta = ends - starts
    lengths = np.linalg.norm(delta, axis=1)
    pieces = np.maximum(1, np.ceil(lengths / max_piece).astype(np.int64))
    t, w = _gauss(order)
    out = np.zeros(len(starts))
    for m in np.unique(pieces):
        rows = np.flatnonzero(pieces == m)
        s = ((np.arange(m)[:, None] + t[None, :]) / m).ravel()  # (m*order,)
        ws = np.tile(w, m) / m
        X = starts[rows, None, :] + s[None, :, None] * delta[rows, None, :]
        g = G(X.reshape(-1, X.shape[-1])).reshape(X.shape)
        out[rows] = (g * delta[rows, None, :]).sum(-1) @ ws
    return out


def line_integral(G: GradientFieldSample, waypoints: np.ndarray, **kw) -> float:
    w = np.atleast_2d(waypoints)
    if len(w) < 2:
        return 0.0
    return float(segment_integrals(G, w[:-1], w[1:], **kw).sum())


def path_integral_V(graph: ClusterGraph, G: GradientFieldSample, x, origin=None, **kw) -> float:
    """V_G(x): integral of G along the chemical polyline from the origin to x; 0 off the cluster."""
    x = np.asarray(x, dtype=np.float64)
    o = np.zeros_like(x) if origin is None else np.asarray(origin, dtype=np.float64)
    if np.array_equal(x, o):
        return 0.0
    if len(graph.covering_balls(x)) == 0:
        return 0.0
    path = chemical_distance(graph, o, x)
    return line_integral(G, path.waypoints, **kw)


@dataclass
class CorrectorMap:
    """V_G at many points by integrating every shortest-path-tree edge once."""

    tree: ShortestPathTree
    G: GradientFieldSample
    at_centres: np.ndarray  # V at each reachable ball centre (nan elsewhere)

    @classmethod
    def build(cls, graph: ClusterGraph, G: GradientFieldSample, origin=None) -> "CorrectorMap":
        d = graph.config.box.dimension
        root = np.zeros(d) if origin is None else np.asarray(origin, dtype=np.float64)
        tree = ShortestPathTree.build(graph, root)
        pts = graph.config.points
        order = tree.order
        par = tree.pred[order]
        starts = np.where(par[:, None] >= 0, pts[np.maximum(par, 0)], root)
        inc = segment_integrals(G, starts, pts[order])
        V = np.full(graph.n_nodes, np.nan)
        for node, p, dv in zip(order, par, inc):
            V[node] = dv + (V[p] if p >= 0 else 0.0)
        return cls(tree, G, V)

    def __call__(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        out = np.zeros(len(xs))
        starts = np.empty_like(xs)
        base = np.zeros(len(xs))
        on = np.zeros(len(xs), dtype=bool)
        pts = self.tree.graph.config.points
        for i, x in enumerate(xs):
            try:
                b, _ = self.tree.best_ball(x)
            except DisconnectedError:
                continue
            on[i] = True
            if b < 0:
                starts[i] = self.tree.root
            else:
                starts[i] = pts[b]
                base[i] = self.at_centres[b]
        if on.any():
            out[on] = base[on] + segment_integrals(self.G, starts[on], xs[on])
        return out


# --------------------------------------------------------------------------
# closed loops
# --------------------------------------------------------------------------

def sample_component_points(graph: ClusterGraph, n: int, seed: int = 0, component: int | None = None,
                            window: float | None = None) -> np.ndarray:
    """Random points of one component: a random ball, then a uniform point inside it."""
    cid = graph.unbounded_proxy if component is None else component
    if cid is None:
        raise NoLoopError("no component to sample from")
    nodes = graph.component_nodes(cid)
    pts = graph.config.points[nodes]
    if window is not None:
        pts = pts[np.all(np.abs(pts) <= window, axis=1)]
    if len(pts) == 0:
        raise NoLoopError("component has no ball in the window")
    d = pts.shape[1]
    rng = make_rng(seed, 21)
    c = pts[rng.integers(len(pts), size=n)]
    u = rng.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = 0.49 * rng.random(n) ** (1.0 / d)
    return c + r[:, None] * u


def shoelace_area(poly: np.ndarray) -> float:
    """Signed area enclosed by a closed planar polyline (first two coordinates)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass
class LoopReport:
    max_abs: float
    circulations: np.ndarray
    areas: np.ndarray  # signed shoelace areas (d = 2), nan otherwise
    tolerance: float

    @property
    def member(self) -> bool:
        return self.max_abs <= self.tolerance

    def to_record(self) -> dict:
        return {"max_abs": self.max_abs, "member": self.member, "tolerance": self.tolerance,
                "circulations": self.circulations.tolist(), "areas": self.areas.tolist()}


def closed_loop_residual(graph: ClusterGraph, G: GradientFieldSample, n_loops: int = 20, seed: int = 0,
                         component: int | None = None, window: float | None = None,
                         tolerance: float = 1e-6, max_tries: int = 10) -> LoopReport:
    """Circulation of G around triangles through three cluster points, sides along chemical polylines."""
    circ, areas = [], []
    tries = 0
    while len(circ) < n_loops and tries < max_tries:
        pts = sample_component_points(graph, 3 * n_loops, seed=seed + 7919 * tries, component=component,
                                      window=window)
        for a, b, c in pts.reshape(-1, 3, pts.shape[1]):
            try:
                legs = [chemical_distance(graph, p, q).waypoints for p, q in ((a, b), (b, c), (c, a))]
            except DisconnectedError:
                continue
            circ.append(sum(line_integral(G, w) for w in legs))
            poly = np.vstack([w[:-1] for w in legs])
            areas.append(shoelace_area(poly) if poly.shape[1] == 2 else math.nan)
            if len(circ) == n_loops:
                break
        tries += 1
    if not circ:
        raise NoLoopError("no valid loop found")
    circ = np.array(circ)
    return LoopReport(float(np.abs(circ).max()), circ, np.array(areas), tolerance)


# --------------------------------------------------------------------------
# induced mean
# --------------------------------------------------------------------------

@dataclass
class InducedMeanReport:
    mean: float
    se: float
    n_used: int
    n_excluded: int
    values: np.ndarray
    arrivals: np.ndarray

    def zero_within(self, n_se: float = 3.0, floor: float = 1e-9) -> bool:
        return abs(self.mean) <= n_se * self.se + floor

    def to_record(self) -> dict:
        return {"mean": self.mean, "se": self.se, "n_used": self.n_used, "n_excluded": self.n_excluded,
                "mean_arrival": float(self.arrivals.mean()) if len(self.arrivals) else None}


def induced_mean(ensemble: Sequence, G, e) -> InducedMeanReport:
    """Average of V_G(n_1 e) over Palm-conditioned (config, graph) pairs.

    ``G`` is a field or a factory graph -> field (for environment-dependent fields).
    Configurations whose ray leaves the box before an arrival are excluded and counted.
    """
    from .environment import induced_arrivals

    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    e = np.asarray(e, dtype=np.float64)
    vals, arr = [], []
    excluded = 0
    for item in ensemble:
        graph = item[1] if isinstance(item, tuple) else item
        fieldG = G if isinstance(G, GradientFieldSample) else G(graph)
        a = induced_arrivals(graph, e, 1)
        if a.first is None:
            excluded += 1
            continue
        vals.append(path_integral_V(graph, fieldG, a.first * e))
        arr.append(a.first)
    vals = np.array(vals)
    if len(vals) == 0:
        raise ValueError("every configuration was truncated")
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.inf
    return InducedMeanReport(float(vals.mean()), se, len(vals), excluded, vals, np.array(arr))


# --------------------------------------------------------------------------
# sublinearity and density of growth
# --------------------------------------------------------------------------

@dataclass
class SublinearityReport:
    radii: np.ndarray
    ratios: np.ndarray  # max over probes in [-r, r]^d of |V|/r
    ray_k: np.ndarray
    ray_ratios: np.ndarray  # |V(n_k e)|/k
    rho: dict = dc_field(default_factory=dict)  # "k=1,eps=0.1" -> array over radii
    n_probes: int = 0

    def __post_init__(self):
        if np.any(np.diff(self.radii) <= 0):
            raise ValueError("radii must increase")

    def eventually_nonincreasing(self, start: int | None = None, tol: float = 1e-9) -> bool:
        s = len(self.ratios) // 2 if start is None else start
        return bool(np.all(np.diff(self.ratios[s:]) <= tol))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        keys = sorted(self.rho)
        wr.writerow(["r", "ratio"] + keys)
        for i, (r, q) in enumerate(zip(self.radii, self.ratios)):
            wr.writerow([repr(float(r)), repr(float(q))] + [repr(float(self.rho[k][i])) for k in keys])
        wr.writerow([])
        wr.writerow(["k", "ray_ratio"])
        for k, q in zip(self.ray_k, self.ray_ratios):
            wr.writerow([int(k), repr(float(q))])
        return buf.getvalue()

    def to_json(self) -> str:
        rec = {"radii": self.radii.tolist(), "ratios": self.ratios.tolist(), "ray_k": self.ray_k.tolist(),
               "ray_ratios": self.ray_ratios.tolist(), "rho": {k: v.tolist() for k, v in self.rho.items()},
               "n_probes": self.n_probes}
        return json.dumps(rec, indent=2, sort_keys=True)


def probe_set(d: int, half_width: float, density: float = 16.0, seed: int = 0) -> np.ndarray:
    """Scrambled Sobol points in [-L, L]^d with at least ``density`` points per unit volume."""
    n = density * (2 * half_width) ** d
    m = max(1, int(math.ceil(math.log2(n))))
    u = qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)
    return half_width * (2 * u - 1)


def density_of_growth(V_section: np.ndarray, on_section: np.ndarray, V_base: np.ndarray, r: float,
                      eps: float) -> float:
    """min over base points y of the probe fraction of the section with x on the cluster and |V(x)-V(y)| >= eps r.

    ``V_section``/``on_section`` cover a uniform probe set of the k-dimensional section, so the
    fraction estimates the normalised measure; ``V_base`` are values on the cluster part of the
    one-dimensional segment.
    """
    if len(V_base) == 0:
        return math.nan
    n = len(on_section)
    v = np.sort(V_section[on_section])
    thr = eps * r
    # |v - y| >= thr  <=>  v <= y - thr or v >= y + thr
    lo = np.searchsorted(v, V_base - thr, side="right")
    hi = np.searchsorted(v, V_base + thr, side="left")
    far = lo + (len(v) - hi)
    return float(far.min() / n)


def sublinearity_scan(graph: ClusterGraph, G: GradientFieldSample, radii: Sequence[float], density: float = 16.0,
                      seed: int = 0, axis: int = 0, n_ray: int = 20, epsilons: Sequence[float] = (0.1,),
                      section_points: int = 400, origin=None) -> SublinearityReport:
    radii = np.asarray(radii, dtype=np.float64)
    box = graph.config.box
    if radii.max() > box.half_width + 1e-12:
        raise ValueError("radii must lie within the box")
    d = box.dimension
    cmap = CorrectorMap.build(graph, G, origin)
    cid = graph.labels[graph.covering_balls(cmap.tree.root)[0]]
    R = float(radii.max())
    probes = probe_set(d, R, density, seed)
    on = graph.contains(int(cid), probes)
    Vp = np.zeros(len(probes))
    Vp[on] = cmap(probes[on])
    sup = np.abs(probes).max(axis=1)
    ratios = np.array([np.abs(Vp[on & (sup <= r)]).max(initial=0.0) / r for r in radii])

    from .environment import induced_arrivals
    e = np.zeros(d)
    e[axis] = 1.0
    arr = induced_arrivals(graph, e, n_ray, component=int(cid), start=cmap.tree.root)
    ks = np.arange(1, len(arr.indices) + 1)
    ray = np.abs(cmap(arr.indices[:, None] * e)) / ks if len(ks) else np.zeros(0)

    rho = {}
    for k in range(1, min(d, 2) + 1):
        for eps in epsilons:
            vals = []
            for r in radii:
                sec = _section(d, k, r, section_points, axis)
                son = graph.contains(int(cid), sec)
                Vs = np.zeros(len(sec))
                Vs[son] = cmap(sec[son])
                base = _section(d, 1, r, section_points, axis)
                bon = graph.contains(int(cid), base)
                vals.append(density_of_growth(Vs, son, cmap(base[bon]), r, eps))
            rho[f"k={k},eps={eps:g}"] = np.array(vals)
    return SublinearityReport(radii, ratios, ks, ray, rho, int(on.sum()))


def _section(d: int, k: int, r: float, n_per_axis: int, axis: int = 0) -> np.ndarray:
    """Uniform grid on the k-dimensional section {|x|_inf <= r, x_j = 0 beyond the first k axes}."""
    m = n_per_axis if k == 1 else max(2, int(round(n_per_axis ** (1.0 / k) * 2)))
    ax = np.linspace(-r, r, m)
    axes = [axis] + [j for j in range(d) if j != axis]
    out = np.zeros((m ** k, d))
    mesh = np.meshgrid(*[ax] * k, indexing="ij")
    for j in range(k):
        out[:, axes[j]] = mesh[j].ravel()
    return out


# --------------------------------------------------------------------------
# mollification
# --------------------------------------------------------------------------

def ball_quadrature(d: int, order: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric nodes/weights on the unit ball for the kernel (1 - |y|^2)^3, weights summing to one."""
    t, w = np.polynomial.legendre.leggauss(order)
    Y = np.stack([g.ravel() for g in np.meshgrid(*[t] * d, indexing="ij")], axis=1)
    W = np.prod(np.stack([g.ravel() for g in np.meshgrid(*[w] * d, indexing="ij")], axis=1), axis=1)
    r2 = (Y ** 2).sum(1)
    W = W * np.where(r2 < 1, (1 - r2) ** 3, 0.0)
    keep = W > 0
    return Y[keep], W[keep] / W[keep].sum()


def mollify_gradient(G: GradientFieldSample, radius: float, order: int = 8, d: int = 2) -> GradientFieldSample:
    """G_r(x) = sum_j w_j G(x + r y_j): positive weights summing to one, so constants are kept and sup does not grow."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    Y, W = ball_quadrature(d, order)

    def ev(x):
        X = x[:, None, :] + radius * Y[None]
        g = G(X.reshape(-1, x.shape[1])).reshape(len(x), len(Y), x.shape[1])
        return np.einsum("pjk,j->pk", g, W)

    return GradientFieldSample(ev, G.bound, "mollified",
                               support_radius=None if G.support_radius is None else G.support_radius + radius)
