"""Ball-overlap graph of the occupied set, membership, ball-count and chemical distances."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.spatial import cKDTree
from scipy.stats import qmc

from . import _accel
from ._accel import njit
from ._spatial import CellIndex
from .environment import PointConfiguration

BALL_RADIUS = 0.5
EDGE_LENGTH = 1.0


class DisconnectedError(ValueError):
    """Endpoints are not covered or not joined by a chain of balls."""


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit
def _scan_pairs(points, lo, shape, strides, order, cell_start, offsets, out):
    """Count (and, if ``out`` is large enough, record) pairs i < j at distance < 1."""
    n, d = points.shape
    cell = np.empty(d, dtype=np.int64)
    m = 0
    for i in range(n):
        for k in range(d):
            cell[k] = int(np.floor(points[i, k] - lo[k]))
        for o in range(offsets.shape[0]):
            flat = 0
            ok = True
            for k in range(d):
                c = cell[k] + offsets[o, k]
                if c < 0 or c >= shape[k]:
                    ok = False
                    break
                flat += c * strides[k]
            if not ok:
                continue
            for q in range(cell_start[flat], cell_start[flat + 1]):
                j = order[q]
                if j <= i:
                    continue
                r2 = 0.0
                for k in range(d):
                    t = points[i, k] - points[j, k]
                    r2 += t * t
                if r2 < 1.0:
                    if m < out.shape[0]:
                        out[m, 0] = i
                        out[m, 1] = j
                    m += 1
    return m


def _edges_numba(points, lo, shape, strides, order, cell_start, offsets):
    empty = np.zeros((0, 2), dtype=np.int64)
    m = _scan_pairs(points, lo, shape, strides, order, cell_start, offsets, empty)
    out = np.empty((m, 2), dtype=np.int64)
    _scan_pairs(points, lo, shape, strides, order, cell_start, offsets, out)
    return out


@njit
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit
def _union_find_numba(n, edges):
    parent = np.arange(n)
    rank = np.zeros(n, dtype=np.int64)
    for e in range(edges.shape[0]):
        a = _find(parent, edges[e, 0])
        b = _find(parent, edges[e, 1])
        if a == b:
            continue
        if rank[a] < rank[b]:
            a, b = b, a
        parent[b] = a
        if rank[a] == rank[b]:
            rank[a] += 1
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        labels[i] = _find(parent, i)
    return labels


def _edges_numpy(points: np.ndarray) -> np.ndarray:
    if len(points) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = cKDTree(points).query_pairs(EDGE_LENGTH, output_type="ndarray").astype(np.int64)
    if len(pairs):
        dist2 = ((points[pairs[:, 0]] - points[pairs[:, 1]]) ** 2).sum(axis=1)
        pairs = pairs[dist2 < EDGE_LENGTH ** 2]
        pairs = np.sort(pairs, axis=1)
    return pairs


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel so that component ids follow the smallest node index."""
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inv]


def _sorted_edges(edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def label_components(points: np.ndarray, box_lo=None, box_hi=None) -> tuple[np.ndarray, np.ndarray]:
    """Return (edges, canonical labels) of the overlap graph (centre distance < 1)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    if _accel.use_numba():
        lo = points.min(axis=0) if box_lo is None else np.asarray(box_lo, float)
        hi = points.max(axis=0) if box_hi is None else np.asarray(box_hi, float)
        idx = CellIndex.build(points, lo, hi)
        edges = _edges_numba(points, idx.lo, idx.shape, idx.strides, idx.order, idx.cell_start, idx.offsets)
        labels = _union_find_numba(n, edges)
    else:
        edges = _edges_numpy(points)
        adj = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
        _, labels = csgraph.connected_components(adj, directed=False)
    return _sorted_edges(edges), _canonical(labels)


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ChemicalPath:
    waypoints: np.ndarray
    length: float
    ball_count: int
    lower_bound: float


@dataclass(frozen=True)
class ClusterGraph:
    config: PointConfiguration
    edges: np.ndarray
    labels: np.ndarray
    unbounded_proxy: int | None
    boundary_components: tuple[int, ...]
    period: float | None = None  # side of the torus for periodic samples

    def wrap(self, x) -> np.ndarray:
        """Coordinates used by the KD trees (shifted into [0, period) on a torus)."""
        x = np.asarray(x, dtype=np.float64)
        if self.period is None:
            return x
        return np.mod(x - self.config.box.lo, self.period)

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def n_components(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def ambiguous(self) -> bool:
        """More than one boundary-touching component of comparable size."""
        if len(self.boundary_components) < 2:
            return False
        sizes = sorted((self.component_size(c) for c in self.boundary_components), reverse=True)
        return sizes[1] >= 0.5 * sizes[0]

    def component_size(self, cid: int) -> int:
        return int((self.labels == cid).sum())

    def component_nodes(self, cid: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cid)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.n_nodes
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def weighted_adjacency(self) -> sp.csr_matrix:
        n = self.n_nodes
        e = self.edges
        pts = self.config.points
        w = np.linalg.norm(pts[e[:, 0]] - pts[e[:, 1]], axis=1)
        w = np.maximum(w, 1e-300)  # coincident centres still need an explicit edge
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))

    @cached_property
    def _trees(self) -> dict:
        return {}

    def _tree(self, cid: int | None):
        key = -1 if cid is None else int(cid)
        if key not in self._trees:
            nodes = np.arange(self.n_nodes) if cid is None else self.component_nodes(cid)
            tree = None
            if len(nodes):
                pts = self.wrap(self.config.points[nodes])
                tree = cKDTree(pts, boxsize=self.period) if self.period is not None else cKDTree(pts)
            self._trees[key] = (nodes, tree)
        return self._trees[key]

    def covering_balls(self, x, cid: int | None = None) -> np.ndarray:
        """Indices of the balls (optionally restricted to a component) containing x."""
        nodes, tree = self._tree(cid)
        if tree is None:
            return np.zeros(0, dtype=np.int64)
        x = np.asarray(x, dtype=np.float64)
        near = tree.query_ball_point(self.wrap(x), BALL_RADIUS)
        near = np.asarray(near, dtype=np.int64)
        if len(near) == 0:
            return near
        diff = self.config.points[nodes[near]] - x
        if self.period is not None:
            diff -= self.period * np.round(diff / self.period)
        d = np.linalg.norm(diff, axis=1)
        return np.sort(nodes[near[d < BALL_RADIUS]])

    def contains(self, cid: int | None, x, slack: float = 0.0):
        """Membership of x in the open union of the component's balls."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        nodes, tree = self._tree(cid)
        if tree is None:
            out = np.zeros(len(xs), dtype=bool)
        else:
            dist, _ = tree.query(self.wrap(xs), k=1)
            out = dist < BALL_RADIUS - slack
        return bool(out[0]) if single else out

    def distance_to_closure(self, cid: int | None, x) -> np.ndarray:
        """Euclidean distance from each row of x to the closed union of the component's balls."""
        xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
        nodes, tree = self._tree(cid)
        if tree is None:
            return np.full(len(xs), np.inf)
        dist, _ = tree.query(self.wrap(xs), k=1)
        return np.maximum(dist - BALL_RADIUS, 0.0)

    def to_adjacency_record(self) -> dict:
        nbrs = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            nbrs[i].append(int(j))
            nbrs[j].append(int(i))
        return {
            "schema": "clusterhom.cluster_graph/1",
            "n_nodes": self.n_nodes,
            "labels": self.labels.tolist(),
            "unbounded_proxy": self.unbounded_proxy,
            "boundary_components": list(self.boundary_components),
            "adjacency": [sorted(v) for v in nbrs],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_adjacency_record(), fh)

    def write_edge_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j"])
            w.writerows(self.edges.tolist())


def build_cluster_graph(config: PointConfiguration) -> ClusterGraph:
    edges, labels = label_components(config.points, config.box.lo, config.box.hi)
    proxy, touching = None, ()
    if len(labels):
        near_edge = config.box.distance_to_boundary(config.points) < BALL_RADIUS
        touching = tuple(int(c) for c in np.unique(labels[near_edge]))
        if touching:
            sizes = np.bincount(labels)
            proxy = max(touching, key=lambda c: (sizes[c], -c))
    return ClusterGraph(config, edges, labels, proxy, touching)


def build_periodic_cluster_graph(config: PointConfiguration) -> ClusterGraph:
    """Overlap graph on the torus obtained by identifying opposite faces of the box.

    A Poisson sample on a torus is exactly stationary, which is what the periodic
    effective-Hamiltonian estimators need. The largest component plays the
    unbounded cluster. Distances use the minimum-image convention.
    """
    side = 2.0 * config.box.half_width
    if side <= 2 * EDGE_LENGTH:
        raise ValueError("torus side must exceed twice the edge length")
    pts = np.mod(config.points - config.box.lo, side)
    n = len(pts)
    if n == 0:
        return ClusterGraph(config, np.zeros((0, 2), np.int64), np.zeros(0, np.int64), None, (), side)
    pairs = cKDTree(pts, boxsize=side).query_pairs(EDGE_LENGTH, output_type="ndarray").astype(np.int64)
    if len(pairs):
        diff = pts[pairs[:, 0]] - pts[pairs[:, 1]]
        diff -= side * np.round(diff / side)
        pairs = np.sort(pairs[(diff ** 2).sum(1) < EDGE_LENGTH ** 2], axis=1)
    adj = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = csgraph.connected_components(adj, directed=False)
    labels = _canonical(labels)
    sizes = np.bincount(labels)
    proxy = int(np.argmax(sizes))
    return ClusterGraph(config, _sorted_edges(pairs), labels, proxy, (), side)


# --------------------------------------------------------------------------
# distances
# --------------------------------------------------------------------------

def _bfs_levels(adj: sp.csr_matrix, sources: np.ndarray, targets: np.ndarray) -> int | None:
    n = adj.shape[0]
    visited = np.zeros(n, dtype=bool)
    frontier = np.zeros(n, dtype=bool)
    frontier[sources] = True
    visited |= frontier
    is_target = np.zeros(n, dtype=bool)
    is_target[targets] = True
    level = 1
    while frontier.any():
        if (frontier & is_target).any():
            return level
        nxt = (adj @ frontier.astype(np.float64)) > 0
        frontier = nxt & ~visited
        visited |= frontier
        level += 1
    return None


def ball_count_distance(graph: ClusterGraph, x, y) -> int:
    """Minimal number of balls in an overlapping chain from a ball containing x to one containing y."""
    sx = graph.covering_balls(x)
    sy = graph.covering_balls(y)
    if len(sx) == 0 or len(sy) == 0:
        raise DisconnectedError("endpoint not covered by the occupied set")
    n = _bfs_levels(graph.adjacency, sx, sy)
    if n is None:
        raise DisconnectedError("no chain of overlapping balls joins the endpoints")
    return n


def _augmented(graph: ClusterGraph, anchors: list[np.ndarray]) -> sp.csr_matrix:
    """Weighted centre graph plus one extra node per anchor point, joined to its covering balls."""
    n = graph.n_nodes
    pts = graph.config.points
    e = graph.edges
    w = np.maximum(np.linalg.norm(pts[e[:, 0]] - pts[e[:, 1]], axis=1), 1e-300)
    rows, cols, vals = [e[:, 0]], [e[:, 1]], [w]
    for a, x in enumerate(anchors):
        balls = graph.covering_balls(x)
        rows.append(np.full(len(balls), n + a))
        cols.append(balls)
        vals.append(np.maximum(np.linalg.norm(pts[balls] - x, axis=1), 1e-300))
    r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    m = n + len(anchors)
    return sp.csr_matrix((np.concatenate([v, v]), (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(m, m))


def chemical_distance(graph: ClusterGraph, x, y) -> ChemicalPath:
    """Centre-polyline upper bound on the interior distance from x to y.

    x -> c_1 -> ... -> c_n -> y along the shortest Euclidean-weighted path of
    overlapping ball centres; a straight segment when x and y share a ball.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pts = graph.config.points
    sx, sy = graph.covering_balls(x), graph.covering_balls(y)
    if len(sx) == 0 or len(sy) == 0:
        raise DisconnectedError("endpoint not covered by the occupied set")
    lb = float(np.linalg.norm(x - y))
    if np.intersect1d(sx, sy).size:
        return ChemicalPath(np.stack([x, y]), lb, 1, lb)
    n = graph.n_nodes
    adj = _augmented(graph, [x, y])
    dist, pred = csgraph.dijkstra(adj, indices=n, return_predecessors=True)
    if not np.isfinite(dist[n + 1]):
        raise DisconnectedError("endpoints lie in different components")
    chain = []
    v = pred[n + 1]
    while v != n:
        chain.append(v)
        v = pred[v]
    chain = chain[::-1]
    way = np.vstack([x[None], pts[chain], y[None]])
    seg = np.linalg.norm(np.diff(way, axis=0), axis=1)
    return ChemicalPath(way, float(seg.sum()), len(chain), lb)


@dataclass
class ShortestPathTree:
    """Single-source Dijkstra tree over ball centres rooted at a covered point."""

    graph: ClusterGraph
    root: np.ndarray
    dist: np.ndarray  # (n_nodes,) polyline length root -> centre
    pred: np.ndarray  # predecessor centre, -1 for balls attached to the root, -2 unreachable
    order: np.ndarray  # centres sorted by distance (reachable only)

    @classmethod
    def build(cls, graph: ClusterGraph, root) -> "ShortestPathTree":
        root = np.asarray(root, dtype=np.float64)
        n = graph.n_nodes
        if len(graph.covering_balls(root)) == 0:
            raise DisconnectedError("root not covered")
        adj = _augmented(graph, [root])
        dist, pred = csgraph.dijkstra(adj, indices=n, return_predecessors=True)
        dist = dist[:n]
        pred = pred[:n].astype(np.int64)
        pred = np.where(pred == n, -1, pred)
        pred = np.where(np.isfinite(dist), pred, -2)
        reach = np.flatnonzero(np.isfinite(dist))
        order = reach[np.argsort(dist[reach], kind="stable")]
        return cls(graph, root, dist, pred, order)

    def best_ball(self, x) -> tuple[int, float]:
        """Covering ball minimising dist(root -> c) + |c - x|; (-1, |x-root|) if x shares a root ball."""
        x = np.asarray(x, dtype=np.float64)
        balls = self.graph.covering_balls(x)
        if len(balls) == 0:
            raise DisconnectedError("point not covered")
        root_balls = self.graph.covering_balls(self.root)
        if np.intersect1d(balls, root_balls).size:
            return -1, float(np.linalg.norm(x - self.root))
        tot = self.dist[balls] + np.linalg.norm(self.graph.config.points[balls] - x, axis=1)
        k = int(np.argmin(tot))
        if not np.isfinite(tot[k]):
            raise DisconnectedError("point not connected to the root")
        return int(balls[k]), float(tot[k])

    def polyline(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        b, _ = self.best_ball(x)
        if b < 0:
            return np.stack([self.root, x])
        chain = []
        while b >= 0:
            chain.append(b)
            b = self.pred[b]
        pts = self.graph.config.points[chain[::-1]]
        return np.vstack([self.root[None], pts, x[None]])


def volume_fraction(graph: ClusterGraph, cid: int | None, lo, hi, n_probes: int = 4096, seed: int = 0) -> float:
    """Quasi-Monte-Carlo estimate of vol(component & window) / vol(window)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise ValueError("empty window")
    if cid is None and graph.unbounded_proxy is None:
        return 0.0
    d = len(lo)
    m = int(np.ceil(np.log2(max(n_probes, 2))))
    u = qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)
    probes = lo + (hi - lo) * u
    if graph.n_nodes == 0:
        return 0.0
    return float(np.mean(graph.contains(cid, probes)))


@dataclass(frozen=True)
class ExceedanceRow:
    scale: float  # pairs with scale <= |x - y|_inf < 2 scale
    n_pairs: int
    exceed: int
    frequency: float
    se: float
    mean_ratio: float


def chemical_exceedance(graph: ClusterGraph, scales, c0: float = 1.5, n_sources: int = 40,
                        pairs_per_source: int = 25, seed: int = 0, component: int | None = None) -> list[ExceedanceRow]:
    """Frequency of d(x, y) >= c0 |x - y|_inf for centre pairs of one component at dyadic scales.

    d is the centre-polyline length.  Sources are drawn from centres far enough from the
    box faces that every target annulus fits inside the box.
    """
    cid = graph.unbounded_proxy if component is None else component
    if cid is None:
        raise DisconnectedError("no unbounded-cluster proxy")
    scales = np.asarray(scales, dtype=float)
    pts = graph.config.points
    box = graph.config.box
    nodes = graph.component_nodes(cid)
    reach = 2.0 * scales.max()
    inner = nodes[np.all((pts[nodes] - box.lo >= reach) & (box.hi - pts[nodes] >= reach), axis=1)]
    if len(inner) == 0:
        raise ValueError("box too small for the largest scale")
    rng = np.random.default_rng(seed)
    sources = rng.choice(inner, size=min(n_sources, len(inner)), replace=False)
    tree = cKDTree(pts[nodes])
    counts = np.zeros((len(scales), 2), dtype=np.int64)
    ratios = [[] for _ in scales]
    adj = graph.weighted_adjacency
    for s in sources:
        dist = csgraph.dijkstra(adj, indices=int(s))
        for k, r in enumerate(scales):
            near = np.asarray(tree.query_ball_point(pts[s], 2 * r, p=np.inf), dtype=np.int64)
            cand = nodes[near]
            linf = np.abs(pts[cand] - pts[s]).max(axis=1)
            cand, linf = cand[linf >= r], linf[linf >= r]
            if len(cand) == 0:
                continue
            pick = rng.choice(len(cand), size=min(pairs_per_source, len(cand)), replace=False)
            ratio = dist[cand[pick]] / linf[pick]
            counts[k, 0] += len(pick)
            counts[k, 1] += int((ratio >= c0).sum())
            ratios[k].extend(ratio.tolist())
    rows = []
    for k, r in enumerate(scales):
        n, e = int(counts[k, 0]), int(counts[k, 1])
        p = e / n if n else float("nan")
        se = float(np.sqrt(p * (1 - p) / n)) if n else float("nan")
        rows.append(ExceedanceRow(float(r), n, e, p, se, float(np.mean(ratios[k])) if n else float("nan")))
    return rows
