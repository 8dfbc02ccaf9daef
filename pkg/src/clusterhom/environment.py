"""Boolean-model environments: Poisson sampling, conditioning on the origin,
induced arrivals along coordinate rays and Palm-type averages."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

SCHEMA = "clusterhom.configuration/1"
RAY_SLACK = 1e-12


class SamplingError(RuntimeError):
    """Raised when rejection sampling exhausts its attempt budget."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream)."""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic 64-bit child seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class BoxDomain:
    dimension: int
    half_width: float
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 2:
            raise ValueError(f"dimension must be an integer >= 2, got {self.dimension}")
        if not np.isfinite(self.half_width) or self.half_width <= 0:
            raise ValueError(f"half_width must be finite and positive, got {self.half_width}")
        if self.center is not None and len(self.center) != self.dimension:
            raise ValueError("center has the wrong dimension")

    @property
    def origin(self) -> np.ndarray:
        if self.center is None:
            return np.zeros(self.dimension)
        return np.asarray(self.center, dtype=np.float64)

    @property
    def lo(self) -> np.ndarray:
        return self.origin - self.half_width

    @property
    def hi(self) -> np.ndarray:
        return self.origin + self.half_width

    @property
    def volume(self) -> float:
        return float((2.0 * self.half_width) ** self.dimension)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def distance_to_boundary(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.half_width - np.max(np.abs(x - self.origin), axis=-1)

    def shifted(self, shift) -> "BoxDomain":
        return BoxDomain(self.dimension, self.half_width, tuple(float(v) for v in self.origin + shift))


@dataclass(frozen=True)
class PointConfiguration:
    """A finite Boolean-model configuration (ball centres of radius 1/2)."""

    points: np.ndarray
    intensity: float
    box: BoxDomain
    seed: int = 0
    rejections: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, self.box.dimension)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dimension(self) -> int:
        return self.box.dimension

    def validate(self) -> None:
        if not np.all(self.box.contains(self.points)):
            raise ValueError("points outside the box")
        if len(np.unique(self.points, axis=0)) != len(self.points):
            raise ValueError("points are not pairwise distinct")

    def translated(self, shift) -> "PointConfiguration":
        """tau_shift: move every point (and the window) by ``shift``."""
        shift = np.asarray(shift, dtype=np.float64)
        return PointConfiguration(self.points + shift, self.intensity, self.box.shifted(shift),
                                  self.seed, self.rejections)

    def count_in(self, lo, hi) -> int:
        inside = np.all((self.points >= lo) & (self.points < hi), axis=1)
        return int(inside.sum())

    # serialisation -------------------------------------------------------
    def to_record(self) -> dict:
        rec = {
            "schema": SCHEMA,
            "dimension": self.dimension,
            "half_width": float(self.box.half_width),
            "intensity": float(self.intensity),
            "seed": int(self.seed),
            "rejections": int(self.rejections),
            "points": self.points.tolist(),
        }
        if self.box.center is not None:
            rec["center"] = list(self.box.center)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "PointConfiguration":
        if rec.get("schema") != SCHEMA:
            raise ValueError(f"unsupported configuration schema {rec.get('schema')!r}")
        center = tuple(rec["center"]) if "center" in rec else None
        box = BoxDomain(int(rec["dimension"]), float(rec["half_width"]), center)
        return cls(np.asarray(rec["points"], dtype=np.float64).reshape(-1, box.dimension),
                   float(rec["intensity"]), box, int(rec["seed"]), int(rec.get("rejections", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_json(cls, text: str) -> "PointConfiguration":
        return cls.from_record(json.loads(text))

    def save_npz(self, path) -> None:
        c = self.box.origin
        np.savez(path, points=self.points, intensity=self.intensity, half_width=self.box.half_width,
                 seed=np.uint64(self.seed), rejections=self.rejections, center=c,
                 has_center=self.box.center is not None)

    @classmethod
    def load_npz(cls, path) -> "PointConfiguration":
        with np.load(path) as z:
            pts = z["points"]
            center = tuple(z["center"].tolist()) if bool(z["has_center"]) else None
            box = BoxDomain(pts.shape[1], float(z["half_width"]), center)
            return cls(pts, float(z["intensity"]), box, int(z["seed"]), int(z["rejections"]))


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def sample_poisson(intensity: float, box: BoxDomain, seed: int) -> PointConfiguration:
    """Homogeneous Poisson process of the given intensity in the box."""
    if not np.isfinite(intensity) or intensity < 0:
        raise ValueError(f"intensity must be finite and >= 0, got {intensity}")
    rng = make_rng(seed)
    n = rng.poisson(intensity * box.volume) if intensity > 0 else 0
    pts = box.lo + (2.0 * box.half_width) * rng.random((n, box.dimension))
    return PointConfiguration(pts, float(intensity), box, int(seed))


def origin_in_proxy(graph) -> bool:
    """True when the origin is covered by the unbounded-component proxy."""
    if graph.unbounded_proxy is None:
        return False
    return bool(graph.contains(graph.unbounded_proxy, np.zeros(graph.config.dimension)))


def condition_on_origin(intensity: float, box: BoxDomain, seed: int, max_attempts: int = 100):
    """Rejection-sample a configuration with 0 in the unbounded-component proxy.

    Returns ``(config, graph)``; ``config.rejections`` counts discarded draws and
    ``config.seed`` is the seed that produced the accepted draw.
    """
    from .cluster import build_cluster_graph

    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    for attempt in range(max_attempts):
        s = derive_seed(seed, attempt)
        cfg = sample_poisson(intensity, box, s)
        cfg = PointConfiguration(cfg.points, cfg.intensity, cfg.box, s, attempt)
        graph = build_cluster_graph(cfg)
        if origin_in_proxy(graph):
            return cfg, graph
    raise SamplingError(
        f"origin not in the unbounded-component proxy after {max_attempts} attempts "
        f"(intensity {intensity} may be subcritical or the box too small)")


def conditioned_ensemble(intensity: float, box: BoxDomain, seeds: Iterable[int], max_attempts: int = 100):
    return [condition_on_origin(intensity, box, s, max_attempts) for s in seeds]


def acceptance_frequency(intensity: float, box: BoxDomain, seeds: Sequence[int]) -> tuple[float, float]:
    """Monte-Carlo estimate (mean, SE) of P(origin in the proxy cluster)."""
    from .cluster import build_cluster_graph

    hits = np.array([origin_in_proxy(build_cluster_graph(sample_poisson(intensity, box, s))) for s in seeds],
                    dtype=float)
    return float(hits.mean()), float(hits.std(ddof=1) / np.sqrt(len(hits))) if len(hits) > 1 else float("nan")


# --------------------------------------------------------------------------
# induced arrivals
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InducedArrival:
    direction: np.ndarray
    indices: np.ndarray
    truncated: bool = False

    @property
    def first(self) -> int | None:
        return int(self.indices[0]) if len(self.indices) else None


def unit_vector(d: int, axis: int, sign: int = 1) -> np.ndarray:
    e = np.zeros(d)
    e[axis] = float(sign)
    return e


def induced_arrivals(graph, direction, count: int, component: int | None = None,
                     start=None) -> InducedArrival:
    """Successive lattice arrivals n_1 < n_2 < ... of the ray start + k e in the component.

    ``start`` defaults to the origin. The ray is scanned up to the box edge; if
    fewer than ``count`` arrivals fit, the partial sequence is returned with
    ``truncated=True``.
    """
    cfg = graph.config
    e = np.asarray(direction, dtype=np.float64)
    if not (np.isclose(np.abs(e).sum(), 1.0) and np.count_nonzero(e) == 1):
        raise ValueError("direction must be a unit coordinate vector")
    comp = graph.unbounded_proxy if component is None else component
    x0 = np.zeros(cfg.dimension) if start is None else np.asarray(start, dtype=np.float64)
    if comp is None:
        return InducedArrival(e, np.zeros(0, dtype=np.int64), True)
    axis = int(np.flatnonzero(e)[0])
    sign = e[axis]
    kmax = int(np.floor(cfg.box.half_width - sign * (x0[axis] - cfg.box.origin[axis])))
    if kmax < 1:
        return InducedArrival(e, np.zeros(0, dtype=np.int64), True)
    ks = np.arange(1, kmax + 1)
    probes = x0[None, :] + ks[:, None] * e[None, :]
    hit = graph.contains(comp, probes, slack=RAY_SLACK)
    idx = ks[hit][:count]
    return InducedArrival(e, idx.astype(np.int64), len(idx) < count)


def lattice_arrival_samples(graph, window: float, axes: Sequence[int] | None = None) -> np.ndarray:
    """n_1 measured from every lattice site z in [-window, window]^d covered by the proxy.

    Integer translations preserve the Poisson law, so each covered site gives a
    (correlated) sample of n_1 under the shifted Palm law. Truncated rays are
    dropped.
    """
    cfg = graph.config
    d = cfg.dimension
    comp = graph.unbounded_proxy
    if comp is None:
        return np.zeros(0, dtype=np.int64)
    w = int(np.floor(window))
    axes = range(d) if axes is None else axes
    grid = np.stack(np.meshgrid(*[np.arange(-w, w + 1)] * d, indexing="ij"), -1).reshape(-1, d).astype(float)
    grid += np.round(cfg.box.origin)
    covered = graph.contains(comp, grid, slack=RAY_SLACK)
    starts = grid[covered]
    out = []
    for axis in axes:
        for sign in (1, -1):
            e = unit_vector(d, axis, sign)
            for z in starts:
                arr = induced_arrivals(graph, e, 1, comp, start=z)
                if not arr.truncated:
                    out.append(arr.indices[0])
    return np.asarray(out, dtype=np.int64)


def tail_fit(samples: np.ndarray, rhos: Sequence[float], min_count: int = 5) -> dict:
    """Least-squares fit of log P(n > rho) = c - k rho over bins with enough exceedances."""
    samples = np.asarray(samples)
    rhos = np.asarray(rhos, dtype=float)
    counts = np.array([(samples > r).sum() for r in rhos])
    use = counts >= min_count
    freq = counts / max(len(samples), 1)
    res = {"rho": rhos.tolist(), "count": counts.tolist(), "frequency": freq.tolist(),
           "used": use.tolist(), "n": int(len(samples))}
    if use.sum() < 3:
        res.update(slope=float("nan"), intercept=float("nan"), r2=float("nan"))
        return res
    x, y = rhos[use], np.log(freq[use])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    # counts the fitted law predicts in every bin, so sparse bins can be checked against it
    expected = len(samples) * np.exp(intercept + slope * rhos)
    res.update(slope=float(slope), intercept=float(intercept), r2=float(r2), expected=expected.tolist())
    return res


def tail_bins_consistent(fit: dict, n_sd: float = 3.0) -> bool:
    """Bins left out of the fit hold counts within n_sd Poisson deviations of the prediction."""
    if "expected" not in fit:
        return False
    for c, e, u in zip(fit["count"], fit["expected"], fit["used"]):
        if not u and abs(c - e) > n_sd * np.sqrt(max(e, 1.0)):
            return False
    return True


# --------------------------------------------------------------------------
# Palm-type averages and point-process diagnostics
# --------------------------------------------------------------------------

def empirical_palm_expectation(observable: Callable[[np.ndarray], float],
                               ensemble: Sequence[PointConfiguration],
                               window: float | None = None, reduced: bool = False) -> tuple[float, float]:
    """Campbell-type estimate of the Palm expectation of ``observable``.

    For every point x_i in the window the observable is evaluated on the
    configuration recentred at x_i (``reduced=True`` drops x_i itself); the sum
    is normalised by intensity * window volume. Returns (estimate, SE over the
    ensemble).
    """
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    per_config = []
    for cfg in ensemble:
        if cfg.intensity <= 0:
            raise ValueError("Palm expectation undefined at zero intensity")
        w = cfg.box.half_width / 2 if window is None else window
        c = cfg.box.origin
        inside = np.flatnonzero(np.all(np.abs(cfg.points - c) <= w, axis=1))
        total = 0.0
        for i in inside:
            rel = cfg.points - cfg.points[i]
            if reduced:
                rel = np.delete(rel, i, axis=0)
            total += float(observable(rel))
        per_config.append(total / (cfg.intensity * (2 * w) ** cfg.dimension))
    per_config = np.asarray(per_config)
    se = per_config.std(ddof=1) / np.sqrt(len(per_config)) if len(per_config) > 1 else float("nan")
    return float(per_config.mean()), float(se)


def region_counts(ensemble: Sequence[PointConfiguration], regions: Sequence[tuple]) -> np.ndarray:
    """(n_configs, n_regions) point counts in axis-aligned boxes (lo, hi)."""
    return np.array([[cfg.count_in(lo, hi) for lo, hi in regions] for cfg in ensemble])


def fkg_spot_check(ensemble: Sequence[PointConfiguration], x, radius: float = 1.0) -> dict:
    """Empirical P(A1 & A2) vs P(A1) P(A2) for A1 = {point within r of 0}, A2 = {point within r of x}."""
    x = np.asarray(x, dtype=float)
    a1 = np.array([bool(np.any(np.linalg.norm(c.points, axis=1) < radius)) for c in ensemble])
    a2 = np.array([bool(np.any(np.linalg.norm(c.points - x, axis=1) < radius)) for c in ensemble])
    n = len(ensemble)
    p1, p2, p12 = a1.mean(), a2.mean(), (a1 & a2).mean()
    # delta-method SE of p12 - p1 p2
    g = (a1 & a2).astype(float) - p2 * a1 - p1 * a2
    se = float(g.std(ddof=1) / np.sqrt(n))
    return {"p1": float(p1), "p2": float(p2), "p12": float(p12), "se": se,
            "holds": bool(p12 >= p1 * p2 - 3 * se)}
