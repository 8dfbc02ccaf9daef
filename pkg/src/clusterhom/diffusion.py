"""Controlled degenerate diffusion on the cluster and the estimators built on it.

Euler-Maruyama step, with generator scale ``kappa``::

    X <- X + sqrt(kappa) sigma(X) dB + kappa div a(X) dt + a(X) c(t, X) dt

``kappa = 1`` is the plain scheme. ``kappa = 1/2`` has generator
``(1/2) div(a grad) + <c, grad>_a``, the operator appearing in the HJB equation,
and is what every estimator of H-bar uses. A control is ``c(t, X) = c_t + w b(X)``.

Each path draws its noise from its own Philox stream ``(seed, first_stream + i)``,
so results do not depend on chunking or on the number of workers.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import _accel
from ._accel import njit
from .coefficients import RAMP_MOLLIFIER, CoefficientField, DriftField, profile_point
from .environment import PointConfiguration, make_rng

GENERATOR_SCALE_HJB = 0.5
_CHUNK_BUDGET = 4_000_000  # noise doubles held in memory per chunk


class SimulationError(RuntimeError):
    """Non-finite state in a path."""

    def __init__(self, stream: int, step: int):
        super().__init__(f"non-finite state in stream {stream} at step {step}")
        self.stream = stream
        self.step = step


# --------------------------------------------------------------------------
# controls
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Control:
    """c(t, X) = time_part(t) + weight * drift(X)."""

    kind: str = "zero"
    value: np.ndarray | None = None
    time_fn: Callable | None = None
    drift: DriftField | None = None
    weight: float = 0.0

    @classmethod
    def zero(cls) -> "Control":
        return cls("zero")

    @classmethod
    def constant(cls, c) -> "Control":
        return cls("constant", value=np.asarray(c, dtype=np.float64))

    @classmethod
    def time(cls, fn: Callable) -> "Control":
        return cls("time", time_fn=fn)

    @classmethod
    def feedback(cls, b: DriftField, weight: float = 1.0) -> "Control":
        return cls("feedback", drift=b, weight=float(weight))

    @classmethod
    def tilted(cls, b: DriftField | None, theta) -> "Control":
        """Feedback b(X) plus the constant theta; paths carry the Girsanov weight back to the pure-feedback law."""
        return cls("tilt", value=np.asarray(theta, dtype=np.float64), drift=b, weight=1.0 if b is not None else 0.0)

    def time_part(self, times: np.ndarray, d: int) -> np.ndarray:
        out = np.zeros((len(times), d))
        if self.value is not None:
            out += np.broadcast_to(self.value, (len(times), d))
        if self.time_fn is not None:
            out += np.array([np.broadcast_to(np.asarray(self.time_fn(t), dtype=np.float64), (d,)) for t in times])
        return out

    def descriptor(self) -> dict:
        rec = {"kind": self.kind, "weight": self.weight}
        if self.value is not None:
            rec["value"] = np.asarray(self.value).tolist()
        if self.drift is not None:
            rec["drift"] = self.drift.to_record()
        return rec


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit
def _drift_point(x, b0, bk, bph, bamp, out):
    d = x.shape[0]
    for k in range(d):
        out[k] = b0[k]
    for j in range(bk.shape[0]):
        arg = bph[j]
        for k in range(d):
            arg += bk[j, k] * x[k]
        c = math.cos(arg)
        for k in range(d):
            out[k] += bamp[j, k] * c


@njit
def _sde_numba(x0, dW, dt, kappa, ctime, wfb, is_const, m0, s, period, plo, centers, lo, shape, strides, order,
               cell_start, offsets, w, b0, bk, bph, bamp, snap, states):
    P, N, d = dW.shape
    X = x0.copy()
    S = snap.shape[0]
    logw = np.zeros(P)
    cost = np.zeros(P)
    bad = np.full(P, -1, dtype=np.int64)
    snapX = np.zeros((P, S, d))
    snapW = np.zeros((P, S))
    store = states.shape[0] > 0
    grad = np.zeros(d)
    bvec = np.zeros(d)
    xw = np.zeros(d)
    sk = math.sqrt(kappa)
    for p in range(P):
        si = 0
        xp = X[p]
        for n in range(N + 1):
            while si < S and snap[si] == n:
                for k in range(d):
                    snapX[p, si, k] = xp[k]
                snapW[p, si] = logw[p]
                si += 1
            if store:
                for k in range(d):
                    states[p, n, k] = xp[k]
            if n == N:
                break
            if is_const:
                m = m0
                for k in range(d):
                    grad[k] = 0.0
            else:
                for k in range(d):
                    xw[k] = xp[k]
                    if period > 0.0:
                        xw[k] = plo[k] + (xp[k] - plo[k]) - period * math.floor((xp[k] - plo[k]) / period)
                m = profile_point(xw, centers, lo, shape, strides, order, cell_start, offsets, s, w, grad)
            lam = 0.5 * m * m
            _drift_point(xp, b0, bk, bph, bamp, bvec)
            lw = 0.0
            cst = 0.0
            finite = True
            for k in range(d):
                ct = ctime[n, k]
                u = m * ct / (2.0 * sk)
                lw -= u * dW[p, n, k] + 0.5 * u * u * dt
                r = ct + (wfb - 1.0) * bvec[k]
                cst += 0.5 * lam * r * r * dt
                xp[k] += sk * m * dW[p, n, k] + kappa * m * grad[k] * dt + lam * (ct + wfb * bvec[k]) * dt
                if not math.isfinite(xp[k]):
                    finite = False
            logw[p] += lw
            cost[p] += cst
            if not finite:
                bad[p] = n
                break
    return X, logw, cost, bad, snapX, snapW


def _sde_numpy(x0, dW, dt, kappa, ctime, wfb, fld: CoefficientField, drift: DriftField, snap, store):
    P, N, d = dW.shape
    X = x0.copy()
    S = len(snap)
    logw = np.zeros(P)
    cost = np.zeros(P)
    bad = np.full(P, -1, dtype=np.int64)
    snapX = np.zeros((P, S, d))
    snapW = np.zeros((P, S))
    states = np.zeros((P, N + 1, d)) if store else None
    alive = np.ones(P, dtype=bool)
    sk = math.sqrt(kappa)
    si = 0
    for n in range(N + 1):
        while si < S and snap[si] == n:
            snapX[:, si] = X
            snapW[:, si] = logw
            si += 1
        if store:
            states[:, n] = X
        if n == N:
            break
        m, grad = fld.profile(X)
        lam = 0.5 * m * m
        bvec = drift(X)
        ct = ctime[n]
        u = m[:, None] * ct / (2.0 * sk)
        lw = -(u * dW[:, n]).sum(1) - 0.5 * (u * u).sum(1) * dt
        r = ct + (wfb - 1.0) * bvec
        cst = 0.5 * lam * (r * r).sum(1) * dt
        step = sk * m[:, None] * dW[:, n] + kappa * m[:, None] * grad * dt + lam[:, None] * (ct + wfb * bvec) * dt
        newX = X + step
        fin = np.all(np.isfinite(newX), axis=1)
        newly_bad = alive & ~fin
        bad[newly_bad] = n
        upd = alive.copy()
        X[upd] = newX[upd]
        logw[upd] += lw[upd]
        cost[upd] += cst[upd]
        alive &= fin
    return X, logw, cost, bad, snapX, snapW, states


def _run_chunk(args):
    (fld, drift, ctime, wfb, x0, T, dt, kappa, seed, streams, snap, store, d, backend) = args
    if backend != _accel.backend():
        _accel.set_backend(backend)
    N = ctime.shape[0]
    sq = math.sqrt(dt)
    dW = np.empty((len(streams), N, d))
    for i, st in enumerate(streams):
        dW[i] = make_rng(seed, int(st)).standard_normal((N, d)) * sq
    X0 = np.ascontiguousarray(np.broadcast_to(x0, (len(streams), d)), dtype=np.float64)
    if _accel.use_numba():
        fa = fld.kernel_args(d)
        states = np.zeros((len(streams), N + 1, d)) if store else np.zeros((0, 1, d))
        X, logw, cost, bad, sX, sW = _sde_numba(X0, dW, dt, kappa, ctime, wfb, *fa, RAMP_MOLLIFIER,
                                                drift.b0, drift.wavevectors, drift.phases, drift.amplitudes,
                                                snap, states)
        if not store:
            states = None
    else:
        X, logw, cost, bad, sX, sW, states = _sde_numpy(X0, dW, dt, kappa, ctime, wfb, fld, drift, snap, store)
    return X, logw, cost, bad, sX, sW, states, dW if store else None


# --------------------------------------------------------------------------
# path containers
# --------------------------------------------------------------------------

@dataclass
class SDEPath:
    times: np.ndarray
    states: np.ndarray
    control_trace: np.ndarray
    noise: np.ndarray
    log_weight: float = 0.0
    cost: float = 0.0


@dataclass
class TrajectoryEnsemble:
    endpoints: np.ndarray  # (P, d)
    x0: np.ndarray
    T: float
    dt: float
    kappa: float
    seed: int
    first_stream: int
    control: dict
    log_weights: np.ndarray  # log dP/dQ relative to the pure-feedback law
    costs: np.ndarray  # int_0^T 1/2 lambda |c - b|^2 ds
    snapshot_steps: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    snapshots: np.ndarray | None = None  # (P, S, d)
    snapshot_log_weights: np.ndarray | None = None  # (P, S)
    paths: list | None = None
    field: CoefficientField | None = None

    @property
    def n_paths(self) -> int:
        return len(self.endpoints)

    @property
    def dimension(self) -> int:
        return self.endpoints.shape[1]

    @property
    def streams(self) -> np.ndarray:
        return self.first_stream + np.arange(self.n_paths)

    def snapshot(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        i = int(np.searchsorted(self.snapshot_steps, step))
        if i >= len(self.snapshot_steps) or self.snapshot_steps[i] != step:
            raise KeyError(f"step {step} was not recorded")
        return self.snapshots[:, i], self.snapshot_log_weights[:, i]

    def write_endpoints_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["stream", "T"] + [f"x{k}" for k in range(self.dimension)] + ["log_weight"])
            for st, x, lw in zip(self.streams, self.endpoints, self.log_weights):
                wr.writerow([int(st), repr(float(self.T))] + [repr(float(v)) for v in x] + [repr(float(lw))])


def _time_grid(T: float, dt: float) -> tuple[int, np.ndarray]:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not T > 0:
        raise ValueError("T must be positive")
    N = int(round(T / dt))
    if N < 1 or abs(N * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be an integer multiple of dt")
    return N, np.arange(N + 1) * dt


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("CLUSTERHOM_WORKERS", "1")))
    except ValueError:
        return 1


def simulate_ensemble(fld: CoefficientField, control: Control, x0, T: float, dt: float, n_paths: int,
                      seed: int = 0, kappa: float = 1.0, snapshot_steps: Sequence[int] = (),
                      store_paths: bool = False, first_stream: int = 0, workers: int | None = None,
                      dimension: int | None = None) -> TrajectoryEnsemble:
    """Simulate ``n_paths`` independent paths (stream indices first_stream, first_stream + 1, ...)."""
    if not kappa > 0:
        raise ValueError("generator scale must be positive")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        if len(x0) != n_paths:
            raise ValueError("per-path starting points must have n_paths rows")
        d = x0.shape[1]
    else:
        x0 = np.atleast_1d(x0)
        d = dimension or len(x0)
        x0 = np.broadcast_to(x0, (d,)).copy()
    N, times = _time_grid(T, dt)
    ctime = np.ascontiguousarray(control.time_part(times[:-1], d))
    drift = control.drift if control.drift is not None else DriftField.zero(d)
    wfb = float(control.weight) if control.drift is not None else 0.0
    snap = np.unique(np.asarray(list(snapshot_steps), dtype=np.int64))
    if len(snap) and (snap.min() < 0 or snap.max() > N):
        raise ValueError("snapshot step out of range")
    per = max(1, _CHUNK_BUDGET // max(N * d, 1))
    streams = first_stream + np.arange(n_paths)
    chunks = [streams[i:i + per] for i in range(0, n_paths, per)]
    starts = [x0[i:i + per] if x0.ndim == 2 else x0 for i in range(0, n_paths, per)]
    jobs = [(fld, drift, ctime, wfb, x, T, dt, kappa, seed, ch, snap, store_paths, d, _accel.backend())
            for ch, x in zip(chunks, starts)]
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_chunk, jobs))
    else:
        results = [_run_chunk(j) for j in jobs]
    X = np.concatenate([r[0] for r in results])
    logw = np.concatenate([r[1] for r in results])
    cost = np.concatenate([r[2] for r in results])
    bad = np.concatenate([r[3] for r in results])
    if np.any(bad >= 0):
        i = int(np.flatnonzero(bad >= 0)[0])
        raise SimulationError(int(streams[i]), int(bad[i]))
    ens = TrajectoryEnsemble(X, x0, float(T), float(dt), float(kappa), int(seed), int(first_stream),
                             control.descriptor(), logw, cost, snap,
                             np.concatenate([r[4] for r in results]), np.concatenate([r[5] for r in results]),
                             field=fld)
    if store_paths:
        paths = []
        for r in results:
            for st, noise in zip(r[6], r[7]):
                c = ctime + (wfb * drift(st[:-1]) if wfb else 0.0)
                paths.append(SDEPath(times, st, c, noise))
        for p, lw, cs in zip(paths, logw, cost):
            p.log_weight, p.cost = float(lw), float(cs)
        ens.paths = paths
    return ens


def simulate_sde(fld: CoefficientField, control: Control, x0, T: float, dt: float, stream: int = 0,
                 seed: int = 0, kappa: float = 1.0, graph=None, component: int | None = None) -> SDEPath:
    """One path on stream ``stream``; ``graph`` enables the x0-in-cluster precondition."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    if graph is not None:
        cid = graph.unbounded_proxy if component is None else component
        if graph.distance_to_closure(cid, x0)[0] > 0:
            raise ValueError("x0 is not in the cluster closure")
    ens = simulate_ensemble(fld, control, x0, T, dt, 1, seed=seed, kappa=kappa, store_paths=True,
                            first_stream=stream, workers=1)
    return ens.paths[0]


def confinement_excess(ensemble_or_states, graph, component: int | None = None) -> float:
    """Largest distance from recorded states to the cluster closure."""
    cid = graph.unbounded_proxy if component is None else component
    if isinstance(ensemble_or_states, TrajectoryEnsemble):
        ens = ensemble_or_states
        pts = np.concatenate([p.states for p in ens.paths]) if ens.paths else ens.endpoints
    else:
        pts = np.asarray(ensemble_or_states).reshape(-1, np.shape(ensemble_or_states)[-1])
    return float(graph.distance_to_closure(cid, pts).max())


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------

def log_mean_exp(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    mx = float(np.max(y))
    if not np.isfinite(mx):
        return mx
    return mx + math.log(float(np.mean(np.exp(y - mx))))


def jackknife_log_mean_exp(y) -> tuple[float, float]:
    """log mean exp(y) with its leave-one-out jackknife standard error."""
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    mx = float(np.max(y))
    e = np.exp(y - mx)
    S = e.sum()
    est = mx + math.log(S / n)
    if n < 2:
        return est, float("nan")
    loo = S - e
    with np.errstate(divide="ignore"):
        jk = mx + np.log(np.maximum(loo, 1e-300) / (n - 1))
    se = math.sqrt((n - 1) / n * float(((jk - jk.mean()) ** 2).sum()))
    return est, se


def sample_cluster_points(fld: CoefficientField, half_width: float, n: int, seed: int = 0,
                          d: int | None = None) -> np.ndarray:
    """n points uniform on {a > 0} within [-L, L]^d (the b = 0 invariant measure, restricted)."""
    d = d or fld.dimension or 2
    rng = make_rng(seed, 1)
    out = []
    have = 0
    for _ in range(1000):
        x = rng.uniform(-half_width, half_width, size=(max(4 * n, 1024), d))
        x = x[fld.a(x) > 0]
        out.append(x)
        have += len(x)
        if have >= n:
            return np.concatenate(out)[:n]
    raise ValueError("cluster too sparse to sample from")


def lln_drift(ensemble: TrajectoryEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Mean of (X_T - x0)/T with per-component standard errors."""
    if ensemble.T < 100 * ensemble.dt * (1 - 1e-12):
        raise ValueError("T must be at least 100 dt")
    v = (ensemble.endpoints - ensemble.x0) / ensemble.T
    return v.mean(0), v.std(0, ddof=1) / math.sqrt(len(v))


def spatial_drift_average(fld: CoefficientField, drift: DriftField | None, half_width: float,
                          n_probes: int = 200_000, seed: int = 0, kappa: float = GENERATOR_SCALE_HJB,
                          d: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Average of kappa div a + a b over cluster points of the window [-L, L]^d."""
    d = d or fld.dimension or (len(drift.b0) if drift is not None else 2)
    rng = make_rng(seed, 0)
    x = rng.uniform(-half_width, half_width, size=(n_probes, d))
    _, lam, diva = fld.evaluate(x)
    b = drift(x) if drift is not None else np.zeros_like(x)
    v = kappa * diva + lam[:, None] * b
    inside = lam > 0
    if not inside.any():
        raise ValueError("no probe landed in the cluster")
    vin = v[inside]
    return vin.mean(0), vin.std(0, ddof=1) / math.sqrt(len(vin))


@dataclass
class FKEstimate:
    theta: np.ndarray
    value: float
    se: float
    T: float
    n_paths: int
    tilted: bool

    @property
    def ci(self) -> tuple[float, float]:
        return self.value - 1.96 * self.se, self.value + 1.96 * self.se


def feynman_kac_Hbar(fld: CoefficientField, drift: DriftField | None, theta, T: float, n_paths: int,
                     dt: float = 0.01, seed: int = 0, x0=None, tilted: bool = False,
                     kappa: float = GENERATOR_SCALE_HJB, workers: int | None = None,
                     first_stream: int = 0) -> FKEstimate:
    """(1/T) log E exp<theta, X_T - x0> under the feedback-b diffusion.

    ``tilted=True`` simulates with the extra constant control theta and reweights by the
    Girsanov density; this has the same mean and far smaller variance.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    d = len(theta)
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=np.float64)
    if not np.any(theta):
        return FKEstimate(theta, 0.0, 0.0, T, n_paths, tilted)
    ctl = Control.tilted(drift, theta) if tilted else (Control.feedback(drift) if drift is not None else Control.zero())
    ens = simulate_ensemble(fld, ctl, x0, T, dt, n_paths, seed=seed, kappa=kappa, workers=workers,
                            first_stream=first_stream)
    y = (ens.endpoints - x0) @ theta + (ens.log_weights if tilted else 0.0)
    est, se = jackknife_log_mean_exp(y)
    return FKEstimate(theta, est / T, se / T, T, n_paths, tilted)


def feynman_kac_table(fld, drift, thetas, T, n_paths, dt=0.01, seed=0, tilted=True, **kw) -> list[FKEstimate]:
    """One estimate per theta row; each theta gets its own block of streams."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    return [feynman_kac_Hbar(fld, drift, th, T, n_paths, dt=dt, seed=seed, tilted=tilted,
                             first_stream=i * n_paths, **kw) for i, th in enumerate(thetas)]


# --------------------------------------------------------------------------
# rate functions
# --------------------------------------------------------------------------

def _ball_volume(d: int, r: float) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r ** d


@dataclass
class RateTable:
    velocities: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    counts: np.ndarray
    bandwidth: float | np.ndarray
    T: float
    method: str
    flagged: np.ndarray

    def to_record(self) -> dict:
        return {"method": self.method, "T": self.T,
                "bandwidth": np.asarray(self.bandwidth).tolist(),
                "velocities": self.velocities.tolist(),
                "values": [None if not np.isfinite(v) else float(v) for v in self.values],
                "errors": [None if not np.isfinite(v) else float(v) for v in self.errors],
                "counts": np.asarray(self.counts).tolist(), "flagged": self.flagged.tolist()}


def empirical_rate_function(ensemble: TrajectoryEnsemble, velocities, h: float | None = None) -> RateTable:
    """I(x) = -(1/T) log frequency(X_T/T in ball(x, h)); h defaults to T^(-1/4)."""
    v = np.atleast_2d(np.asarray(velocities, dtype=np.float64))
    T = ensemble.T
    h = T ** -0.25 if h is None else float(h)
    vel = (ensemble.endpoints - ensemble.x0) / T
    w = np.exp(ensemble.log_weights)
    vals = np.empty(len(v))
    counts = np.empty(len(v), dtype=np.int64)
    for i, x in enumerate(v):
        hit = np.linalg.norm(vel - x, axis=1) < h
        counts[i] = int(hit.sum())
        freq = float((w * hit).mean())
        vals[i] = -math.log(freq) / T if freq > 0 else np.inf
    return RateTable(v, vals, np.full(len(v), np.nan), counts, h, T, "frequency", ~np.isfinite(vals))


def tilted_rate_function(fld: CoefficientField, drift: DriftField | None, velocities, tilts, T: float,
                         n_paths: int, dt: float = 0.01, seed: int = 0, radius: float = 1.5,
                         fractions: Sequence[float] = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0), n_batches: int = 5,
                         kappa: float = GENERATOR_SCALE_HJB, workers: int | None = None,
                         prefactor_exponent: float | None = None) -> RateTable:
    """Rate function from importance-tilted path ensembles at several horizons.

    For velocity v the paths carry the extra constant control ``tilt`` (ideally the dual
    slope of v), and at each horizon t the weighted frequency of |X_t - t v| < radius is
    turned into a density. Fitting log p_t = -t I + alpha log t + C over the horizons
    removes the polynomial prefactor; ``prefactor_exponent`` pins alpha instead of fitting
    it (-d/2 under a local central limit theorem). The bandwidth radius/t shrinks like 1/T.
    """
    v = np.atleast_2d(np.asarray(velocities, dtype=np.float64))
    tilts = np.atleast_2d(np.asarray(tilts, dtype=np.float64))
    if len(tilts) != len(v):
        raise ValueError("one tilt per velocity")
    d = v.shape[1]
    N, _ = _time_grid(T, dt)
    steps = sorted({int(round(f * N)) for f in fractions})
    if steps[0] <= 0:
        raise ValueError("horizon fractions must be positive")
    ts = np.array(steps) * dt
    vol = _ball_volume(d, radius)
    if prefactor_exponent is None:
        A = np.column_stack([-ts, np.log(ts), np.ones_like(ts)])
        shift = np.zeros_like(ts)
    else:
        A = np.column_stack([-ts, np.ones_like(ts)])
        shift = prefactor_exponent * np.log(ts)
    vals = np.empty(len(v))
    errs = np.empty(len(v))
    counts = np.empty(len(v), dtype=np.int64)
    for i, (x, th) in enumerate(zip(v, tilts)):
        ctl = Control.tilted(drift, th)
        ens = simulate_ensemble(fld, ctl, np.zeros(d), T, dt, n_paths, seed=seed, kappa=kappa,
                                snapshot_steps=steps, first_stream=i * n_paths, workers=workers)
        logp = np.empty((n_batches + 1, len(steps)))
        hits_T = 0
        for j, st in enumerate(steps):
            X, lw = ens.snapshot(st)
            hit = np.linalg.norm(X - st * dt * x, axis=1) < radius
            if j == len(steps) - 1:
                hits_T = int(hit.sum())
            contrib = np.where(hit, np.exp(lw), 0.0)
            logp[0, j] = math.log(max(contrib.mean(), 1e-300) / vol)
            for b, part in enumerate(np.array_split(contrib, n_batches)):
                logp[b + 1, j] = math.log(max(part.mean(), 1e-300) / vol)
        counts[i] = hits_T
        coef = np.linalg.lstsq(A, logp.T - shift[:, None], rcond=None)[0]
        vals[i] = coef[0, 0]
        errs[i] = coef[0, 1:].std(ddof=1) / math.sqrt(n_batches)
    flagged = counts < 10
    return RateTable(v, vals, errs, counts, radius / ts[-1], T, "tilted-multi-horizon", flagged)


# --------------------------------------------------------------------------
# environment process
# --------------------------------------------------------------------------

def environment_step(config: PointConfiguration, x) -> PointConfiguration:
    """The environment seen from x: every point moved by -x."""
    return config.translated(-np.asarray(x, dtype=np.float64))


def local_density_observable(radius: float, d: int) -> Callable[[np.ndarray], float]:
    vol = _ball_volume(d, radius)

    def obs(rel: np.ndarray) -> float:
        return float(np.count_nonzero(np.einsum("ij,ij->i", rel, rel) < radius * radius)) / vol

    obs.reach = radius  # points farther than this never matter
    return obs


def ergodic_time_average(fld: CoefficientField, config: PointConfiguration, observable: Callable,
                         T: float, dt: float, n_paths: int, seed: int = 0, every: int = 10,
                         burn_in: float = 0.0, kappa: float = GENERATOR_SCALE_HJB,
                         drift: DriftField | None = None) -> tuple[float, float]:
    """Time average of observable(points - X_t) along diffusion paths from the origin.

    Returns (mean over paths, SE over paths).
    """
    d = config.dimension
    N, _ = _time_grid(T, dt)
    first = int(math.ceil(burn_in / dt))
    steps = np.arange(first, N + 1, every)
    ctl = Control.feedback(drift) if drift is not None else Control.zero()
    ens = simulate_ensemble(fld, ctl, np.zeros(d), T, dt, n_paths, seed=seed, kappa=kappa, snapshot_steps=steps)
    from scipy.spatial import cKDTree

    tree = cKDTree(config.points)
    reach = float(getattr(observable, "reach", np.inf))
    per_path = np.empty(n_paths)
    for p in range(n_paths):
        X = ens.snapshots[p]
        near = tree.query_ball_point(X, reach) if np.isfinite(reach) else [slice(None)] * len(X)
        per_path[p] = np.mean([observable(config.points[idx] - x) for x, idx in zip(X, near)])
    return float(per_path.mean()), float(per_path.std(ddof=1) / math.sqrt(n_paths))

