"""Degenerate coefficient fields supported on the cluster and Hamiltonian/Lagrangian pairs.

The profile is ``m(x) = 1 - prod_i (1 - psi((1/2 - |x - c_i|) / s))`` over the
balls of one component, where ``psi`` is the clamp ``t -> clip(t, 0, 1)``
(steepened to fit on [w, 1 - w]) convolved with a C^2 triweight bump of
half-width ``w``. Then ``sigma = m Id``, ``a = m^2/2 Id``, ``div a = m grad m``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import _accel
from ._accel import njit
from ._spatial import CellIndex

RAMP_MOLLIFIER = 0.1  # half-width w of the bump, in units of the ramp variable
C5 = 0.5  # a <= C5 * Id for every constructed profile


class ConjugationError(RuntimeError):
    """Numerical Legendre conjugation failed to converge or is unbounded."""


# --------------------------------------------------------------------------
# ramp psi: closed-form convolution of a clamp with a triweight kernel
# --------------------------------------------------------------------------

@njit
def _cdf1(v):
    if v <= -1.0:
        return 0.0
    if v >= 1.0:
        return 1.0
    v2 = v * v
    return 0.5 + 35.0 / 32.0 * v * (1.0 - v2 + 0.6 * v2 * v2 - v2 * v2 * v2 / 7.0)


@njit
def _int_cdf1(v):
    if v <= -1.0:
        return 0.0
    if v >= 1.0:
        return v
    v2 = v * v
    return 0.5 * v + 35.0 / 32.0 * v2 * (0.5 - 0.25 * v2 + 0.1 * v2 * v2 - v2 * v2 * v2 / 56.0) + 35.0 / 256.0


@njit
def ramp_scalar(t, w):
    """(psi(t), psi'(t)) for the mollified clamp on [0, 1]."""
    if t <= 0.0:
        return 0.0, 0.0
    if t >= 1.0:
        return 1.0, 0.0
    inv = 1.0 / (1.0 - 2.0 * w)
    a = t - w
    b = t - 1.0 + w
    val = inv * w * (_int_cdf1(a / w) - _int_cdf1(b / w))
    der = inv * (_cdf1(a / w) - _cdf1(b / w))
    return val, der


def _cdf_np(v):
    v = np.clip(v, -1.0, 1.0)
    v2 = v * v
    return 0.5 + 35.0 / 32.0 * v * (1.0 - v2 + 0.6 * v2 * v2 - v2 * v2 * v2 / 7.0)


def _int_cdf_np(v):
    vc = np.clip(v, -1.0, 1.0)
    v2 = vc * vc
    inner = 0.5 * vc + 35.0 / 32.0 * v2 * (0.5 - 0.25 * v2 + 0.1 * v2 * v2 - v2 * v2 * v2 / 56.0) + 35.0 / 256.0
    return np.where(v <= -1.0, 0.0, np.where(v >= 1.0, v, inner))


def ramp(t, w: float = RAMP_MOLLIFIER):
    """Vectorised (psi, psi')."""
    t = np.asarray(t, dtype=np.float64)
    inv = 1.0 / (1.0 - 2.0 * w)
    a, b = (t - w) / w, (t - 1.0 + w) / w
    val = inv * w * (_int_cdf_np(a) - _int_cdf_np(b))
    der = inv * (_cdf_np(a) - _cdf_np(b))
    val = np.where(t <= 0, 0.0, np.where(t >= 1, 1.0, val))
    der = np.where((t <= 0) | (t >= 1), 0.0, der)
    return val, der


RAMP_SLOPE_MAX = 1.0 / (1.0 - 2.0 * RAMP_MOLLIFIER)


# --------------------------------------------------------------------------
# profile kernels
# --------------------------------------------------------------------------

@njit
def profile_point(xp, centers, lo, shape, strides, order, cell_start, offsets, s, w, grad):
    """m at one point; grad m is written into ``grad``."""
    d = xp.shape[0]
    P = 1.0
    for k in range(d):
        grad[k] = 0.0
    for o in range(offsets.shape[0]):
        flat = 0
        ok = True
        for k in range(d):
            c = int(math.floor(xp[k] - lo[k])) + offsets[o, k]
            if c < 0 or c >= shape[k]:
                ok = False
                break
            flat += c * strides[k]
        if not ok:
            continue
        for q in range(cell_start[flat], cell_start[flat + 1]):
            j = order[q]
            r2 = 0.0
            for k in range(d):
                t = xp[k] - centers[j, k]
                r2 += t * t
            if r2 >= 0.25:
                continue
            r = math.sqrt(r2)
            val, der = ramp_scalar((0.5 - r) / s, w)
            # (P, grad P) <- (P (1 - psi), grad P (1 - psi) - P grad psi); grad holds -grad P
            for k in range(d):
                gpsi = 0.0
                if r > 0.0:
                    gpsi = -der * (xp[k] - centers[j, k]) / (r * s)
                grad[k] = grad[k] * (1.0 - val) + P * gpsi
            P *= 1.0 - val
    return 1.0 - P


@njit
def _profile_numba(x, centers, lo, shape, strides, order, cell_start, offsets, s, w):
    n, d = x.shape
    m = np.zeros(n)
    grad = np.zeros((n, d))
    for p in range(n):
        m[p] = profile_point(x[p], centers, lo, shape, strides, order, cell_start, offsets, s, w, grad[p])
    return m, grad


def _profile_numpy(x, centers, index: CellIndex, s, w):
    cand = index.candidates(x)  # (n, K) -1 padded
    valid = cand >= 0
    c = centers[np.where(valid, cand, 0)]  # (n, K, d)
    diff = x[:, None, :] - c
    r = np.sqrt((diff ** 2).sum(axis=2))
    valid &= r < 0.5
    val, der = ramp((0.5 - r) / s, w)
    val = np.where(valid, val, 0.0)
    der = np.where(valid, der, 0.0)
    one_minus = 1.0 - val
    P = np.prod(one_minus, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        gpsi = np.where((r > 0)[..., None], -der[..., None] * diff / (np.where(r > 0, r, 1.0)[..., None] * s), 0.0)
    # grad P = sum_i (-grad psi_i) prod_{j != i} (1 - psi_j), product of others computed without division
    n, K = one_minus.shape
    prefix = np.cumprod(np.concatenate([np.ones((n, 1)), one_minus[:, :-1]], axis=1), axis=1)
    tail = np.cumprod(one_minus[:, ::-1], axis=1)[:, ::-1]  # prod_{j >= i}
    suffix = np.concatenate([tail[:, 1:], np.ones((n, 1))], axis=1)
    others = prefix * suffix
    gP = -(gpsi * others[..., None]).sum(axis=1)
    return 1.0 - P, -gP


# --------------------------------------------------------------------------
# field
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientField:
    """Isotropic field a = m^2/2 Id, sigma = m Id.

    ``centers`` is None for a spatially constant profile ``m = constant``.
    """

    centers: np.ndarray | None
    smoothing_radius: float
    constant: float = 1.0
    index: CellIndex | None = None
    box_half_width: float | None = None
    max_overlap: int = 1  # upper bound on the number of balls covering any point
    period: float | None = None  # torus side; coordinates are wrapped into [lo, lo + period)
    period_lo: np.ndarray | None = None

    def wrap(self, x: np.ndarray) -> np.ndarray:
        if self.period is None:
            return x
        return self.period_lo + np.mod(x - self.period_lo, self.period)

    @property
    def is_constant(self) -> bool:
        return self.centers is None

    @property
    def c5(self) -> float:
        return C5

    @property
    def lipschitz_sigma(self) -> float:
        """|grad m| <= sum of the ramp slopes of the balls covering x."""
        return 0.0 if self.is_constant else self.max_overlap * RAMP_SLOPE_MAX / self.smoothing_radius

    def profile(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(m, grad m) at the rows of x."""
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        if self.is_constant:
            return np.full(len(x), float(self.constant)), np.zeros_like(x)
        if len(self.centers) == 0:
            return np.zeros(len(x)), np.zeros_like(x)
        idx = self.index
        x = np.ascontiguousarray(self.wrap(x))
        if _accel.use_numba():
            return _profile_numba(x, self.centers, idx.lo, idx.shape, idx.strides, idx.order,
                                  idx.cell_start, idx.offsets, self.smoothing_radius, RAMP_MOLLIFIER)
        return _profile_numpy(x, self.centers, idx, self.smoothing_radius, RAMP_MOLLIFIER)

    def sigma(self, x) -> np.ndarray:
        return self.profile(x)[0]

    def a(self, x) -> np.ndarray:
        """Scalar lambda(x) with a(x) = lambda(x) Id."""
        m, _ = self.profile(x)
        return 0.5 * m * m

    def xi(self, x) -> np.ndarray:
        return self.a(x)

    def div_a(self, x) -> np.ndarray:
        m, g = self.profile(x)
        return m[:, None] * g

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(sigma, lambda, div a)."""
        m, g = self.profile(x)
        return m, 0.5 * m * m, m[:, None] * g

    def kernel_args(self, d: int):
        """(is_constant, m0, s, period, period_lo, centers, lo, shape, strides, order, cell_start, offsets)."""
        per = 0.0 if self.period is None else float(self.period)
        plo = np.zeros(d) if self.period_lo is None else np.asarray(self.period_lo, dtype=np.float64)
        if self.is_constant or len(self.centers) == 0:
            m0 = float(self.constant) if self.is_constant else 0.0
            z = np.zeros(1, dtype=np.int64)
            return (True, m0, 1.0, per, plo, np.zeros((0, d)), np.zeros(d), np.ones(d, np.int64),
                    np.ones(d, np.int64), z, np.zeros(2, np.int64), np.zeros((1, d), np.int64))
        i = self.index
        return (False, 1.0, float(self.smoothing_radius), per, plo, self.centers, i.lo, i.shape, i.strides,
                i.order, i.cell_start, i.offsets)

    @property
    def dimension(self) -> int | None:
        return None if self.centers is None else self.centers.shape[1]


def constant_field(m: float = 1.0) -> CoefficientField:
    if not 0.0 <= m <= 1.0:
        raise ValueError("constant profile must lie in [0, 1]")
    return CoefficientField(None, 1.0, float(m))


def build_degenerate_field(graph, component: int | None = None, smoothing_radius: float = 0.25) -> CoefficientField:
    """Field supported on the closure of one component (default: the unbounded proxy)."""
    if not smoothing_radius > 0:
        raise ValueError("smoothing_radius must be positive")
    if smoothing_radius > 0.5:
        raise ValueError("smoothing_radius must not exceed the ball radius 1/2")
    comp = graph.unbounded_proxy if component is None else component
    if comp is None:
        raise ValueError("no component to build the field on")
    nodes = graph.component_nodes(comp)
    if len(nodes) == 0:
        raise ValueError("component is empty")
    centers = np.ascontiguousarray(graph.config.points[nodes])
    box = graph.config.box
    from scipy.spatial import cKDTree

    if graph.period is not None:
        # periodic images of the balls that reach within 1 of a face
        side = graph.period
        base = box.lo + np.mod(centers - box.lo, side)
        d = centers.shape[1]
        imgs = []
        for shift in np.array(np.meshgrid(*[[-1, 0, 1]] * d, indexing="ij")).reshape(d, -1).T:
            moved = base + side * shift
            keep = np.all((moved > box.lo - 1.0) & (moved < box.hi + 1.0), axis=1)
            imgs.append(moved[keep])
        ext = np.ascontiguousarray(np.concatenate(imgs))
        index = CellIndex.build(ext, box.lo - 1.0, box.hi + 1.0)
        wrapped = np.mod(base - box.lo, side)
        deg = cKDTree(wrapped, boxsize=side).query_ball_point(wrapped, 1.0, return_length=True)
        return CoefficientField(ext, float(smoothing_radius), 1.0, index, box.half_width, int(deg.max()),
                                float(side), np.asarray(box.lo, dtype=np.float64))
    index = CellIndex.build(centers, box.lo, box.hi)
    # balls sharing a point have pairwise centre distance < 1, so all lie within 1 of any one of them
    deg = cKDTree(centers).query_ball_point(centers, 1.0, return_length=True)
    return CoefficientField(centers, float(smoothing_radius), 1.0, index, box.half_width, int(deg.max()))


# --------------------------------------------------------------------------
# drift fields
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftField:
    """b(x) = b0 + sum_j amp_j cos(<k_j, x> + phase_j)."""

    b0: np.ndarray
    wavevectors: np.ndarray  # (J, d)
    phases: np.ndarray  # (J,)
    amplitudes: np.ndarray  # (J, d)

    @classmethod
    def constant(cls, b) -> "DriftField":
        b = np.asarray(b, dtype=np.float64).ravel()
        d = len(b)
        return cls(b, np.zeros((0, d)), np.zeros(0), np.zeros((0, d)))

    @classmethod
    def zero(cls, d: int) -> "DriftField":
        return cls.constant(np.zeros(d))

    @classmethod
    def random_fourier(cls, d: int, n_modes: int, amplitude: float, seed: int, kmax: float = 2.0,
                       b0=None) -> "DriftField":
        rng = np.random.default_rng(seed)
        k = rng.uniform(-kmax, kmax, size=(n_modes, d))
        ph = rng.uniform(0, 2 * np.pi, size=n_modes)
        amp = rng.normal(size=(n_modes, d))
        amp *= amplitude / np.sqrt(max(n_modes, 1))
        base = np.zeros(d) if b0 is None else np.asarray(b0, dtype=np.float64)
        return cls(base, k, ph, amp)

    @property
    def is_constant(self) -> bool:
        return len(self.phases) == 0

    @property
    def sup_bound(self) -> float:
        return float(np.linalg.norm(self.b0) + np.linalg.norm(self.amplitudes, axis=1).sum())

    @property
    def lipschitz(self) -> float:
        return float((np.linalg.norm(self.amplitudes, axis=1) * np.linalg.norm(self.wavevectors, axis=1)).sum())

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.broadcast_to(self.b0, x.shape).copy()
        if not self.is_constant:
            out += np.cos(x @ self.wavevectors.T + self.phases) @ self.amplitudes
        return out

    def to_record(self) -> dict:
        return {"b0": self.b0.tolist(), "wavevectors": self.wavevectors.tolist(),
                "phases": self.phases.tolist(), "amplitudes": self.amplitudes.tolist()}


# --------------------------------------------------------------------------
# Hamiltonians
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HamiltonianSpec:
    """H(x, p) as a function of lambda = a(x), the drift b(x) and p.

    kind = "quadratic": H = lambda (|p|^2/2 + <b, p>)
    kind = "power":     H = coef/alpha * (lambda |p|^2)^(alpha/2)
    kind = "custom":    H = h_fn(lambda, p), with optional L_fn(lambda, q)

    ``divergence_drift`` adds (1/2) div a(x) . p (non-divergence rewrite).
    """

    kind: str = "quadratic"
    drift: DriftField | None = None
    alpha: float = 2.0
    coef: float = 1.0
    h_fn: Callable | None = None
    l_fn: Callable | None = None
    divergence_drift: bool = False

    def __post_init__(self):
        if self.kind not in ("quadratic", "power", "custom"):
            raise ValueError(f"unknown Hamiltonian kind {self.kind!r}")
        if self.kind == "custom" and self.h_fn is None:
            raise ValueError("custom Hamiltonian needs h_fn")
        if self.kind == "power" and not self.alpha > 1:
            raise ValueError("power Hamiltonian needs alpha > 1")

    def b(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.drift is None:
            return np.zeros_like(x, dtype=np.float64)
        return self.drift(x)

    # --- pointwise formulas in terms of (lambda, b, p) ---------------------
    def h(self, lam, b, p) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "quadratic":
            return lam * (0.5 * (p * p).sum(-1) + (b * p).sum(-1))
        if self.kind == "power":
            return self.coef / self.alpha * (lam * (p * p).sum(-1)) ** (0.5 * self.alpha)
        return np.asarray(self.h_fn(lam, p), dtype=np.float64)

    def dh_dp(self, lam, b, p) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "quadratic":
            return lam[..., None] * (p + b)
        if self.kind == "power":
            q2 = (p * p).sum(-1)
            fac = self.coef * lam ** (0.5 * self.alpha) * np.where(q2 > 0, q2, 1.0) ** (0.5 * self.alpha - 1.0)
            return np.where((q2 > 0)[..., None], fac[..., None] * p, 0.0)
        eps = 1e-6
        out = np.empty(np.broadcast_shapes(np.shape(p)), dtype=np.float64)
        for k in range(p.shape[-1]):
            dp = np.zeros(p.shape[-1])
            dp[k] = eps
            out[..., k] = (self.h_fn(lam, p + dp) - self.h_fn(lam, p - dp)) / (2 * eps)
        return out

    def lagrangian(self, lam, b, q) -> np.ndarray:
        """L(q) = sup_p [<p, q>_a - H(p)] with <p, q>_a = lambda p.q."""
        lam = np.asarray(lam, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        if self.kind == "quadratic":
            return 0.5 * lam * ((q - b) ** 2).sum(-1)
        if self.kind == "power":
            return _power_conjugate(lam, np.sqrt((q * q).sum(-1)), self.alpha, self.coef)
        if self.l_fn is not None:
            return np.asarray(self.l_fn(lam, q), dtype=np.float64)
        return _grid_conjugate(self, lam, b, q)

    def p_lipschitz(self, lam, b, p_bound: float) -> np.ndarray:
        """Bound on |dH/dp_k| for |p|_inf <= p_bound (used for Lax-Friedrichs dissipation)."""
        lam = np.asarray(lam, dtype=np.float64)
        if self.kind == "quadratic":
            return lam[..., None] * (p_bound + np.abs(b))
        d = np.shape(b)[-1]
        if self.kind == "power":
            r = p_bound * math.sqrt(d)
            val = self.coef * lam ** (0.5 * self.alpha) * r ** (self.alpha - 1.0)
            return np.repeat(val[..., None], d, axis=-1)
        # custom: sample the gradient on the corners and centre of the cube
        corners = np.array(list(np.ndindex(*(3,) * d)), dtype=float) - 1.0
        best = np.zeros(np.shape(lam) + (d,))
        for c in corners:
            pc = np.broadcast_to(c * p_bound, np.shape(lam) + (d,))
            best = np.maximum(best, np.abs(self.dh_dp(lam, b, pc)))
        return 2.0 * best


def quadratic_spec(b=None, d: int = 2) -> HamiltonianSpec:
    if b is None:
        drift = DriftField.zero(d)
    elif isinstance(b, DriftField):
        drift = b
    else:
        drift = DriftField.constant(b)
    return HamiltonianSpec("quadratic", drift)


def _power_conjugate(lam, qnorm, alpha, coef, tol=1e-13, max_iter=100):
    """Radial Newton solve of sup_r [lam r |q| - coef/alpha (lam r^2)^(alpha/2)]."""
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), np.shape(qnorm)).copy()
    qnorm = np.asarray(qnorm, dtype=np.float64)
    out = np.zeros_like(qnorm)
    live = (lam > 0) & (qnorm > 0)
    if not np.any(live):
        return out
    l, q = lam[live], qnorm[live]
    k = coef * l ** (0.5 * alpha)
    # stationarity l q = k r^(alpha-1), solved for s = log r by Newton
    target = np.log(l * q / k)
    s = target / (alpha - 1.0) + 0.5
    for _ in range(max_iter):
        f = (alpha - 1.0) * s - target
        step = f / (alpha - 1.0)
        s = s - step
        if np.all(np.abs(step) < tol * np.maximum(1.0, np.abs(s))):
            break
    else:
        raise ConjugationError("radial Newton iteration did not converge")
    r = np.exp(s)
    out[live] = l * r * q - k / alpha * r ** alpha
    if not np.all(np.isfinite(out)):
        raise ConjugationError("non-finite conjugate")
    return out


def _grid_conjugate(spec: HamiltonianSpec, lam, b, q, p_max: float = 20.0, n: int = 201):
    from scipy.optimize import minimize

    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    b = np.broadcast_to(np.atleast_2d(b), q.shape)
    d = q.shape[1]
    out = np.empty(len(q))
    axis = np.linspace(-p_max, p_max, n if d == 1 else 41)
    grid = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), -1).reshape(-1, d)
    for i in range(len(q)):
        if lam[i] == 0:
            out[i] = 0.0 if np.allclose(spec.h(0.0, b[i], grid), 0) else -np.min(spec.h(0.0, b[i], grid))
            continue
        vals = lam[i] * grid @ q[i] - spec.h(np.full(len(grid), lam[i]), b[i], grid)
        j = int(np.argmax(vals))
        if np.any(np.abs(grid[j]) >= p_max - 1e-12):
            raise ConjugationError("conjugate supremum not attained inside the search box")
        res = minimize(lambda p: -(lam[i] * p @ q[i] - float(spec.h(lam[i], b[i], p))), grid[j], method="BFGS")
        if not res.success and res.status != 2:
            raise ConjugationError(res.message)
        out[i] = max(-res.fun, vals[j])
    return out


def eval_H(spec: HamiltonianSpec, field: CoefficientField, x, p) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), x.shape)
    _, lam, diva = field.evaluate(x)
    out = spec.h(lam, spec.b(x), p)
    if spec.divergence_drift:
        out = out + 0.5 * (diva * p).sum(-1)
    return out


def eval_L(spec: HamiltonianSpec, field: CoefficientField, x, q) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q = np.broadcast_to(np.asarray(q, dtype=np.float64), x.shape)
    lam = field.a(x)
    return spec.lagrangian(lam, spec.b(x), q)


def nondivergence_form(field: CoefficientField, spec: HamiltonianSpec) -> HamiltonianSpec:
    """H_hat(x, p) = H(x, p) + (1/2) div a(x) . p."""
    return replace(spec, divergence_drift=True)


# --------------------------------------------------------------------------
# assumption checks
# --------------------------------------------------------------------------

def chi_exponent(alpha: float, gamma: float, delta: float) -> float:
    return 0.5 * alpha * max((1 + delta) / (alpha - (1 + delta)), gamma / (alpha - 1))


@dataclass
class AssumptionReport:
    checks: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def add(self, name, passed, **info):
        self.checks[name] = {"passed": bool(passed), **info}

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values() if not c.get("informational"))

    def flagged(self) -> list[str]:
        return [k for k, c in self.checks.items() if not c["passed"] and not c.get("informational")]


def validate_assumptions(field: CoefficientField, spec: HamiltonianSpec, probe_budget: int = 1000,
                         seed: int = 0, half_width: float | None = None, graph=None,
                         gamma: float | None = None, delta: float = 0.5) -> AssumptionReport:
    """Fit the structural constants of the field and Hamiltonian on random probes."""
    if probe_budget < 1000:
        raise ValueError("probe_budget must be >= 1000")
    rng = np.random.default_rng(seed)
    if field.is_constant:
        d = spec.drift.b0.shape[0] if spec.drift is not None else 2
    else:
        d = field.centers.shape[1]
    L = half_width if half_width is not None else (field.box_half_width or 5.0)
    x = rng.uniform(-L, L, size=(probe_budget, d))
    rep = AssumptionReport()
    sig, lam, diva = field.evaluate(x)
    alpha = spec.alpha if spec.kind == "power" else 2.0

    rep.add("psd", lam.min() >= 0.0, value=float(lam.min()))
    rep.add("upper_ellipticity", lam.max() <= field.c5 + 1e-15, value=float(lam.max()), bound=field.c5)
    rep.constants["c5"] = field.c5

    if graph is not None and not field.is_constant:
        outside = ~graph.contains(None, x)
        rep.add("support", np.all(lam[outside] == 0.0), value=float(np.abs(lam[outside]).max(initial=0.0)))

    # Lipschitz moduli of sigma and div a from short random secants
    step = 1e-4
    u = rng.normal(size=x.shape)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    sig2, _, diva2 = field.evaluate(x + step * u)
    lip_sigma = float(np.max(np.abs(sig2 - sig)) / step)
    lip_diva = float(np.max(np.linalg.norm(diva2 - diva, axis=1)) / step)
    rep.constants["lipschitz_sigma"] = lip_sigma
    rep.constants["lipschitz_div_a"] = lip_diva
    rep.add("sigma_lipschitz", lip_sigma <= field.lipschitz_sigma * (1 + 1e-3) + 1e-9, value=lip_sigma,
            recorded=field.lipschitz_sigma)
    rep.add("div_a_bounded", np.isfinite(np.abs(diva).max()), value=float(np.linalg.norm(diva, axis=1).max()))

    # convexity of p -> H(x, +-p): midpoint inequality
    b = spec.b(x)
    p1 = rng.normal(scale=2.0, size=x.shape)
    p2 = rng.normal(scale=2.0, size=x.shape)
    worst = 0.0
    for sgn in (1.0, -1.0):
        mid = spec.h(lam, b, sgn * 0.5 * (p1 + p2))
        avg = 0.5 * (spec.h(lam, b, sgn * p1) + spec.h(lam, b, sgn * p2))
        worst = max(worst, float(np.max(mid - avg)))
    rep.add("convexity", worst <= 1e-12, value=worst)

    # growth constants c6..c9 on cluster probes (lambda > 0)
    live = lam > 0
    if np.any(live):
        pn = rng.normal(scale=3.0, size=(int(live.sum()), d))
        hv = spec.h(lam[live], b[live], pn)
        an = np.sqrt(lam[live] * (pn * pn).sum(1)) ** alpha
        c7 = max(0.0, float(-np.min(hv - 0.0)))
        if spec.kind == "quadratic":
            bb = lam[live] * (b[live] ** 2).sum(1)
            c7 = float(bb.max())  # H >= ||p||^2/4 - ||b||_a^2
            c9 = float(bb.max())
        else:
            c9 = max(0.0, float(np.max(hv - an * np.max(hv / np.maximum(an, 1e-300)))))
        good = an > 1e-12
        c6 = float(np.min((hv[good] + c7) / an[good])) if good.any() else float("nan")
        c8 = float(np.max((hv[good] - c9) / an[good])) if good.any() else float("nan")
        rep.constants.update(c6=c6, c7=c7, c8=c8, c9=c9)
        rep.add("growth", c6 > 0 and np.isfinite(c8), c6=c6, c7=c7, c8=c8, c9=c9)

        # H2': |H(p) - H(q)| <= c16 (|p| + |q| + 1)^(alpha-1) |p - q|
        qn = pn + rng.normal(scale=0.5, size=pn.shape)
        num = np.abs(spec.h(lam[live], b[live], pn) - spec.h(lam[live], b[live], qn))
        den = (np.linalg.norm(pn, axis=1) + np.linalg.norm(qn, axis=1) + 1) ** (alpha - 1) * np.linalg.norm(pn - qn, axis=1)
        c16 = float(np.max(num / den))
        rep.constants["c16"] = c16
        rep.add("p_lipschitz", np.isfinite(c16), value=c16)

        # moment E_0[xi^-chi] over covered probes; divergence flagged, never failed
        gam = (d + 0.5) if gamma is None else gamma
        chi = chi_exponent(alpha, gam, delta)
        xi = lam[live]
        vals = xi ** (-chi)
        half = vals[: len(vals) // 2].mean() if len(vals) > 1 else vals.mean()
        full = vals.mean()
        diverging = (not np.isfinite(full)) or (full > 10 * half) or (np.max(vals) > 0.5 * vals.sum())
        rep.constants["xi_moment"] = float(full)
        rep.constants["chi"] = chi
        rep.add("xi_moment", not diverging, value=float(full), chi=chi, informational=True,
                note="heavy boundary layer" if diverging else "")
    return rep
