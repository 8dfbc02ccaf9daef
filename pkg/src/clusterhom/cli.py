"""Command-line experiment runner.

    clusterhom <sample|solve|effective|ldp|corrector|converge> --config run.yaml [--out DIR]
               [--workers N] [--seed-override S]

Exit status: 0 success, 1 validation failure, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import _accel
from . import config as cfgmod
from .cluster import build_periodic_cluster_graph, volume_fraction
from .coefficients import DriftField, HamiltonianSpec, build_degenerate_field, constant_field, quadratic_spec
from .config import ConfigError, ExperimentConfig
from .environment import (BoxDomain, condition_on_origin, conditioned_ensemble, lattice_arrival_samples,
                          sample_poisson, tail_fit)
from .hjb import CFLError

log = logging.getLogger("clusterhom")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
SUBCOMMANDS = ("sample", "solve", "effective", "ldp", "corrector", "converge")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# --------------------------------------------------------------------------
# output handling
# --------------------------------------------------------------------------

class Outputs:
    """Files are staged in a hidden directory and moved into place only on success."""

    def __init__(self, root: Path, subcommand: str):
        self.root = root
        self.sub = subcommand
        self.stage = root / f".partial-{subcommand}-{os.getpid()}"
        self.files: list[str] = []
        self.manifest_name = f"{subcommand}/manifest.json"

    def __enter__(self):
        self.stage.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        for name in self.files + [self.manifest_name]:
            dst = self.root / name
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self.stage / name, dst)
        shutil.rmtree(self.stage, ignore_errors=True)
        return False

    def write(self, name: str, text: str) -> None:
        path = self.stage / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        if name not in self.files:
            self.files.append(name)

    def json(self, name: str, obj) -> None:
        self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def csv(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) for v in r])
        self.write(name, buf.getvalue())

    def manifest(self, cfg: ExperimentConfig, extra: dict) -> None:
        entries = []
        for name in sorted(self.files):
            data = (self.stage / name).read_bytes()
            entries.append({"name": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        rec = {"schema": "clusterhom.manifest/1", "subcommand": self.sub, "config_sha256": cfg.digest(),
               "config": cfg.to_dict(), "seeds": list(cfg.environment.seeds), "backend": _accel.backend(),
               "files": entries, **extra}
        (self.stage / self.manifest_name).parent.mkdir(parents=True, exist_ok=True)
        (self.stage / self.manifest_name).write_text(json.dumps(rec, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if hasattr(o, "__dict__"):
        return o.__dict__
    raise TypeError(f"not serialisable: {type(o)}")


# --------------------------------------------------------------------------
# shared builders
# --------------------------------------------------------------------------

def build_spec(cfg: ExperimentConfig) -> HamiltonianSpec:
    d = cfg.environment.dimension
    b = cfg.field.drift
    if cfg.field.spec == "quadratic":
        return quadratic_spec(b, d)
    drift = DriftField.zero(d) if b is None else DriftField.constant(b)
    return HamiltonianSpec("power", drift, alpha=cfg.field.power)


def build_environment(cfg: ExperimentConfig, seed: int):
    """(configuration, graph, field); the first two are None for the constant environment."""
    env = cfg.environment
    if env.constant:
        return None, None, constant_field(1.0)
    box = BoxDomain(env.dimension, env.half_width)
    if env.periodic:
        conf = sample_poisson(env.intensity, box, seed)
        graph = build_periodic_cluster_graph(conf)
    else:
        conf, graph = condition_on_origin(env.intensity, box, seed)
    return conf, graph, build_degenerate_field(graph, smoothing_radius=cfg.field.smoothing_radius)


def _linear(theta):
    th = np.asarray(theta, dtype=np.float64)
    return lambda X: np.atleast_2d(X) @ th


def _analytic_hbar(cfg: ExperimentConfig, theta) -> float | None:
    """H-bar in the constant environment with lambda = 1/2 (quadratic spec only)."""
    if not cfg.environment.constant or cfg.field.spec != "quadratic":
        return None
    th = np.asarray(theta, dtype=np.float64)
    b = np.zeros_like(th) if cfg.field.drift is None else np.asarray(cfg.field.drift, dtype=np.float64)
    return float(0.5 * (0.5 * th @ th + b @ th))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_sample(cfg: ExperimentConfig, out: Outputs, workers: int | None) -> dict:
    from . import svg

    env = cfg.environment
    if env.constant:
        raise ConfigError("environment.constant", "sample needs a percolation environment")
    rows, tails = [], {}
    rhos = np.arange(1, 11, dtype=float)
    for seed in env.seeds:
        conf, graph, _ = build_environment(cfg, seed)
        prox = graph.unbounded_proxy
        size = graph.component_size(prox) if prox is not None else 0
        vf = volume_fraction(graph, prox, conf.box.lo, conf.box.hi, seed=seed)
        out.write(f"sample/configuration_seed{seed}.json", conf.to_json())
        out.csv(f"sample/edges_seed{seed}.csv", ["i", "j"], graph.edges.tolist())
        window = 0.5 * env.half_width
        n1 = lattice_arrival_samples(graph, window) if graph.period is None else np.zeros(0)
        fit = tail_fit(n1, rhos) if len(n1) else {}
        tails[seed] = fit
        rows.append([seed, len(conf.points), graph.n_components, size, vf, int(graph.ambiguous), len(n1),
                     fit.get("r2", math.nan), fit.get("slope", math.nan)])
    out.csv("sample/stats.csv", ["seed", "n_points", "n_components", "proxy_size", "volume_fraction",
                                 "ambiguous", "n_arrival_samples", "tail_r2", "tail_slope"], rows)
    out.json("sample/tail_fits.json", {str(k): v for k, v in tails.items()})
    series = {f"seed {s}": (np.asarray(f["rho"]), np.asarray(f["frequency"])) for s, f in tails.items() if f}
    if series:
        out.write("sample/tail.svg", svg.line_plot(series, "P(n1 > rho)", "rho", "probability", logy=True))
    return {}


def cmd_solve(cfg: ExperimentConfig, out: Outputs, workers: int | None) -> dict:
    from .diffusion import Control
    from .hjb import Grid, solve_hjb_control_mc, solve_hjb_fd

    so = cfg.solver
    spec = build_spec(cfg)
    seed = cfg.environment.seeds[0]
    _, graph, fld = build_environment(cfg, seed)
    f = _linear(so.theta)
    x = np.asarray(so.x, dtype=np.float64)
    rows, timing = [], {}
    for eps in so.epsilons:
        h = cfgmod.solver_h(cfg, eps)
        grid = Grid.build(fld, eps, so.half_width, h, d=cfg.environment.dimension, dt=so.dt)
        sol = solve_hjb_fd(fld, spec, f, eps, so.T, grid, cfl=so.cfl)
        timing[str(eps)] = sol.runtime
        rows.append([eps, h, sol.dt, sol.n_steps, sol.value_at(x), sol.p_bound, sol.p_max_observed])
    out.csv("solve/fd.csv", ["epsilon", "h", "dt", "n_steps", "u_T_x", "p_bound", "p_max"], rows)
    eps = min(so.epsilons)
    theta = np.asarray(so.theta, dtype=np.float64)
    controls = [Control.constant(theta * s) for s in (0.0, 0.5, 1.0)]
    mc = solve_hjb_control_mc(fld, spec, f, eps, so.T, x, controls, so.mc_paths, so.mc_dt, seed=seed,
                              graph=graph)
    fd_val = rows[-1][4]
    rec = {"epsilon": eps, "mc_value": mc.value, "mc_se": mc.se, "best_control": mc.best, "fd_value": fd_val,
           "mc_below_fd_plus_3se": bool(mc.value - 3 * mc.se <= fd_val),
           "analytic": None if _analytic_hbar(cfg, theta) is None
           else float(theta @ x + so.T * _analytic_hbar(cfg, theta))}
    out.json("solve/control_mc.json", rec)
    return {"timing": timing}


def _theta_grid(cfg: ExperimentConfig) -> np.ndarray:
    from .effective import theta_grid

    return theta_grid(cfg.environment.dimension, cfg.effective.directions, cfg.effective.radii,
                      include_zero=False)


def _fk_table(cfg, fld, spec, thetas, workers, seed):
    from .diffusion import sample_cluster_points
    from .effective import feynman_kac_table

    ef = cfg.effective
    x0 = None
    if not cfg.environment.constant:
        x0 = sample_cluster_points(fld, cfg.environment.half_width, ef.fk_paths, seed=seed)
    return feynman_kac_table(fld, spec.drift, thetas, ef.fk_T, ef.fk_paths, dt=ef.fk_dt, seed=seed, x0=x0,
                             workers=workers)


def cmd_effective(cfg: ExperimentConfig, out: Outputs, workers: int | None) -> dict:
    from . import svg
    from .effective import equivalence_check, hopf_lax, legendre_transform, variational_table

    ef = cfg.effective
    spec = build_spec(cfg)
    thetas = _theta_grid(cfg)
    summary = []
    for seed in cfg.environment.seeds:
        _, _, fld = build_environment(cfg, seed)
        half = cfg.environment.half_width
        var = variational_table(fld, spec, thetas, half_width=half, h=ef.h, betas=tuple(ef.betas),
                                maxiter=ef.maxiter, support_ratio=ef.support_ratio)
        out.write(f"effective/variational_seed{seed}.csv", var.to_csv())
        rows = []
        if spec.kind == "quadratic":
            fk = _fk_table(cfg, fld, spec, thetas, workers, seed)
            out.write(f"effective/feynman_kac_seed{seed}.csv", fk.to_csv())
            rows = equivalence_check(fk, var)
            out.csv(f"effective/equivalence_seed{seed}.csv",
                    ["theta0", "theta1", "feynman_kac", "se", "variational", "gap", "holds", "finite_size_flag"],
                    [[r.theta[0], r.theta[1], r.feynman_kac, r.feynman_kac_se, r.variational, r.gap,
                      int(r.holds), int(r.finite_size_flag)] for r in rows])
            base = fk
        else:
            base = var
        rate = legendre_transform(base)
        out.write(f"effective/rate_seed{seed}.csv", rate.to_csv())
        theta0 = thetas[0]
        hl = hopf_lax(_linear(theta0), rate, ef.hopf_lax_t, np.zeros(len(theta0)))
        summary.append({"seed": seed, "all_hold": all(r.holds for r in rows) if rows else None,
                        "hopf_lax_value": hl.value, "hopf_lax_on_edge": hl.boundary,
                        "convex": bool(base.is_convex(1e-6))})
        ang = np.arctan2(thetas[:, 1], thetas[:, 0])
        order = np.argsort(ang)
        series = {"variational": (ang[order], var.values[order])}
        if rows:
            series["feynman-kac"] = (ang[order], base.values[order])
        out.write(f"effective/hbar_seed{seed}.svg", svg.line_plot(series, "H-bar on the theta circle",
                                                                  "angle", "H-bar"))
    out.json("effective/summary.json", summary)
    return {}


def cmd_ldp(cfg: ExperimentConfig, out: Outputs, workers: int | None) -> dict:
    from . import svg
    from .diffusion import tilted_rate_function
    from .effective import legendre_transform

    ld = cfg.ldp
    spec = build_spec(cfg)
    if spec.kind != "quadratic":
        raise ConfigError("field.spec", "ldp needs the quadratic Hamiltonian")
    d = cfg.environment.dimension
    seed = cfg.environment.seeds[0]
    _, _, fld = build_environment(cfg, seed)
    e = np.zeros(d)
    e[0] = 1.0
    v = np.array([s * e for s in ld.speeds])
    # the FK table needs theta = 0 and the slopes dual to the requested speeds (2v when H-bar = |theta|^2/4)
    thetas = np.vstack([np.zeros(d), _theta_grid(cfg), 2 * v[np.any(v != 0, axis=1)]])
    fk = _fk_table(cfg, fld, spec, thetas, workers, seed)
    dual = legendre_transform(fk, velocities=v)
    emp = tilted_rate_function(fld, spec.drift, v, dual.argmax, ld.T, ld.n_paths, dt=ld.dt, seed=seed,
                               radius=ld.radius, workers=workers)
    rows = [[*vi, ie, se, il] for vi, ie, se, il in zip(v, emp.values, emp.errors, dual.values)]
    out.csv("ldp/rate.csv", [f"v{k}" for k in range(d)] + ["I_empirical", "se", "I_legendre"], rows)
    out.write("ldp/rate.svg", svg.line_plot({"empirical": (v[:, 0], emp.values),
                                             "Legendre of FK": (v[:, 0], dual.values)},
                                            "rate function along e1", "speed", "I"))
    return {}


def cmd_corrector(cfg: ExperimentConfig, out: Outputs, workers: int | None) -> dict:
    from . import svg
    from . import corrector as cr

    co = cfg.corrector
    env = cfg.environment
    if env.constant or env.periodic:
        raise ConfigError("environment", "corrector diagnostics need a conditioned (non-periodic) sample")
    d = env.dimension
    seed = env.seeds[0]
    _, graph, _ = build_environment(cfg, seed)
    G = cr.random_spline_gradient(d, co.support, h=co.spline_h, seed=seed)
    fields = {"spline-gradient": G, "constant": cr.constant_gradient(np.eye(d)[0]),
              "rotational": cr.rotational_field()}
    loops = {k: cr.closed_loop_residual(graph, F, n_loops=co.n_loops, seed=seed, window=max(co.radii)).to_record()
             for k, F in fields.items()}
    out.json("corrector/loops.json", loops)
    scans = {}
    for k in ("spline-gradient", "constant"):
        rep = cr.sublinearity_scan(graph, fields[k], co.radii, density=co.probe_density, seed=seed,
                                   epsilons=(co.epsilon,))
        scans[k] = rep
        out.write(f"corrector/sublinearity_{k}.csv", rep.to_csv())
    out.write("corrector/sublinearity.svg", svg.line_plot({k: (r.radii, r.ratios) for k, r in scans.items()},
                                                          "max |V| / r", "r", "ratio"))
    box = BoxDomain(d, co.palm_half_width)
    ens = conditioned_ensemble(env.intensity, box, range(seed, seed + co.palm_configs))
    e = np.eye(d)[0]
    means = {"environment-gradient": cr.induced_mean(ens, lambda g: cr.environment_gradient(g.config.points), e),
             "constant": cr.induced_mean(ens, fields["constant"], e)}
    out.json("corrector/induced_mean.json",
             {k: {**m.to_record(), "zero_within_3se": m.zero_within()} for k, m in means.items()})
    return {}


def cmd_converge(cfg: ExperimentConfig, out: Outputs, workers: int | None) -> dict:
    from . import svg
    from .diffusion import feynman_kac_Hbar, sample_cluster_points
    from .hjb import convergence_study

    so = cfg.solver
    spec = build_spec(cfg)
    seed = cfg.environment.seeds[0]
    _, _, fld = build_environment(cfg, seed)
    theta = np.asarray(so.theta, dtype=np.float64)
    hbar = _analytic_hbar(cfg, theta)
    source = "analytic"
    if hbar is None:
        if spec.kind != "quadratic":
            raise ConfigError("field.spec", "converge needs the quadratic Hamiltonian outside the constant case")
        ef = cfg.effective
        x0 = sample_cluster_points(fld, cfg.environment.half_width, ef.fk_paths, seed=seed)
        est = feynman_kac_Hbar(fld, spec.drift, theta, ef.fk_T, ef.fk_paths, dt=ef.fk_dt, seed=seed, x0=x0,
                               tilted=True, workers=workers)
        hbar, source = est.value, "feynman_kac"
    table = convergence_study(fld, spec, _linear(theta), so.epsilons, so.T, so.half_width,
                              lambda e: cfgmod.solver_h(cfg, e), lambda t, X: X @ theta + t * hbar)
    rows = [[r.epsilon, r.h, r.n_nodes, r.sup_error] for r in table.rows]
    out.csv("converge/errors.csv", ["epsilon", "h", "n_nodes", "sup_error"], rows)
    out.json("converge/summary.json", {"hbar": hbar, "hbar_source": source, "decreasing": table.decreasing})
    eps = np.array([r[0] for r in rows])
    out.write("converge/errors.svg", svg.line_plot({"sup error": (eps, table.errors)}, "homogenization error",
                                                   "epsilon", "error", logy=True))
    return {"timing": {str(r.epsilon): r.runtime for r in table.rows}}


COMMANDS = {"sample": cmd_sample, "solve": cmd_solve, "effective": cmd_effective, "ldp": cmd_ldp,
            "corrector": cmd_corrector, "converge": cmd_converge}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clusterhom", description="Homogenization experiments on continuum percolation clusters.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="YAML experiment file")
    p.add_argument("--out", help="output directory (overrides output.directory)")
    p.add_argument("--workers", type=int, help="worker processes (default: $CLUSTERHOM_WORKERS or 1)")
    p.add_argument("--seed-override", type=int, help="replace environment.seeds with this single seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers", "must be at least 1")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    root = Path(args.out or cfg.output.directory)
    t0 = time.perf_counter()
    try:
        with Outputs(root, args.subcommand) as out:
            extra = COMMANDS[args.subcommand](cfg, out, args.workers)
            extra = dict(extra or {})
            extra.setdefault("timing", {})
            extra["timing"]["total"] = time.perf_counter() - t0
            out.manifest(cfg, extra)
    except (ConfigError, CFLError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("wrote %d files to %s", len(out.files) + 1, root)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
