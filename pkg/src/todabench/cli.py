"""Batch driver: ``toda-bench <subcommand> --config run.toml [--set key=value]``.

Exit status 0 on success, 1 when the configuration or a precondition is
rejected, 2 when a numerical procedure fails.
"""

from __future__ import annotations

import argparse
import ast
import copy
import hashlib
import json
import platform
import sys
from dataclasses import fields as dc_fields
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import formula, io
from ._compat import tomllib
from .bubbles import (BarycenterConfig, JoinPoint, check_rho_window, energy_divergence_sweep,
                      resolution_ok, sample_barycenter, test_map, verify_average_estimate,
                      verify_exp_estimate, verify_grad_estimate, bubble)
from .cartan import CartanSpec, SystemState, energy, mt_deficit
from .concentration import (DiscreteMeasure, covering_merge, fit_barycenter, join_coordinates, unit_density,
                            validate_cover)
from .fitting import linear_fit
from .parallel import ordered_map
from .solver import (DEFAULT_RADII, SolveOptions, SolverError, all_subsets, classify_quantization,
                     continuation, find_critical, lambda_set, local_masses, matrix_domination_check,
                     minimize_coercive)
from .torus import TorusGrid

COMMANDS = ("energy-scan", "testfn-sweep", "solve", "mt-check", "concentrate", "quantize",
            "lambda-set", "matrix-check")


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p!r} is not a table")
    node[parts[-1]] = _parse_value(value.strip())


def number(v, what: str = "value") -> float:
    """Numbers may be given as constant expressions such as ``"6*pi"``."""
    if isinstance(v, bool):
        raise ConfigError(f"{what}: expected a number")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return formula._const(ast.parse(v.strip(), mode="eval").body)
        except (SyntaxError, formula.FormulaError):
            pass
    raise ConfigError(f"{what}: cannot read {v!r} as a number")


def numbers(v, what: str) -> list:
    if not isinstance(v, (list, tuple)):
        v = [v]
    return [number(x, what) for x in v]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _version(pkg: str) -> str:
    try:
        return metadata.version(pkg)
    except metadata.PackageNotFoundError:
        return "unknown"


class Run:
    """Resolved configuration plus output helpers."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.seed = int(cfg.get("seed", 0))
        self.out = Path(cfg.get("output", f"toda-bench-{command}"))
        self._written = []

    # lazily validated pieces
    def grid(self) -> TorusGrid:
        n = self.cfg.get("grid", {}).get("n", 128)
        try:
            return TorusGrid(int(n))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"grid.n: {exc}") from None

    def spec(self) -> CartanSpec:
        c = self.cfg.get("cartan", "B2")
        try:
            return CartanSpec.from_config(c)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"cartan: {exc}") from None

    def rho(self, spec: CartanSpec, key: str = "rho") -> np.ndarray:
        if key not in self.cfg:
            raise ConfigError(f"missing '{key}'")
        r = np.array(numbers(self.cfg[key], key))
        if r.shape != (spec.n_components,):
            raise ConfigError(f"{key}: expected {spec.n_components} values")
        if np.any(r <= 0):
            raise ConfigError(f"{key}: values must be positive")
        return r

    def weights(self, grid: TorusGrid, N: int) -> np.ndarray:
        hc = self.cfg.get("h", {})
        if isinstance(hc, str):
            hc = {"preset": hc}
        if "formula" in hc:
            f = hc["formula"]
            f = [f] * N if isinstance(f, str) else list(f)
            if len(f) != N:
                raise ConfigError(f"h.formula: expected {N} formulas")
            h = np.array([formula.evaluate(s, grid) for s in f])
        elif "csv" in hc:
            paths = hc["csv"]
            paths = [paths] * N if isinstance(paths, str) else list(paths)
            h = np.array([io.read_field_csv(p) for p in paths])
            if h.shape[1:] != grid.shape:
                raise ConfigError("h.csv: field size differs from grid.n")
        else:
            preset = hc.get("preset", "uniform")
            if preset != "uniform":
                raise ConfigError(f"h.preset: unknown preset {preset!r}")
            h = np.ones((N,) + grid.shape)
        for s in hc.get("singularities", []):
            comp = int(s.get("component", 1)) - 1
            if not 0 <= comp < N:
                raise ConfigError(f"h.singularities: bad component {comp + 1}")
            alpha = number(s.get("alpha", 0.0), "alpha")
            if alpha < 0:
                raise ConfigError("h.singularities: alpha must be >= 0")
            p = numbers(s["point"], "point")
            h[comp] = grid.singular_weight(h[comp], [(tuple(p), alpha)])
        if np.any(h < 0) or np.any(h.reshape(N, -1).max(axis=1) <= 0):
            raise ConfigError("h: weights must be nonnegative and not identically zero")
        return h

    def solve_options(self, default_method: str) -> SolveOptions:
        sc = dict(self.cfg.get("solver", {}))
        names = {f.name for f in dc_fields(SolveOptions)}
        kw = {k: v for k, v in sc.items() if k in names}
        kw.setdefault("method", default_method)
        try:
            return SolveOptions(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"solver: {exc}") from None

    def lambdas(self, section: str, grid: TorusGrid, guard: bool = True) -> np.ndarray:
        sec = self.cfg.get(section, {})
        lam = np.array(numbers(sec.get("lambdas", [8, 16, 32, 64, 128, 256]), f"{section}.lambdas"))
        if np.any(lam <= 0):
            raise ConfigError(f"{section}.lambdas must be positive")
        if guard and not resolution_ok(grid, lam.max()):
            raise ConfigError(f"resolution guard: lambda_max * spacing = {lam.max() / grid.n:.3g} "
                              f"exceeds 1/4; increase grid.n to at least {int(4 * lam.max())}")
        return lam

    def zetas(self, section: str, N: int, grid: TorusGrid) -> list:
        """Join points from explicit atoms or seeded samples on the circles."""
        sec = self.cfg.get(section, {})
        K = [int(k) for k in sec.get("K", [1] * N)]
        if len(K) != N or min(K) < 1:
            raise ConfigError(f"{section}.K: expected {N} positive integers")
        ts = sec.get("t", [0.5])
        tvecs = []
        for t in ts:
            tv = [1.0 - number(t), number(t)] if not isinstance(t, list) else numbers(t, "t")
            if len(tv) != N or min(tv) < 0 or abs(sum(tv) - 1) > 1e-12:
                raise ConfigError(f"{section}.t: {t!r} is not a simplex point")
            tvecs.append(tv)
        rng = np.random.default_rng(self.seed)
        if "atoms" in sec:
            atoms = sec["atoms"]
            if len(atoms) != N:
                raise ConfigError(f"{section}.atoms: one atom list per component")
            sig_sets = [[BarycenterConfig.from_points([tuple(numbers(p, "atom")) for p in comp])
                         for comp in atoms]]
        else:
            n_samples = int(sec.get("samples", 1))
            sig_sets = [[sample_barycenter(rng, K[i], (2 * i + 1) / (2 * N), grid) for i in range(N)]
                        for _ in range(n_samples)]
        return [JoinPoint(tuple(s), tuple(t)) for s in sig_sets for t in tvecs], K

    def state_fields(self, spec, grid, rho, h):
        st = self.cfg.get("state", {})
        N = spec.n_components
        if "fields" in st:
            u = np.array([io.read_field_csv(p) for p in st["fields"]])
            if u.shape != (N,) + grid.shape:
                raise ConfigError("state.fields: wrong number or size of fields")
            return SystemState(spec, grid, u, rho, h)
        if st.get("source", "test_map") == "zero":
            return SystemState.zero(spec, grid, rho, h)
        zetas, _ = self.zetas("state", N, grid)
        lam = number(st.get("lambda", 64), "state.lambda")
        if not resolution_ok(grid, lam):
            raise ConfigError("resolution guard: state.lambda * spacing exceeds 1/4")
        return SystemState(spec, grid, test_map(spec, grid, zetas[0], lam), rho, h)

    # outputs
    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        self._written.append(name)
        return p

    def manifest(self, extra: dict | None = None) -> None:
        m = {"command": self.command, "config": self.cfg, "config_hash": config_hash(self.cfg),
             "seed": self.seed, "files": sorted(set(self._written)),
             "versions": {"python": platform.python_version(), "numpy": np.__version__,
                          "scipy": scipy.__version__, "artifact": _version("artifact")}}
        if extra:
            m.update(extra)
        io.write_json(self.out / "manifest.json", m)


# -- subcommands ----------------------------------------------------------------------

def cmd_energy_scan(run: Run) -> str:
    spec, grid = run.spec(), run.grid()
    N = spec.n_components
    sec = run.cfg.get("energy_scan", {})
    if "rho_grid" not in sec:
        raise ConfigError("energy_scan.rho_grid: list of rho vectors required")
    rhos = [numbers(r, "rho_grid") for r in sec["rho_grid"]]
    if any(len(r) != N or min(r) <= 0 for r in rhos):
        raise ConfigError("energy_scan.rho_grid: bad rho vector")
    lams = run.lambdas("energy_scan", grid)
    zetas, _ = run.zetas("energy_scan", N, grid)
    h = run.weights(grid, N)

    def point(args):
        z_idx, lam = args
        u = test_map(spec, grid, zetas[z_idx], lam)
        return [{"zeta": z_idx, "lambda": lam, **{f"rho_{i + 1}": r[i] for i in range(N)},
                 "J": energy(SystemState(spec, grid, u, r, h))} for r in rhos]

    rows = [r for chunk in ordered_map(point, [(z, l) for z in range(len(zetas)) for l in lams])
            for r in chunk]
    io.write_rows(run.path("energy_scan.csv"), rows)
    run.manifest()
    return f"{len(rows)} energies written"


def cmd_testfn_sweep(run: Run) -> str:
    spec, grid = run.spec(), run.grid()
    N = spec.n_components
    rho = run.rho(spec)
    lams = run.lambdas("sweep", grid)
    zetas, K = run.zetas("sweep", N, grid)
    check_rho_window(spec, rho, K)
    h = run.weights(grid, N)
    sw = energy_divergence_sweep(spec, grid, rho, zetas, lams, K, h)
    io.write_rows(run.path("sweep.csv"), [dict(r, t=";".join(map(repr, r["t"]))) for r in sw.rows])
    slopes = [{"zeta": k, "slope": f.slope, "r2": f.r2, "intercept": f.intercept,
               "predicted": p, "decreasing_from": d}
              for k, (f, p, d) in enumerate(zip(sw.fits, sw.predicted, sw.decreasing_from))]
    io.write_rows(run.path("slopes.csv"), slopes)

    grads = ordered_map(lambda z: verify_grad_estimate(spec, grid, z, lams, K), zetas)
    grad_rows = []
    for k, g in enumerate(grads):
        for j, lam in enumerate(g.lambdas):
            row = {"zeta": k, "lambda": lam, "Q": g.measured[j], "leading": g.leading[j]}
            for p, (a, b) in enumerate(g.pairs):
                row[f"cross_{a + 1}{b + 1}"] = g.cross[j, p]
            grad_rows.append(row)
    io.write_rows(run.path("grad.csv"), grad_rows)

    first = zetas[0]
    avg = [verify_average_estimate(grid, s, lams) for s in first.sigmas if s is not None]
    sv = np.array([[l1, l2] for l1 in lams for l2 in lams])[:, :N] if N == 2 else \
        np.outer(lams, np.ones(N))
    exp_rep = verify_exp_estimate(spec, grid, first.sigmas, sv, h)
    summary = {
        "energy_slopes": slopes,
        "grad": [{"slope": g.fit.slope, "r2": g.fit.r2, "constant": g.constant,
                  "cross_slopes": [f.slope for f in g.cross_fits]} for g in grads],
        "average": [{"slope": a.fit.slope if a.fit else None, "r2": a.fit.r2 if a.fit else None}
                    for a in avg],
        "exp": {"fitted": [f.coef.tolist() for f in exp_rep.fits],
                "predicted": exp_rep.predicted.tolist(), "max_error": exp_rep.max_error()},
    }
    io.write_json(run.path("estimates.json"), summary)
    run.manifest()
    return "; ".join(f"zeta {s['zeta']}: slope {s['slope']:.4f} (predicted {s['predicted']:.4f}, "
                     f"R2 {s['r2']:.4f})" for s in slopes)


def _write_state(run: Run, st: SystemState, prefix: str) -> None:
    for i, ui in enumerate(st.u):
        io.write_field_csv(run.path(f"{prefix}u{i + 1}.csv"), ui)


def cmd_solve(run: Run) -> str:
    spec, grid = run.spec(), run.grid()
    N = spec.n_components
    sec = run.cfg.get("solver", {})
    mode = sec.get("mode", "minimize")
    h = run.weights(grid, N)
    if mode == "continuation":
        path = [numbers(r, "rho_path") for r in sec.get("rho_path", [])]
        if any(len(r) != N or min(r) <= 0 for r in path):
            raise ConfigError("solver.rho_path: bad rho vector")
        rho0 = path[0] if path else [1.0] * N
        opts = run.solve_options("newton")
        start = run.state_fields(spec, grid, rho0, h) if "state" in run.cfg else \
            SystemState.zero(spec, grid, rho0, h)
        steps = continuation(start, path, opts, solver=sec.get("solver", "critical"))
        io.write_rows(run.path("continuation.csv"), [s.to_row() for s in steps])
        for k, s in enumerate(steps):
            if s.success:
                _write_state(run, s.state, f"step{k:03d}_")
        run.manifest({"options": opts.to_dict()})
        ok = sum(s.success for s in steps)
        return f"continuation: {ok}/{len(steps)} steps converged"
    rho = run.rho(spec)
    st = run.state_fields(spec, grid, rho, h) if "state" in run.cfg else SystemState.zero(spec, grid, rho, h)
    if mode == "minimize":
        opts = run.solve_options("flow-then-newton")
        rep = minimize_coercive(st, opts, return_report=True)
    elif mode == "critical":
        opts = run.solve_options("newton")
        rep = find_critical(st, opts, return_report=True)
    else:
        raise ConfigError(f"solver.mode: unknown mode {mode!r}")
    _write_state(run, rep.state, "")
    io.write_rows(run.path("history.csv"), rep.history)
    io.write_json(run.path("result.json"), {"energy": rep.energy, "residual": rep.residual,
                                            "iterations": rep.iterations, "rho": rho})
    run.manifest({"options": opts.to_dict()})
    return f"converged in {rep.iterations} iterations, residual {rep.residual:.3e}, J = {rep.energy:.10g}"


def cmd_mt_check(run: Run) -> str:
    grid = run.grid()
    sec = run.cfg.get("mt", {})
    variant = sec.get("variant", "scalar")
    lams = run.lambdas("mt", grid)
    atom = tuple(numbers(sec.get("atom", [0.5, 0.5]), "mt.atom"))
    cfg = BarycenterConfig.from_points([atom])
    rows = []
    if variant == "scalar":
        for lam in lams:
            rows.append({"lambda": lam, "deficit": mt_deficit(grid, bubble(grid, cfg, lam))})
    else:
        spec = run.spec() if "cartan" in run.cfg else CartanSpec.preset(variant)
        zetas, _ = run.zetas("mt", spec.n_components, grid)
        for lam in lams:
            u = test_map(spec, grid, zetas[0], lam)
            rows.append({"lambda": lam, "deficit": mt_deficit(grid, u, variant, spec)})
    fit = linear_fit(np.log(lams), [r["deficit"] for r in rows])
    io.write_rows(run.path("mt_deficit.csv"), rows)
    io.write_json(run.path("mt_fit.json"), {"variant": variant, **fit.to_dict(),
                                            "max_deficit": max(r["deficit"] for r in rows)})
    run.manifest()
    return f"{variant}: log-lambda slope {fit.slope:.4f}, max deficit {max(r['deficit'] for r in rows):.4f}"


def cmd_concentrate(run: Run) -> str:
    spec, grid = run.spec(), run.grid()
    N = spec.n_components
    sec = run.cfg.get("concentrate", {})
    rho = run.rho(spec) if "rho" in run.cfg else np.ones(N)
    h = run.weights(grid, N)
    st = run.state_fields(spec, grid, rho, h)
    K = [int(k) for k in sec.get("K", [1] * N)]
    eps = number(sec.get("eps", 0.3), "concentrate.eps")
    n_starts = int(sec.get("n_starts", 8))
    if n_starts < 8:
        raise ConfigError("concentrate.n_starts must be >= 8")
    out = {"components": []}
    for i in range(N):
        mu = unit_density(st, i)
        fit = fit_barycenter(mu, K[i], n_starts, run.seed)
        io.write_measure_csv(run.path(f"barycenter_{i + 1}.csv"),
                             DiscreteMeasure(fit.config.points, fit.config.weights))
        out["components"].append({"distance": fit.distance, "K": K[i],
                                  "atoms": fit.config.points, "weights": fit.config.weights})
    try:
        jc = join_coordinates(st, eps, K, n_starts=n_starts, seed=run.seed)
        out["join"] = {"t": list(jc.join.t), "distances": jc.distances,
                       "sigmas": [None if s is None else {"points": s.points, "weights": s.weights}
                                  for s in jc.join.sigmas]}
    except ValueError as exc:
        out["join"] = {"error": str(exc)}
    if "cover_delta" in sec:
        delta = number(sec["cover_delta"], "concentrate.cover_delta")
        radius = number(sec.get("cover_radius", 0.05), "concentrate.cover_radius")
        dens = st.densities()
        regions = [[grid.distance_to(p) <= radius for p in np.array(c["atoms"])] for c in out["components"]]
        cov = covering_merge(grid, delta, regions, dens)
        for k, m in enumerate(cov.regions):
            io.write_pbm(run.path(f"cover_region_{k}.pbm"), m)
        out["cover"] = dict(cov.summary(), problems=validate_cover(grid, cov, dens, K))
    io.write_json(run.path("concentration.json"), out)
    run.manifest()
    return "distances " + ", ".join(f"{c['distance']:.5f}" for c in out["components"])


def cmd_quantize(run: Run) -> str:
    spec, grid = run.spec(), run.grid()
    N = spec.n_components
    sec = run.cfg.get("quantize", {})
    rho = run.rho(spec)
    h = run.weights(grid, N)
    st = run.state_fields(spec, grid, rho, h)
    radii = numbers(sec.get("radii", list(DEFAULT_RADII)), "quantize.radii")
    centers = sec.get("centers")
    if centers is not None:
        centers = [tuple(numbers(c, "center")) for c in centers]
    rep = local_masses(st, centers, radii)
    variant = sec.get("variant", spec.name if spec.name in ("B2", "G2") else "B2")
    classify_quantization(rep, variant)
    io.write_json(run.path("masses.json"), rep.to_dict())
    run.manifest()
    return "; ".join(f"({c.sigma[0] / np.pi:.3f}pi, {c.sigma[1] / np.pi:.3f}pi) -> "
                     + (f"{c.entry} at {c.distance / np.pi:.3f}pi" if c.quantized else "non-quantized")
                     for c in rep.classifications)


def cmd_lambda_set(run: Run) -> str:
    sec = run.cfg.get("lambda_set", {})
    if "rho_max" not in sec:
        raise ConfigError("lambda_set.rho_max is required")
    rho_max = number(sec["rho_max"], "lambda_set.rho_max")
    sing = [numbers(c, "alpha") if c else [] for c in sec.get("singularities", [])]
    vals = lambda_set(sing, rho_max)
    io.write_rows(run.path("lambda_set.csv"), [{"value": v, "over_pi": v / np.pi} for v in vals],
                  ["value", "over_pi"])
    run.manifest()
    return ", ".join(f"{v:.6g}" for v in vals) or "(empty)"


def cmd_matrix_check(run: Run) -> str:
    spec = run.spec()
    sec = run.cfg.get("matrix_check", {})
    trials = int(sec.get("trials", 1000))
    rows = []
    for I in all_subsets(spec.n_components):
        r = matrix_domination_check(spec.s, I, trials, run.seed)
        rows.append({"subset": " ".join(str(i + 1) for i in I), "min_eigenvalue": r.min_eigenvalue,
                     "max_violation": r.max_violation, "pass": r.passed})
    io.write_rows(run.path("matrix_check.csv"), rows)
    run.manifest()
    worst = max(r["max_violation"] for r in rows)
    ok = all(r["pass"] for r in rows)
    tag = "< 1e-12" if worst < 1e-12 else f"= {worst:.3e}"
    return f"{'pass' if ok else 'FAIL'}, max violation {tag}"


HANDLERS = {
    "energy-scan": cmd_energy_scan, "testfn-sweep": cmd_testfn_sweep, "solve": cmd_solve,
    "mt-check": cmd_mt_check, "concentrate": cmd_concentrate, "quantize": cmd_quantize,
    "lambda-set": cmd_lambda_set, "matrix-check": cmd_matrix_check,
}


def load_config(path, overrides=()) -> dict:
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    cfg = copy.deepcopy(cfg)
    for a in overrides:
        apply_override(cfg, a)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toda-bench", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (dotted keys, TOML values)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        run = Run(args.command, cfg)
        msg = HANDLERS[args.command](run)
    except (SolverError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"toda-bench {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"toda-bench {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 1
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
