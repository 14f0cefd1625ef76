"""Critical points of the Toda energy and diagnostics on the solutions.

``minimize_coercive`` runs a spectral gradient flow followed by Newton-Krylov
steps with an energy line search; ``find_critical`` runs damped Newton on the
residual from a supplied guess.  Also here: continuation in ``rho``, local
mass extraction at blow-up points, quantization tables and the discrete set
of critical parameters for singular weights.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.sparse.linalg import LinearOperator, gmres

from .cartan import CartanSpec, SystemState, energy, energy_gradient, residual, sup_norm
from .torus import TorusPoint, as_point, pairwise_distance


class SolverError(RuntimeError):
    """Raised when an iteration fails; carries the last residual."""

    def __init__(self, message: str, last_residual: float = np.nan, history=None):
        super().__init__(f"{message} (last residual {last_residual:.3e})")
        self.last_residual = last_residual
        self.history = history or []


@dataclass
class SolveOptions:
    method: str = "flow-then-newton"
    dt: float = 0.05
    tol: float = 1e-8
    max_iters: int = 200
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-8
    switch_tol: float = 1e-1
    max_flow_steps: int = 100
    gmres_rtol: float = 1e-3
    gmres_restart: int = 40

    def __post_init__(self):
        if self.method not in ("flow", "newton", "flow-then-newton"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.dt <= 0 or self.tol <= 0:
            raise ValueError("dt and tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolveReport:
    state: SystemState
    converged: bool
    iterations: int
    residual: float
    energy: float
    history: list = field(default_factory=list)  # dicts: kind, energy, residual, step


# -- building blocks ------------------------------------------------------------

def _flow_step(state: SystemState, dt: float) -> SystemState:
    """Integrating-factor Euler step of ``du/dt = lap u + A rho (f - 1)``."""
    g = state.grid
    f = state.densities()
    nonlin = np.einsum("ij,jxy->ixy", state.spec.a, state.rho[:, None, None] * (f - 1.0))
    sym = g.symbol
    decay = np.exp(-sym * dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(sym > 0, -np.expm1(-sym * dt) / sym, dt)
    u_new = np.real(np.fft.ifft2(decay * np.fft.fft2(state.u) + phi * np.fft.fft2(nonlin)))
    return state.with_u(u_new)


def jacobian_action(state: SystemState, v: np.ndarray, f: np.ndarray | None = None) -> np.ndarray:
    """Derivative of :func:`residual` applied to ``v``."""
    g = state.grid
    f = state.densities() if f is None else f
    lap = np.array([g.laplacian(vi) for vi in v])
    fv = f * v
    inner = fv.reshape(f.shape[0], -1).mean(axis=1)
    lin = state.rho[:, None, None] * (fv - f * inner[:, None, None])
    return -lap - np.einsum("ij,jxy->ixy", state.spec.a, lin)


def _newton_direction(state: SystemState, R: np.ndarray, opts: SolveOptions) -> np.ndarray:
    g = state.grid
    shape = state.u.shape
    f = state.densities()
    prec = 1.0 / (g.symbol + 1.0)

    def mv(x):
        v = g.zero_mean(x.reshape(shape))
        return g.zero_mean(jacobian_action(state, v, f)).ravel()

    def pre(x):
        xh = np.fft.fft2(x.reshape(shape))
        return g.zero_mean(np.real(np.fft.ifft2(prec * xh))).ravel()

    n = R.size
    A = LinearOperator((n, n), matvec=mv, dtype=float)
    M = LinearOperator((n, n), matvec=pre, dtype=float)
    v, info = gmres(A, -g.zero_mean(R).ravel(), rtol=opts.gmres_rtol, M=M,
                    restart=opts.gmres_restart, maxiter=20)
    if info < 0 or not np.all(np.isfinite(v)):
        raise SolverError("Krylov solve broke down", sup_norm(R))
    return g.zero_mean(v.reshape(shape))


def _rho_margin_ok(spec: CartanSpec, rho) -> bool:
    thr = spec.coercivity_thresholds()
    return bool(np.all(np.asarray(rho) <= 0.99 * thr))


def on_critical_lattice(spec: CartanSpec, rho, atol: float = 1e-9) -> bool:
    """``rho_i`` is a positive multiple of ``8 pi / a_ii`` for some ``i``."""
    q = np.asarray(rho, dtype=float) / spec.coercivity_thresholds()
    k = np.round(q)
    return bool(np.any((k >= 1) & np.isclose(q, k, rtol=0, atol=atol)))


def _energy_tol(J: float) -> float:
    # J is a sum of O(1) terms; differences below this are rounding noise
    return 64 * np.finfo(float).eps * max(1.0, abs(J))


# -- coercive minimization ------------------------------------------------------

def minimize_coercive(state: SystemState, opts: SolveOptions | None = None,
                      return_report: bool = False):
    """Minimize the energy for parameters strictly inside the coercive range.

    The energy is asserted nonincreasing along accepted steps.  Raises
    :class:`SolverError` when ``max_iters`` is exhausted.
    """
    opts = opts or SolveOptions()
    if not _rho_margin_ok(state.spec, state.rho):
        raise ValueError(f"rho={state.rho.tolist()} is not 1% below the coercivity thresholds "
                         f"{state.spec.coercivity_thresholds().tolist()}")
    report = _minimize(state, opts)
    return report if return_report else report.state


def _minimize(state: SystemState, opts: SolveOptions) -> SolveReport:
    J = energy(state)
    R = residual(state)
    r = sup_norm(R)
    hist = [{"kind": "start", "energy": J, "residual": r, "step": 0.0}]
    dt = opts.dt
    it = 0
    phase = "newton" if opts.method == "newton" else "flow"
    flow_steps = 0
    while r >= opts.tol:
        if it >= opts.max_iters:
            raise SolverError(f"no convergence in {opts.max_iters} iterations", r, hist)
        it += 1
        if phase == "flow":
            while True:
                trial = _flow_step(state, dt)
                Jt = energy(trial)
                if Jt <= J + _energy_tol(J):
                    break
                dt *= opts.backtrack
                if dt < opts.min_step:
                    raise SolverError("flow step size collapsed", r, hist)
            state, step = trial, dt
            dt = min(dt * 1.5, 10 * opts.dt)
            flow_steps += 1
            kind = "flow"
            if opts.method == "flow-then-newton" and (r < opts.switch_tol or flow_steps >= opts.max_flow_steps):
                phase = "newton"
        else:
            grad = energy_gradient(state)
            v = _newton_direction(state, R, opts)
            slope = state.grid.integrate(np.sum(grad * v, axis=0))
            if not slope < 0:
                # not a descent direction for J; fall back to the flow for this step
                phase = "flow"
                it -= 1
                continue
            alpha = 1.0
            while True:
                trial = state.with_u(state.u + alpha * v)
                try:
                    Jt = energy(trial)
                except FloatingPointError:
                    Jt = np.inf
                if Jt <= J + opts.armijo * alpha * slope + _energy_tol(J):
                    break
                alpha *= opts.backtrack
                if alpha < opts.min_step:
                    raise SolverError("line search failed", r, hist)
            state, step, kind = trial, alpha, "newton"
        if Jt > J + _energy_tol(J):
            raise AssertionError(f"energy increased from {J} to {Jt}")
        J = Jt
        R = residual(state)
        r = sup_norm(R)
        hist.append({"kind": kind, "energy": J, "residual": r, "step": float(step)})
    return SolveReport(state, True, it, r, J, hist)


# -- general critical points -------------------------------------------------------

def validate_solution(state: SystemState) -> float:
    """Residual recomputed through the energy gradient (independent code path)."""
    grad = energy_gradient(state)
    return sup_norm(np.einsum("ij,jxy->ixy", state.spec.s, grad))


def find_critical(state: SystemState, opts: SolveOptions | None = None,
                  return_report: bool = False):
    """Damped Newton on the residual starting from ``state.u``."""
    opts = opts or SolveOptions(method="newton")
    if on_critical_lattice(state.spec, state.rho):
        raise ValueError(f"rho={state.rho.tolist()} lies on the critical lattice")
    R = residual(state)
    r = sup_norm(R)
    norm = float(np.sqrt(np.mean(R**2)))
    hist = [{"kind": "start", "energy": energy(state), "residual": r, "step": 0.0}]
    it = 0
    while r >= opts.tol:
        if it >= opts.max_iters:
            raise SolverError(f"no convergence in {opts.max_iters} iterations", r, hist)
        it += 1
        v = _newton_direction(state, R, opts)
        alpha = 1.0
        while True:
            trial = state.with_u(state.u + alpha * v)
            Rt = residual(trial)
            nt = float(np.sqrt(np.mean(Rt**2))) if np.all(np.isfinite(Rt)) else np.inf
            if nt <= (1.0 - opts.armijo * alpha) * norm:
                break
            alpha *= opts.backtrack
            if alpha < opts.min_step:
                raise SolverError("Newton iteration diverged (no residual decrease)", r, hist)
        state, R, norm = trial, Rt, nt
        r = sup_norm(R)
        hist.append({"kind": "newton", "energy": energy(state), "residual": r, "step": alpha})
    check = validate_solution(state)
    if not check < max(10 * opts.tol, 1e-12):
        raise SolverError("independent residual check failed", check, hist)
    report = SolveReport(state, True, it, r, energy(state), hist)
    return report if return_report else report.state


# -- continuation ---------------------------------------------------------------

CONCENTRATION_THRESHOLD = 8.0


def blowup_monitor(state: SystemState) -> float:
    """``max_i max_x (u_i - log int h_i e^{u_i})``."""
    logint = state.log_integrals()
    return float(max(np.max(state.u[i]) - logint[i] for i in range(state.u.shape[0])))


@dataclass
class ContinuationStep:
    rho: list
    success: bool
    state: SystemState | None
    residual: float
    energy: float
    monitor: float
    concentrating: bool
    message: str = ""

    def to_row(self) -> dict:
        row = {f"rho_{i + 1}": r for i, r in enumerate(self.rho)}
        row.update(success=self.success, residual=self.residual, energy=self.energy,
                   monitor=self.monitor, concentrating=self.concentrating, message=self.message)
        return row


def continuation(state: SystemState, rho_path: Sequence, opts: SolveOptions | None = None,
                 solver: str = "critical") -> list:
    """Solve along ``rho_path``, warm-starting each step from the last success."""
    opts = opts or SolveOptions(method="newton")
    out = []
    current = state
    for rho in rho_path:
        rho = [float(x) for x in np.atleast_1d(rho)]
        start = current.with_rho(rho)
        try:
            if solver == "minimize":
                rep = minimize_coercive(start, opts, return_report=True)
            else:
                rep = find_critical(start, opts, return_report=True)
        except (SolverError, ValueError, FloatingPointError) as exc:
            last = getattr(exc, "last_residual", np.nan)
            out.append(ContinuationStep(rho, False, None, float(last), np.nan, np.nan, False, str(exc)))
            continue
        mon = blowup_monitor(rep.state)
        out.append(ContinuationStep(rho, True, rep.state, rep.residual, rep.energy, mon,
                                    mon > CONCENTRATION_THRESHOLD))
        current = rep.state
    return out


# -- local masses and quantization ------------------------------------------------

DEFAULT_RADII = (0.2, 0.1, 0.05, 0.025)

QUANTIZATION_TABLES = {
    "B2": [(4, 0), (0, 4), (4, 12), (8, 4), (12, 12), (8, 16), (12, 16)],
    "G2": [(4, 0), (0, 4), (4, 16), (8, 4), (8, 24)],
}
NON_QUANTIZED_DISTANCE = 0.5 * np.pi


@dataclass
class Classification:
    center: tuple
    sigma: tuple
    entry: tuple  # in units of pi
    distance: float
    quantized: bool

    def to_dict(self) -> dict:
        return {"center": list(self.center), "sigma": list(self.sigma),
                "entry_over_pi": list(self.entry), "distance": self.distance,
                "quantized": self.quantized}


@dataclass
class MassReport:
    centers: np.ndarray  # (m, 2)
    radii: np.ndarray
    masses: np.ndarray  # (m, n_radii, N): rho_i * int_{B_r(x)} f_i
    rho: np.ndarray
    table: str | None = None
    classifications: list = field(default_factory=list)

    def sigma_at_smallest(self) -> np.ndarray:
        return self.masses[:, -1, :]

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist(),
                "masses": self.masses.tolist(), "rho": self.rho.tolist(), "table": self.table,
                "classifications": [c.to_dict() for c in self.classifications]}


def blowup_centers(state: SystemState, max_centers: int = 8, min_separation: float = 0.1) -> np.ndarray:
    """Local maxima of ``u_i - log int h_i e^{u_i}``, strongest first, well separated."""
    g = state.grid
    logint = state.log_integrals()
    cands = []
    for i in range(state.u.shape[0]):
        w = state.u[i] - logint[i]
        peak = (w == maximum_filter(w, size=5, mode="wrap"))
        ix, iy = np.nonzero(peak)
        cands += [(w[a, b], a / g.n, b / g.n) for a, b in zip(ix, iy)]
    cands.sort(key=lambda c: -c[0])
    kept = []
    for _, x, y in cands:
        if all(pairwise_distance([x, y], [p])[0, 0] >= min_separation for p in kept):
            kept.append((x, y))
        if len(kept) >= max_centers:
            break
    return np.array(kept, dtype=float).reshape(-1, 2)


def local_masses(state: SystemState, centers=None, radii: Sequence[float] = DEFAULT_RADII) -> MassReport:
    g = state.grid
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be strictly decreasing")
    if np.any(radii <= 2 * g.spacing):
        raise ValueError(f"radii must exceed two grid spacings ({2 * g.spacing})")
    if centers is None:
        centers = blowup_centers(state)
    centers = np.array([tuple(as_point(c)) for c in centers], dtype=float).reshape(-1, 2)
    f = state.densities()
    masses = np.zeros((len(centers), len(radii), f.shape[0]))
    for c, p in enumerate(centers):
        d = g.distance_to(p)
        for k, r in enumerate(radii):
            inside = d <= r
            masses[c, k] = state.rho * np.array([g.integrate(fi * inside) for fi in f])
    masses = np.minimum(masses, state.rho[None, None, :])
    return MassReport(centers, radii, masses, state.rho.copy())


def classify_point(sigma, variant: str) -> tuple[tuple, float, bool]:
    table = np.array(QUANTIZATION_TABLES[variant.upper()], dtype=float) * np.pi
    dist = np.hypot(*(table - np.asarray(sigma, float)[None, :]).T)
    k = int(np.argmin(dist))
    entry = tuple(int(v) for v in QUANTIZATION_TABLES[variant.upper()][k])
    return entry, float(dist[k]), bool(dist[k] <= NON_QUANTIZED_DISTANCE)


def classify_quantization(report: MassReport, variant: str) -> list:
    """Nearest table entry for the masses at the smallest radius of each center."""
    v = variant.upper()
    if v not in QUANTIZATION_TABLES:
        raise ValueError(f"no quantization table for {variant!r}")
    if v == "G2":
        lim = 4 * np.pi * np.array([2 + np.sqrt(2), 5 + np.sqrt(7)])
        if np.any(report.rho >= lim):
            raise ValueError(f"rho={report.rho.tolist()} is outside the validity window {lim.tolist()}")
    out = []
    for c, sig in zip(report.centers, report.sigma_at_smallest()):
        entry, dist, ok = classify_point(sig, v)
        out.append(Classification(tuple(float(x) for x in c), tuple(float(s) for s in sig), entry, dist, ok))
    report.table = v
    report.classifications = out
    return out


# -- singular critical set ------------------------------------------------------

def lambda_set(singularities: Sequence[Sequence[float]], rho_max: float) -> list:
    """Values ``4 pi (n_0 + sum_m n_m (1 + alpha_m))`` in ``(0, rho_max]``.

    ``singularities`` holds one list of orders per component; every order
    contributes a generator ``1 + alpha``.
    """
    alphas = [float(a) for comp in singularities for a in comp]
    if any(a < 0 for a in alphas):
        raise ValueError("singularity orders must be nonnegative")
    if rho_max <= 0:
        raise ValueError("rho_max must be positive")
    bound = rho_max / (4.0 * np.pi)
    gens = sorted({1.0} | {1.0 + a for a in alphas})
    reach = {0.0}
    for gen in gens:
        reach = {r + k * gen for r in reach for k in range(int(np.floor((bound - r) / gen + 1e-12)) + 1)}
    units = sorted(v for v in reach if 0 < v <= bound * (1 + 1e-12))
    dedup = []
    for v in units:
        if not dedup or v - dedup[-1] > 1e-9 * max(1.0, v):
            dedup.append(v)
    return [4.0 * np.pi * v for v in dedup]


# -- principal-block domination ----------------------------------------------------

@dataclass
class DominationResult:
    subset: tuple
    min_eigenvalue: float
    max_violation: float
    C: np.ndarray

    @property
    def passed(self) -> bool:
        return self.min_eigenvalue >= -1e-10 and self.max_violation <= 1e-10


def matrix_domination_check(A, I: Sequence[int], trials: int = 1000, seed: int = 0) -> DominationResult:
    """Compare ``x_I . (A_II)^{-1} x_I`` with ``x . A^{-1} x`` (0-based ``I``)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or not np.allclose(A, A.T, rtol=0, atol=1e-12):
        raise ValueError("A must be a symmetric square matrix")
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise ValueError("A must be positive definite") from None
    I = tuple(sorted({int(i) for i in I}))
    if not I or I[0] < 0 or I[-1] >= A.shape[0]:
        raise ValueError(f"invalid index subset {I}")
    Ainv = np.linalg.inv(A)
    Binv = np.linalg.inv(A[np.ix_(I, I)])
    pad = np.zeros_like(A)
    pad[np.ix_(I, I)] = Binv
    C = Ainv - pad
    C = 0.5 * (C + C.T)
    min_eig = float(np.linalg.eigvalsh(C).min())
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((trials, A.shape[0]))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    viol = np.einsum("ti,ij,tj->t", x, pad, x) - np.einsum("ti,ij,tj->t", x, Ainv, x)
    return DominationResult(I, min_eig, float(max(viol.max(), 0.0)), C)


def all_subsets(N: int):
    for r in range(1, N + 1):
        yield from itertools.combinations(range(N), r)
