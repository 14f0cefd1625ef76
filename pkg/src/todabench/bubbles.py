"""Bubble test functions on joins of barycenter spaces and their asymptotics.

A join point carries one barycenter ``sigma_i`` per component and a simplex
vector ``t``; component ``i`` concentrates at scale ``lambda * t_i``.  The
``verify_*`` helpers sweep the scale and fit log-log slopes against the
predicted exponents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .cartan import CartanSpec, SystemState, energy, quadratic_form
from .fitting import LinearFit, linear_fit
from .torus import TorusGrid, TorusPoint, as_point, pairwise_distance, points_array

CIRCLE_SEPARATION = 0.1


@dataclass(frozen=True)
class BarycenterConfig:
    """Finitely supported probability measure ``sum_k w_k delta_{x_k}``."""

    atoms: tuple

    def __post_init__(self):
        atoms = tuple((as_point(p), float(w)) for p, w in self.atoms)
        if not atoms:
            raise ValueError("a barycenter needs at least one atom")
        w = np.array([a[1] for a in atoms])
        if np.any(w < 0):
            raise ValueError("atom weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"atom weights must sum to 1, got {w.sum()}")
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def from_points(cls, points, weights=None) -> "BarycenterConfig":
        pts = [as_point(p) for p in points]
        if weights is None:
            weights = np.full(len(pts), 1.0 / max(len(pts), 1))
        return cls(tuple(zip(pts, weights)))

    @property
    def points(self) -> np.ndarray:
        return points_array([a[0] for a in self.atoms])

    @property
    def weights(self) -> np.ndarray:
        return np.array([a[1] for a in self.atoms])

    def __len__(self):
        return len(self.atoms)


@dataclass(frozen=True, eq=False)
class JoinPoint:
    """``(sigma_1, ..., sigma_N, t)`` with ``t`` in the unit simplex.

    ``sigma_i`` is irrelevant (and may be ``None``) when ``t_i == 0``.
    """

    sigmas: tuple
    t: tuple

    def __post_init__(self):
        t = tuple(float(v) for v in self.t)
        if len(t) != len(self.sigmas):
            raise ValueError("one simplex coordinate per component is required")
        if min(t) < 0 or abs(sum(t) - 1.0) > 1e-12:
            raise ValueError(f"t must lie in the unit simplex, got {t}")
        for s, ti in zip(self.sigmas, t):
            if s is None and ti > 0:
                raise ValueError("a placeholder barycenter is only allowed where t_i = 0")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "sigmas", tuple(self.sigmas))

    @classmethod
    def pair(cls, sigma1, sigma2, t: float) -> "JoinPoint":
        """Two-component join with the scalar convention ``(t_1, t_2) = (1 - t, t)``."""
        return cls((sigma1, sigma2), (1.0 - t, t))

    @property
    def n_components(self) -> int:
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, JoinPoint) or self.t != other.t:
            return NotImplemented if not isinstance(other, JoinPoint) else False
        return all(ti == 0 or a == b for a, b, ti in zip(self.sigmas, other.sigmas, self.t))

    __hash__ = None


def bubble(grid: TorusGrid, config: BarycenterConfig, s: float) -> np.ndarray:
    """``log sum_k w_k (1 + (s d(., x_k))^2)^(-2)`` evaluated with log-sum-exp."""
    if s < 0:
        raise ValueError("scale must be nonnegative")
    if s == 0:
        return np.zeros(grid.shape)
    terms = []
    for p, w in config.atoms:
        if w == 0:
            continue
        d = grid.distance_to(p)
        terms.append(np.log(w) - 2.0 * np.log1p((s * d) ** 2))
    return logsumexp(np.array(terms), axis=0)


def bubbles(grid: TorusGrid, zeta: JoinPoint, lam: float) -> np.ndarray:
    """Stack of ``phi_i = bubble(sigma_i, lam * t_i)``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    out = np.zeros((zeta.n_components,) + grid.shape)
    for i, (sigma, ti) in enumerate(zip(zeta.sigmas, zeta.t)):
        if ti > 0:
            out[i] = bubble(grid, sigma, lam * ti)
    return out


def combine(spec: CartanSpec, phi: np.ndarray) -> np.ndarray:
    """``u_i = sum_j (a_ij / a_jj) phi_j``."""
    return np.einsum("ij,jxy->ixy", spec.coupling_coefficients(), phi)


def test_map(spec: CartanSpec, grid: TorusGrid, zeta: JoinPoint, lam: float) -> np.ndarray:
    if zeta.n_components != spec.n_components:
        raise ValueError("join point and Cartan matrix have different sizes")
    return combine(spec, bubbles(grid, zeta, lam))


def log_max_scales(zeta_t, lam: float) -> np.ndarray:
    """``log max{1, lam * t_i}``."""
    return np.log(np.maximum(1.0, lam * np.asarray(zeta_t, dtype=float)))


def resolution_ok(grid: TorusGrid, max_scale: float, limit: float = 0.25) -> bool:
    """Bubble cores of radius ``1/scale`` span enough grid cells."""
    return max_scale * grid.spacing <= limit


# -- asymptotic checks --------------------------------------------------------

def gradient_leading_coefficients(spec: CartanSpec, K) -> np.ndarray:
    """Coefficient of ``log max{1, lam t_i}`` in the Dirichlet energy bound."""
    return 16.0 * np.pi * np.asarray(K, dtype=float) / np.diag(spec.s)


def exp_exponents(spec: CartanSpec) -> np.ndarray:
    """Row ``i``: exponents of ``max{1, lam t_j}`` in ``int h_i e^{u_i}``."""
    c = spec.coupling_coefficients()
    e = -4.0 * c
    np.fill_diagonal(e, -2.0)
    return e


def energy_slope_coefficients(spec: CartanSpec, rho, K) -> np.ndarray:
    """Coefficient of each ``log max{1, lam t_i}`` in the energy along the test map."""
    return gradient_leading_coefficients(spec, K) - 2.0 * np.asarray(rho, float) * spec.d


@dataclass
class GradReport:
    lambdas: np.ndarray
    measured: np.ndarray
    leading: np.ndarray
    cross: np.ndarray  # (n_lambda, n_pairs) values of int grad phi_i . grad phi_j
    fit: LinearFit
    cross_fits: list
    pairs: list

    @property
    def deviation(self) -> np.ndarray:
        return self.measured - self.leading

    @property
    def constant(self) -> float:
        return float(np.max(self.deviation))


def verify_grad_estimate(spec: CartanSpec, grid: TorusGrid, zeta: JoinPoint,
                         lambdas: Sequence[float], K) -> GradReport:
    lambdas = np.asarray(lambdas, dtype=float)
    coef = gradient_leading_coefficients(spec, K)
    N = spec.n_components
    pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
    measured, leading, cross = [], [], []
    for lam in lambdas:
        phi = bubbles(grid, zeta, lam)
        measured.append(quadratic_form(spec, grid, combine(spec, phi)))
        leading.append(float(coef @ log_max_scales(zeta.t, lam)))
        cross.append([grid.dirichlet(phi[i], phi[j]) for i, j in pairs])
    measured = np.array(measured)
    cross = np.array(cross).reshape(len(lambdas), len(pairs))
    logl = np.log(lambdas)
    fit = linear_fit(logl, measured)
    cross_fits = [linear_fit(logl, cross[:, p]) for p in range(len(pairs))]
    return GradReport(lambdas, measured, np.array(leading), cross, fit, cross_fits, pairs)


@dataclass
class AverageReport:
    scales: np.ndarray
    averages: np.ndarray
    fit: LinearFit | None
    small_scale_max: float


def verify_average_estimate(grid: TorusGrid, config: BarycenterConfig,
                            scales: Sequence[float]) -> AverageReport:
    """Fit ``int phi`` against ``log s`` over the scales above 1."""
    scales = np.asarray(scales, dtype=float)
    avg = np.array([grid.integrate(bubble(grid, config, s)) for s in scales])
    big = scales > 1
    fit = linear_fit(np.log(scales[big]), avg[big]) if big.sum() >= 2 else None
    small = np.abs(avg[~big]).max() if (~big).any() else 0.0
    return AverageReport(scales, avg, fit, float(small))


@dataclass
class ExpReport:
    scale_vectors: np.ndarray  # (n_samples, N): lam * t_i
    log_integrals: np.ndarray  # (n_samples, N)
    fits: list  # per component, coefficients against log max{1, M_j}, j = 0..N-1
    predicted: np.ndarray  # (N, N)

    def max_error(self) -> float:
        return float(max(np.max(np.abs(f.coef - p)) for f, p in zip(self.fits, self.predicted)))


def join_from_scales(sigmas, scales) -> tuple[JoinPoint, float]:
    """Join point and lambda with ``lam * t_i = scales[i]``."""
    scales = np.asarray(scales, dtype=float)
    lam = float(scales.sum())
    t = scales / lam
    t[-1] = 1.0 - t[:-1].sum()
    return JoinPoint(tuple(sigmas), tuple(np.clip(t, 0.0, 1.0))), lam


def verify_exp_estimate(spec: CartanSpec, grid: TorusGrid, sigmas, scale_vectors, h=1.0) -> ExpReport:
    """Fit ``log int h_i e^{u_i}`` against all ``log max{1, lam t_j}`` jointly."""
    scale_vectors = np.atleast_2d(np.asarray(scale_vectors, dtype=float))
    N = spec.n_components
    hh = np.broadcast_to(np.asarray(h, dtype=float), (N,) + grid.shape)
    with np.errstate(divide="ignore"):
        lh = np.log(hh)
    logints = []
    for sv in scale_vectors:
        zeta, lam = join_from_scales(sigmas, sv)
        u = test_map(spec, grid, zeta, lam)
        logints.append([grid.log_integral_exp(lh[i] + u[i]) for i in range(N)])
    logints = np.array(logints)
    X = np.log(np.maximum(1.0, scale_vectors))
    fits = [linear_fit(X, logints[:, i]) for i in range(N)]
    return ExpReport(scale_vectors, logints, fits, exp_exponents(spec))


def check_rho_window(spec: CartanSpec, rho, K) -> None:
    """Require ``(8 pi / a_ii) K_i < rho_i < (8 pi / a_ii)(K_i + 1)``."""
    rho = np.asarray(rho, dtype=float)
    thr = spec.coercivity_thresholds()
    q = rho / thr
    if np.any(np.isclose(q, np.round(q), rtol=0, atol=1e-12)):
        raise ValueError(f"rho={rho.tolist()} lies on the critical lattice {thr.tolist()} * N")
    K = np.asarray(K)
    if np.any(q <= K) or np.any(q >= K + 1):
        raise ValueError(f"rho={rho.tolist()} is outside the window for K={K.tolist()}")


@dataclass
class DivergenceSweep:
    lambdas: np.ndarray
    rows: list = field(default_factory=list)  # dicts per (zeta, lambda)
    fits: list = field(default_factory=list)  # per zeta
    predicted: list = field(default_factory=list)
    decreasing_from: list = field(default_factory=list)


def energy_divergence_sweep(spec: CartanSpec, grid: TorusGrid, rho, zetas, lambdas, K,
                            h=1.0) -> DivergenceSweep:
    """Energy along ``lam -> test_map(zeta, lam)`` with log-slope fits per sample."""
    check_rho_window(spec, rho, K)
    lambdas = np.asarray(lambdas, dtype=float)
    coeffs = energy_slope_coefficients(spec, rho, K)
    out = DivergenceSweep(lambdas)
    for z_idx, zeta in enumerate(zetas):
        J = []
        for lam in lambdas:
            u = test_map(spec, grid, zeta, lam)
            st = SystemState(spec, grid, u, rho, h)
            means = u.reshape(u.shape[0], -1).mean(axis=1)
            # st.u is the zero-mean projection; report both terms for the raw u
            logint = st.log_integrals() + means
            Jv = energy(st)
            J.append(Jv)
            row = {"zeta": z_idx, "lambda": float(lam), "t": list(zeta.t), "J": Jv,
                   "Q": quadratic_form(spec, grid, st.u)}
            for i in range(spec.n_components):
                row[f"avg_{i + 1}"] = float(means[i])
                row[f"logint_{i + 1}"] = float(logint[i])
            out.rows.append(row)
        J = np.array(J)
        active = (np.asarray(zeta.t) > 0).astype(float)
        out.predicted.append(float(coeffs @ active))
        out.fits.append(linear_fit(np.log(lambdas), J))
        dec = np.diff(J) < 0
        start = len(lambdas) - 1
        while start > 0 and dec[start - 1]:
            start -= 1
        out.decreasing_from.append(float(lambdas[start]))
    return out


def sample_barycenter(rng: np.random.Generator, K: int, circle_y: float | None = None,
                      grid: TorusGrid | None = None, min_sep: float = CIRCLE_SEPARATION,
                      max_tries: int = 1000) -> BarycenterConfig:
    """Random ``K``-atom barycenter, optionally on the circle ``y = circle_y``."""
    for _ in range(max_tries):
        xs = rng.random(K)
        ys = np.full(K, circle_y) if circle_y is not None else rng.random(K)
        pts = np.column_stack([xs, ys])
        if grid is not None:
            pts = np.round(pts * grid.n) / grid.n % 1.0
        dist = pairwise_distance(pts, pts) + np.eye(K) * 10
        if K == 1 or dist.min() >= min_sep:
            w = rng.dirichlet(np.ones(K))
            return BarycenterConfig.from_points([TorusPoint(*p) for p in pts], w)
    raise RuntimeError("could not place separated atoms")
