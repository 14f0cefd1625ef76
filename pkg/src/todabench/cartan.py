"""Cartan matrices, Toda energies, gradients and Euler-Lagrange residuals."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .torus import TorusGrid

PRESETS = {
    "A2": [[2.0, -1.0], [-1.0, 2.0]],
    "B2": [[2.0, -1.0], [-2.0, 2.0]],
    "G2": [[2.0, -1.0], [-3.0, 2.0]],
}


def symmetrize(a) -> tuple[np.ndarray, np.ndarray]:
    """Factor ``a = s @ diag(d)`` with ``s`` symmetric and ``d > 0``.

    ``d`` is fixed to 1 on the first index of every coupled block.  Raises
    ``ValueError`` when no positive diagonal factor exists.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    d = np.full(n, np.nan)
    for root in range(n):
        if not np.isnan(d[root]):
            continue
        d[root] = 1.0
        stack = [root]
        while stack:
            i = stack.pop()
            for j in range(n):
                if j == i or (a[i, j] == 0 and a[j, i] == 0):
                    continue
                if a[i, j] == 0 or a[j, i] == 0:
                    raise ValueError(f"not symmetrizable: zero pattern differs at ({i},{j})")
                # a_ij / d_j == a_ji / d_i
                dj = d[i] * a[i, j] / a[j, i]
                if dj <= 0:
                    raise ValueError(f"not symmetrizable with positive D at ({i},{j})")
                if np.isnan(d[j]):
                    d[j] = dj
                    stack.append(j)
                elif not np.isclose(d[j], dj, rtol=1e-12, atol=0):
                    raise ValueError("not symmetrizable: inconsistent cycle ratios")
    s = a / d[None, :]
    return 0.5 * (s + s.T), d


@dataclass(frozen=True)
class CartanSpec:
    """Coefficient matrix ``a`` with its symmetrization ``a = s @ diag(d)``."""

    a: np.ndarray
    s: np.ndarray
    d: np.ndarray
    name: str = "custom"
    s_inv: np.ndarray = field(init=False, repr=False)
    a_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        s = np.asarray(self.s, dtype=float)
        d = np.asarray(self.d, dtype=float)
        n = a.shape[0]
        if a.shape != (n, n) or s.shape != (n, n) or d.shape != (n,):
            raise ValueError("inconsistent Cartan matrix dimensions")
        if np.any(d <= 0):
            raise ValueError("diagonal factor must be positive")
        if not np.allclose(s, s.T, rtol=0, atol=1e-14):
            raise ValueError("symmetric factor is not symmetric")
        if not np.allclose(s * d[None, :], a, rtol=1e-13, atol=1e-13):
            raise ValueError("s @ diag(d) does not reproduce a")
        off = a[~np.eye(n, dtype=bool)]
        if np.any(off > 0):
            raise ValueError("off-diagonal entries must be <= 0 (competitive system)")
        try:
            np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            raise ValueError("symmetrized matrix is not positive definite") from None
        for name, v in (("a", a), ("s", s), ("d", d)):
            v = v.copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "s_inv", np.linalg.inv(s))
        object.__setattr__(self, "a_inv", np.linalg.inv(a))

    @property
    def n_components(self) -> int:
        return self.a.shape[0]

    @classmethod
    def from_matrix(cls, a, name: str = "custom") -> "CartanSpec":
        s, d = symmetrize(a)
        return cls(a=np.asarray(a, dtype=float), s=s, d=d, name=name)

    @classmethod
    def preset(cls, name: str) -> "CartanSpec":
        key = name.upper()
        if key == "B2":
            return cls(a=PRESETS["B2"], s=[[2.0, -2.0], [-2.0, 4.0]], d=[1.0, 0.5], name="B2")
        if key == "G2":
            return cls(a=PRESETS["G2"], s=[[2.0, -3.0], [-3.0, 6.0]], d=[1.0, 1.0 / 3.0], name="G2")
        if key == "A2":
            return cls(a=PRESETS["A2"], s=PRESETS["A2"], d=[1.0, 1.0], name="A2")
        raise KeyError(f"unknown Cartan preset {name!r}; choose from A2, B2, G2")

    @classmethod
    def from_config(cls, cfg) -> "CartanSpec":
        """Accepts a preset name, a row-major matrix, or ``{"preset": ..}`` / ``{"matrix": ..}``."""
        if isinstance(cfg, str):
            return cls.preset(cfg)
        if isinstance(cfg, dict):
            if "preset" in cfg:
                return cls.preset(cfg["preset"])
            return cls.from_matrix(cfg["matrix"], name=cfg.get("name", "custom"))
        return cls.from_matrix(cfg)

    @classmethod
    def load(cls, path) -> "CartanSpec":
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            cfg = json.loads(text)
        else:
            from ._compat import tomllib
            cfg = tomllib.loads(text)
        return cls.from_config(cfg.get("cartan", cfg))

    def coercivity_thresholds(self) -> np.ndarray:
        """Upper bounds ``8 pi / a_ii`` on each ``rho_i`` for coercivity."""
        return 8.0 * np.pi / np.diag(self.a)

    def coupling_coefficients(self) -> np.ndarray:
        """Matrix ``a_ij / a_jj`` used by the test-function map."""
        return self.a / np.diag(self.a)[None, :]

    def to_dict(self) -> dict:
        return {"name": self.name, "matrix": self.a.tolist()}


def elementary_identity_residual(variant: str, x, y, swapped: bool = False) -> float:
    """LHS - RHS of the algebraic identities splitting the B2/G2 forms."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xx, xy, yy = x @ x, x @ y, y @ y
    v = variant.upper()
    if v == "B2":
        lhs = xx / 2 + xy / 2 + yy / 4
        rhs = yy / 8 + (2 * x + y) @ (2 * x + y) / 8 if swapped else xx / 4 + (x + y) @ (x + y) / 4
    elif v == "G2":
        lhs = xx + xy + yy / 3
        rhs = yy / 12 + (2 * x + y) @ (2 * x + y) / 4 if swapped else xx / 4 + (3 * x + 2 * y) @ (3 * x + 2 * y) / 12
    else:
        raise ValueError(f"variant must be B2 or G2, got {variant!r}")
    return float(lhs - rhs)


# -- fields -----------------------------------------------------------------

def _stack(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return u[None] if u.ndim == 2 else u


def _log(h) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(h)


def quadratic_form(spec: CartanSpec, grid: TorusGrid, u) -> float:
    """``1/2 sum_ij s^{ij} int grad u_i . grad u_j`` via Parseval."""
    u = _stack(u)
    if u.shape[0] != spec.n_components:
        raise ValueError(f"expected {spec.n_components} components, got {u.shape[0]}")
    uh = np.fft.fft2(u)
    sym = grid.symbol
    total = 0.0
    for i in range(u.shape[0]):
        for j in range(u.shape[0]):
            c = spec.s_inv[i, j]
            if c != 0.0:
                total += c * np.real(np.sum(sym * uh[i] * np.conj(uh[j])))
    return 0.5 * total / grid.n**4


def quadratic_density(spec: CartanSpec, grid: TorusGrid, u) -> np.ndarray:
    """Pointwise ``Q_A(u)`` from spectral gradients."""
    u = _stack(u)
    grads = [grid.gradient(ui) for ui in u]
    q = np.zeros(grid.shape)
    for i, (gx, gy) in enumerate(grads):
        for j, (hx, hy) in enumerate(grads):
            q += 0.5 * spec.s_inv[i, j] * (gx * hx + gy * hy)
    return q


@dataclass
class SystemState:
    """Unknowns ``u`` (zero mean per component), parameters ``rho`` and weights ``h``."""

    spec: CartanSpec
    grid: TorusGrid
    u: np.ndarray
    rho: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        N = self.spec.n_components
        self.u = self.grid.zero_mean(np.broadcast_to(_stack(self.u), (N,) + self.grid.shape))
        self.rho = np.asarray(self.rho, dtype=float).reshape(N)
        h = np.asarray(self.h, dtype=float)
        self.h = np.array(np.broadcast_to(h, (N,) + self.grid.shape), dtype=float)
        if np.any(self.rho <= 0):
            raise ValueError("rho must be positive")
        if np.any(self.h < 0) or np.any(self.h.reshape(N, -1).max(axis=1) <= 0):
            raise ValueError("weights h_i must be nonnegative and not identically zero")

    @classmethod
    def zero(cls, spec, grid, rho, h=1.0) -> "SystemState":
        return cls(spec, grid, np.zeros((spec.n_components,) + grid.shape), rho, h)

    def with_u(self, u) -> "SystemState":
        return SystemState(self.spec, self.grid, u, self.rho, self.h)

    def with_rho(self, rho) -> "SystemState":
        return SystemState(self.spec, self.grid, self.u, rho, self.h)

    @property
    def log_h(self) -> np.ndarray:
        return _log(self.h)

    def log_integrals(self) -> np.ndarray:
        """``log int h_i exp(u_i)`` per component."""
        lh = self.log_h
        return np.array([self.grid.log_integral_exp(lh[i] + self.u[i])
                         for i in range(self.u.shape[0])])

    def densities(self) -> np.ndarray:
        """Unit densities ``h_i e^{u_i} / int h_i e^{u_i}`` (each integrates to 1)."""
        g = self.log_h + self.u
        out = np.empty_like(g)
        for i in range(g.shape[0]):
            m = np.max(g[i])
            e = np.exp(g[i] - m)
            out[i] = e / np.mean(e)
        return out


def energy(state: SystemState) -> float:
    """Toda energy with weights ``rho_i d_i`` from the symmetrization."""
    g = state.grid
    q = quadratic_form(state.spec, g, state.u)
    logint = state.log_integrals()
    means = state.u.reshape(state.u.shape[0], -1).mean(axis=1)
    val = q - float(np.sum(state.rho * state.spec.d * (logint - means)))
    if not np.isfinite(val):
        raise FloatingPointError("energy is not finite")
    return val


def energy_gradient(state: SystemState) -> np.ndarray:
    """L2-gradient of the energy, projected to zero mean per component."""
    g = state.grid
    lap = np.array([g.laplacian(ui) for ui in state.u])
    f = state.densities()
    grad = -np.einsum("ij,jxy->ixy", state.spec.s_inv, lap)
    grad -= (state.rho * state.spec.d)[:, None, None] * (f - 1.0)
    return g.zero_mean(grad)


def residual(state: SystemState) -> np.ndarray:
    """``-Laplacian u_i - sum_j a_ij rho_j (f_j - 1)`` with the original matrix."""
    g = state.grid
    f = state.densities()
    lap = np.array([g.laplacian(ui) for ui in state.u])
    return -lap - np.einsum("ij,jxy->ixy", state.spec.a, state.rho[:, None, None] * (f - 1.0))


def sup_norm(fields) -> float:
    return float(np.max(np.abs(fields)))


def mt_deficit(grid: TorusGrid, u, variant: str = "scalar", spec: CartanSpec | None = None,
               h=None) -> float:
    """Left side minus right side (without the constant) of the Moser-Trudinger bound.

    ``scalar``: ``16 pi (log int e^u - int u) - int |grad u|^2``;
    vector variants use weights ``8 pi / s_ii`` against ``int Q``.
    """
    u = _stack(u)
    lh = np.zeros_like(u) if h is None else _log(np.broadcast_to(h, u.shape))
    gaps = np.array([grid.log_integral_exp(lh[i] + u[i]) - grid.integrate(u[i])
                     for i in range(u.shape[0])])
    v = variant.lower()
    if v == "scalar":
        if u.shape[0] != 1:
            raise ValueError("scalar variant takes a single field")
        return float(16.0 * np.pi * gaps[0] - grid.dirichlet(u[0]))
    if v in ("b2", "g2") and spec is None:
        spec = CartanSpec.preset(v)
    if spec is None:
        raise ValueError("general variant needs a CartanSpec")
    weights = 8.0 * np.pi / np.diag(spec.s)
    return float(np.sum(weights * gaps) - quadratic_form(spec, grid, u))
