"""Where does the mass of a state sit?

Unit densities, Wasserstein-1 distances on the torus, distance to the space
of ``K``-atom barycenters, retractions onto horizontal circles, the covering
construction that separates concentration regions, and join coordinates of a
state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .bubbles import BarycenterConfig, JoinPoint
from .cartan import SystemState
from .parallel import ordered_map
from .torus import TorusGrid, TorusPoint, as_point, pairwise_distance, wrap

MASS_TOL = 1e-9
LP_MAX_SUPPORT = 400
COARSE_SUPPORT = 32768
COARSE_CELLS = 128


class OutsideNeighborhood(ValueError):
    """The measure is too far from the barycenter space for the projection."""


# -- measures -----------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure ``sum_k m_k delta_{x_k}`` on the torus.

    Density measures keep their grid field in ``density`` and are atomized onto
    the grid nodes with cell masses.
    """

    points: np.ndarray
    masses: np.ndarray
    density: np.ndarray | None = field(default=None, repr=False, compare=False)
    grid: TorusGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2) % 1.0
        m = np.asarray(self.masses, dtype=float).reshape(-1)
        if len(pts) != len(m):
            raise ValueError("points and masses differ in length")
        if len(m) == 0:
            raise ValueError("empty measure")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("masses must be finite and nonnegative")
        if abs(m.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"total mass must be 1, got {m.sum()!r}")
        for name, v in (("points", pts), ("masses", m)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def from_atoms(cls, atoms) -> "DiscreteMeasure":
        pts = np.array([tuple(as_point(p)) for p, _ in atoms], dtype=float)
        return cls(pts, [w for _, w in atoms])

    @classmethod
    def from_config(cls, config: BarycenterConfig) -> "DiscreteMeasure":
        return cls(config.points, config.weights)

    @classmethod
    def from_density(cls, grid: TorusGrid, density, renormalize: bool = True) -> "DiscreteMeasure":
        f = np.asarray(density, dtype=float)
        if f.shape != grid.shape:
            raise ValueError("density does not match the grid")
        m = f.ravel() * grid.cell_area
        if renormalize:
            m = m / m.sum()
        X, Y = grid.coords
        pts = np.column_stack([X.ravel(), Y.ravel()])
        return cls(pts, m, density=f / f.mean(), grid=grid)

    def __len__(self):
        return len(self.masses)

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def compact(self, tol: float = 0.0) -> "DiscreteMeasure":
        """Merge coincident atoms and drop atoms of mass ``<= tol``."""
        key = np.round(self.points, 12) % 1.0
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        m = np.zeros(len(uniq))
        np.add.at(m, inv.ravel(), self.masses)
        keep = m > tol
        m = m[keep]
        return DiscreteMeasure(uniq[keep], m / m.sum())

    def to_config(self) -> BarycenterConfig:
        c = self.compact()
        return BarycenterConfig.from_points([TorusPoint(*p) for p in c.points], c.masses / c.masses.sum())


def unit_density(state: SystemState, i: int) -> DiscreteMeasure:
    """``h_i e^{u_i} / int h_i e^{u_i}`` as a grid-backed probability measure."""
    f = state.densities()[i]
    return DiscreteMeasure.from_density(state.grid, f)


# -- Wasserstein-1 --------------------------------------------------------------

@dataclass
class TransportResult:
    distance: float
    plan: np.ndarray
    method: str
    duality_gap: float = 0.0
    lower_bound: float | None = None


def _lp_plan(mu_m, nu_m, cost) -> tuple[float, np.ndarray]:
    m, k = cost.shape
    rows = sparse.kron(sparse.eye(m), np.ones((1, k)), format="csr")
    cols = sparse.kron(np.ones((1, m)), sparse.eye(k), format="csr")
    A = sparse.vstack([rows, cols[:-1]], format="csr")
    b = np.concatenate([mu_m, nu_m[:-1]])
    res = linprog(cost.ravel(), A_eq=A, b_eq=b, bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(m, k), 0.0)
    return float(np.sum(plan * cost)), plan


def _round_to_marginals(P, a, b):
    """Nearest feasible coupling in the sense of Altschuler-Weed-Rigollet rounding."""
    r = np.minimum(1.0, a / np.maximum(P.sum(1), 1e-300))
    P = P * r[:, None]
    c = np.minimum(1.0, b / np.maximum(P.sum(0), 1e-300))
    P = P * c[None, :]
    ea = a - P.sum(1)
    eb = b - P.sum(0)
    if ea.sum() > 0:
        P = P + np.outer(ea, eb) / ea.sum()
    return P


def sinkhorn(a, b, cost, reg: float = 1e-3, tol: float = 1e-9, max_iter: int = 2000) -> TransportResult:
    """Log-domain Sinkhorn with epsilon scaling.

    The returned distance is the cost of a rounded feasible plan (an upper bound);
    ``lower_bound`` comes from c-transformed potentials, which are always dual
    feasible, so ``duality_gap`` certifies the error.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    la, lb = np.log(np.maximum(a, 1e-300)), np.log(np.maximum(b, 1e-300))
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    eps = max(float(cost.max()), reg)
    while True:
        final = eps <= reg
        stage_tol = tol if final else 1e-4
        for it in range(max_iter):
            f = -eps * logsumexp((g[None, :] - cost) / eps + lb[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - cost) / eps + la[:, None], axis=0)
            if it % 10 == 9:
                row = logsumexp((f[:, None] + g[None, :] - cost) / eps + lb[None, :], axis=1)
                if np.abs(np.exp(row + la) - a).sum() < stage_tol:
                    break
        if final:
            break
        eps = max(eps / 4.0, reg)
    logP = (f[:, None] + g[None, :] - cost) / eps + la[:, None] + lb[None, :]
    P = _round_to_marginals(np.exp(logP), a, b)
    primal = float(np.sum(P * cost))
    gc = np.min(cost - f[:, None], axis=0)
    fc = np.min(cost - gc[None, :], axis=1)
    dual = float(fc @ a + gc @ b)
    return TransportResult(primal, P, "sinkhorn", max(primal - dual, 0.0), dual)


def transport(mu: DiscreteMeasure, nu: DiscreteMeasure, max_support: int = LP_MAX_SUPPORT,
              reg: float = 1e-3) -> TransportResult:
    mu_c, nu_c = mu.compact(), nu.compact()
    cost = pairwise_distance(mu_c.points, nu_c.points)
    if len(mu_c) <= max_support and len(nu_c) <= max_support:
        val, plan = _lp_plan(mu_c.masses, nu_c.masses, cost)
        return TransportResult(val, plan, "lp", 0.0, val)
    return sinkhorn(mu_c.masses, nu_c.masses, cost, reg=reg)


def transport_distance(mu: DiscreteMeasure, nu: DiscreteMeasure, max_support: int = LP_MAX_SUPPORT) -> float:
    """Wasserstein-1 distance with the flat torus ground metric.

    Exact LP when both supports have at most ``max_support`` atoms, otherwise
    entropic (see :func:`sinkhorn` for the certified gap).
    """
    return transport(mu, nu, max_support).distance


# -- barycenter spaces --------------------------------------------------------

@dataclass
class BarycenterFit:
    distance: float
    config: BarycenterConfig
    start_costs: list


def _kmedian_cost(points, masses, centers):
    d = pairwise_distance(points, centers)
    lab = np.argmin(d, axis=1)
    return float(masses @ d[np.arange(len(points)), lab]), lab


def _relocate(points, masses, center, iters: int = 100, tol: float = 1e-12):
    """Weighted geometric median on the torus (Vardi-Zhang modified Weiszfeld) in a local chart."""
    x = np.array(center, float)
    for _ in range(iters):
        v = wrap(points - x)
        d = np.hypot(v[:, 0], v[:, 1])
        on = d < 1e-14
        far = ~on
        if not far.any():
            break
        w = masses[far] / d[far]
        step = (w[:, None] * v[far]).sum(0) / w.sum()
        eta = masses[on].sum()
        if eta > 0:
            # an atom sits at x: move only if the pull of the others beats its mass
            r = np.hypot(*(w[:, None] * v[far]).sum(0))
            if r <= eta:
                break
            step = (1.0 - eta / r) * step
        x = x + step
        if np.hypot(*step) < tol:
            break
    return x % 1.0


def _seed_centers(rng, points, masses, K):
    """Mass-weighted k-means++ seeding with the torus metric."""
    idx = [rng.choice(len(points), p=masses / masses.sum())]
    d = pairwise_distance(points, points[idx])[:, 0]
    for _ in range(1, K):
        w = masses * d**2
        if w.sum() <= 0:
            idx.append(rng.integers(len(points)))
        else:
            idx.append(rng.choice(len(points), p=w / w.sum()))
        d = np.minimum(d, pairwise_distance(points, points[idx[-1:]])[:, 0])
    return points[idx].copy()


def _kmedian_run(points, masses, centers, max_rounds: int = 100):
    cost, lab = _kmedian_cost(points, masses, centers)
    for _ in range(max_rounds):
        new = centers.copy()
        for k in range(len(centers)):
            sel = lab == k
            if masses[sel].sum() > 0:
                new[k] = _relocate(points[sel], masses[sel], centers[k])
        new_cost, new_lab = _kmedian_cost(points, masses, new)
        if new_cost >= cost - 1e-15:
            break
        centers, cost, lab = new, new_cost, new_lab
    return cost, centers, lab


def dist_to_barycenters(mu: DiscreteMeasure, K: int, n_starts: int = 8,
                        seed: int = 0) -> tuple[float, BarycenterConfig]:
    """Distance from ``mu`` to measures with at most ``K`` atoms, with the minimizer.

    For fixed atoms the best weights are the Voronoi masses and the distance is
    the continuous ``K``-median cost, so the search alternates assignment and
    geometric-median relocation from ``n_starts`` seeded starts.  The returned
    value is an upper bound on the infimum.
    """
    fit = fit_barycenter(mu, K, n_starts, seed)
    return fit.distance, fit.config


def _coarsen(points, masses, cells: int):
    """Aggregate mass onto the centers of a ``cells x cells`` lattice."""
    ij = np.floor(points * cells).astype(int) % cells
    key = ij[:, 0] * cells + ij[:, 1]
    m = np.bincount(key, weights=masses, minlength=cells * cells)
    keep = np.nonzero(m > 0)[0]
    pts = (np.column_stack([keep // cells, keep % cells]) + 0.5) / cells
    return pts, m[keep]


def fit_barycenter(mu: DiscreteMeasure, K: int, n_starts: int = 8, seed: int = 0) -> BarycenterFit:
    if K < 1:
        raise ValueError("K must be >= 1")
    keep = mu.masses > 0
    pts, m = mu.points[keep], mu.masses[keep]
    seeds = np.random.SeedSequence(seed).spawn(max(n_starts, 1))
    # large supports: run the starts on an aggregated copy, then refine the
    # distinct outcomes on the full measure
    coarse = len(pts) > COARSE_SUPPORT
    cpts, cm = _coarsen(pts, m, COARSE_CELLS) if coarse else (pts, m)

    def one(ss):
        rng = np.random.default_rng(ss)
        return _kmedian_run(cpts, cm, _seed_centers(rng, cpts, cm, min(K, len(cpts))))

    runs = ordered_map(one, seeds)
    if coarse:
        starts = []
        for r in sorted(runs, key=lambda r: r[0]):
            c = r[1]
            if not any(np.max(pairwise_distance(c, s).min(axis=1)) < 1e-6 for s in starts):
                starts.append(c)
        refined = ordered_map(lambda c: _kmedian_run(pts, m, c), starts)
        cost, centers, lab = min(refined, key=lambda r: r[0])
    else:
        cost, centers, lab = min(runs, key=lambda r: r[0])
    w = np.bincount(lab, weights=m, minlength=len(centers))
    config = BarycenterConfig.from_points([TorusPoint(*c) for c in centers], w / w.sum())
    return BarycenterFit(max(cost, 0.0), config, [r[0] for r in runs])


def project_barycenters(mu: DiscreteMeasure, K: int, eps0: float, n_starts: int = 8,
                        seed: int = 0) -> BarycenterConfig:
    """Nearest ``K``-atom barycenter, defined only within ``eps0`` of the space."""
    d, config = dist_to_barycenters(mu, K, n_starts, seed)
    if d >= eps0:
        raise OutsideNeighborhood(f"distance {d:.4g} to K={K} barycenters is not below eps0={eps0}")
    return config


# -- retractions --------------------------------------------------------------

def circle_height(i: int, N: int) -> float:
    if not 1 <= i <= N:
        raise ValueError(f"circle index must be in 1..{N}, got {i}")
    return (2 * i - 1) / (2 * N)


def circle_retraction(i: int, p, N: int = 2) -> TorusPoint:
    """Project ``p`` onto the horizontal circle ``y = (2i - 1) / (2N)``."""
    p = as_point(p)
    return TorusPoint(p.x, circle_height(i, N))


def push_forward(f: Callable, mu) -> DiscreteMeasure:
    """Image measure ``sum_k m_k delta_{f(x_k)}``; coincident images are merged."""
    if isinstance(mu, BarycenterConfig):
        mu = DiscreteMeasure.from_config(mu)
    img = np.array([tuple(as_point(f(TorusPoint(*p)))) for p in mu.points], dtype=float)
    out = DiscreteMeasure(img, mu.masses)
    return out.compact()


# -- covering -----------------------------------------------------------------

class CoverPreconditionError(ValueError):
    pass


@dataclass
class CoverOutput:
    delta: float
    delta0: float
    delta_prime: float
    n_balls: int
    regions: list  # boolean grid masks, one per merged region
    index_sets: list  # per component, sorted region indices
    centers: list  # per region, ball centers (array (m, 2))

    def summary(self) -> dict:
        return {"delta": self.delta, "delta0": self.delta0, "delta_prime": self.delta_prime,
                "n_balls": self.n_balls, "n_regions": len(self.regions),
                "index_sets": [[int(k) for k in s] for s in self.index_sets],
                "centers": [c.tolist() for c in self.centers]}


def _node_points(grid: TorusGrid, mask) -> np.ndarray:
    ix, iy = np.nonzero(mask)
    return np.column_stack([ix, iy]) / grid.n


def mask_distance(grid: TorusGrid, a, b) -> float:
    """Smallest torus distance between grid nodes of two masks."""
    pa, pb = _node_points(grid, a), _node_points(grid, b)
    if len(pa) == 0 or len(pb) == 0:
        return np.inf
    tree = cKDTree(pb, boxsize=1.0)
    d, _ = tree.query(pa % 1.0, k=1)
    return float(d.min())


def _ball_mask(grid: TorusGrid, center, radius) -> np.ndarray:
    return grid.distance_to(center) <= radius


def _check_cover_input(grid, delta, regions, densities):
    for i, regs in enumerate(regions):
        for k, r in enumerate(regs):
            mass = grid.integrate(densities[i] * r)
            if mass < delta:
                raise CoverPreconditionError(
                    f"region ({i + 1},{k + 1}) carries mass {mass:.4g} < delta={delta}")
        for k in range(len(regs)):
            for k2 in range(k + 1, len(regs)):
                sep = mask_distance(grid, regs[k], regs[k2])
                if sep < delta:
                    raise CoverPreconditionError(
                        f"regions ({i + 1},{k + 1}) and ({i + 1},{k2 + 1}) are {sep:.4g} < delta apart")


def covering_merge(grid: TorusGrid, delta: float, regions: Sequence[Sequence[np.ndarray]],
                   densities) -> CoverOutput:
    """Merge per-component concentration regions into common separated ones.

    ``regions[i][k]`` is a boolean mask on which ``densities[i]`` (a unit
    density) has mass at least ``delta``; masks of one component are
    ``delta``-separated.  Balls of radius ``delta / (3N + 2)`` on grid centres
    cover the torus; each region picks its heaviest ball and balls of different
    components closer than three radii are joined.
    """
    densities = np.asarray(densities, dtype=float)
    N = len(regions)
    if densities.shape != (N,) + grid.shape:
        raise ValueError("one density per component is required")
    if delta <= 0:
        raise ValueError("delta must be positive")
    regions = [[np.asarray(r, dtype=bool) for r in regs] for regs in regions]
    _check_cover_input(grid, delta, regions, densities)

    delta0 = delta / (3 * N + 2)
    stride = max(1, int(np.floor(np.sqrt(2.0) * delta0 * grid.n)))
    idx = np.arange(0, grid.n, stride)
    cx, cy = np.meshgrid(idx, idx, indexing="ij")
    n_balls = cx.size
    ball0 = np.fft.fft2(_ball_mask(grid, (0.0, 0.0), delta0).astype(float))

    chosen = []  # (component, center node)
    for i, regs in enumerate(regions):
        for r in regs:
            g = densities[i] * r * grid.cell_area
            # ball masses at every node by circular correlation with a symmetric ball
            masses = np.real(np.fft.ifft2(np.fft.fft2(g) * np.conj(ball0)))
            at = masses[cx, cy]
            j = int(np.argmax(at))
            chosen.append((i, (cx.ravel()[j], cy.ravel()[j])))

    centers = np.array([[a / grid.n, b / grid.n] for _, (a, b) in chosen]).reshape(-1, 2)
    parent = list(range(len(chosen)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    dist = pairwise_distance(centers, centers)
    for a in range(len(chosen)):
        for b in range(a + 1, len(chosen)):
            if chosen[a][0] != chosen[b][0] and dist[a, b] < 3 * delta0:
                parent[find(a)] = find(b)

    roots = []
    for a in range(len(chosen)):
        r = find(a)
        if r not in roots:
            roots.append(r)
    out_regions, out_centers = [], []
    index_sets = [set() for _ in range(N)]
    for k, r in enumerate(roots):
        members = [a for a in range(len(chosen)) if find(a) == r]
        comps = [chosen[a][0] for a in members]
        if len(set(comps)) != len(comps):
            raise AssertionError("a merged region holds two balls of one component")
        mask = np.zeros(grid.shape, dtype=bool)
        for a in members:
            mask |= _ball_mask(grid, centers[a], delta0)
            index_sets[chosen[a][0]].add(k)
        out_regions.append(mask)
        out_centers.append(centers[members])
    out = CoverOutput(delta, delta0, min(delta0, delta / n_balls), n_balls, out_regions,
                      [sorted(s) for s in index_sets], out_centers)
    return out


def validate_cover(grid: TorusGrid, out: CoverOutput, densities, K=None) -> list:
    """Return the list of violated postconditions (empty when valid)."""
    problems = []
    densities = np.asarray(densities, dtype=float)
    R = out.regions
    for a in range(len(R)):
        for b in range(a + 1, len(R)):
            sep = mask_distance(grid, R[a], R[b])
            if sep < out.delta_prime:
                problems.append(f"regions {a} and {b} are {sep:.4g} apart < delta'={out.delta_prime:.4g}")
    for i, ks in enumerate(out.index_sets):
        if K is not None and len(ks) != K[i]:
            problems.append(f"component {i + 1} has {len(ks)} regions, expected {K[i]}")
        for k in ks:
            mass = grid.integrate(densities[i] * R[k])
            if mass < out.delta_prime:
                problems.append(f"component {i + 1} has mass {mass:.4g} on region {k} < delta'")
    return problems


# -- join coordinates ---------------------------------------------------------

def join_weights(d, eps: float) -> np.ndarray:
    """``t_i = (eps - d_i)^+ / sum_j (eps - d_j)^+``."""
    w = np.maximum(eps - np.asarray(d, dtype=float), 0.0)
    total = w.sum()
    if total <= 0:
        raise ValueError(f"all distances are >= eps={eps}; the state is not concentrated")
    t = w / total
    # exact simplex sum
    j = int(np.argmax(t))
    t[j] = 1.0 - (t.sum() - t[j])
    return t


def join_parameter_pair(d1: float, d2: float, eps: float) -> float:
    """Two-component scalar parameter (weight of the second component), by branches."""
    if d1 >= eps and d2 >= eps:
        raise ValueError(f"both distances are >= eps={eps}")
    if d2 >= eps:
        return 0.0
    if d1 >= eps:
        return 1.0
    return (eps - d2) / (2 * eps - d1 - d2)


@dataclass
class JoinCoordinates:
    join: JoinPoint
    distances: np.ndarray
    projections: list  # unretracted barycenters (or None)


def join_coordinates(state: SystemState, eps: float, K, N_circles: int | None = None,
                     n_starts: int = 8, seed: int = 0) -> JoinCoordinates:
    """Join point ``((Pi_i)_* psi_K_i(f_i), t')`` of a low-energy state."""
    N = state.spec.n_components
    K = [int(k) for k in np.broadcast_to(np.asarray(K), (N,))]
    nc = N if N_circles is None else N_circles
    fits = [fit_barycenter(unit_density(state, i), K[i], n_starts, seed) for i in range(N)]
    d = np.array([f.distance for f in fits])
    t = join_weights(d, eps)
    sigmas, proj = [], []
    for i, f in enumerate(fits):
        if t[i] > 0:
            proj.append(f.config)
            img = push_forward(lambda p, i=i: circle_retraction(i + 1, p, nc), f.config)
            sigmas.append(img.to_config())
        else:
            proj.append(None)
            sigmas.append(None)
    return JoinCoordinates(JoinPoint(tuple(sigmas), tuple(t)), d, proj)
