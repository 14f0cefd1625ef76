"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``; the lines are repeated in
the terminal summary.  Runtime budgets are part of each criterion.
"""

import itertools
import time

import numpy as np
import pytest

from todabench.bubbles import (BarycenterConfig, JoinPoint, bubble, energy_divergence_sweep,
                               sample_barycenter, test_map as make_test_map, verify_average_estimate,
                               verify_exp_estimate, verify_grad_estimate)
from todabench.cartan import (CartanSpec, SystemState, elementary_identity_residual, energy,
                              mt_deficit, quadratic_density, sup_norm)
from todabench.concentration import (DiscreteMeasure, covering_merge, dist_to_barycenters,
                                     join_coordinates, transport_distance, unit_density,
                                     validate_cover)
from todabench.fitting import linear_fit
from todabench.solver import (SolveOptions, all_subsets, classify_quantization, lambda_set,
                              local_masses, matrix_domination_check, minimize_coercive,
                              QUANTIZATION_TABLES)
from todabench.torus import TorusGrid, flat_distance, pairwise_distance, sample

from oracles import exhaustive_transport

B2, G2 = CartanSpec.preset("B2"), CartanSpec.preset("G2")
DYADIC = 2.0 ** np.arange(3, 9)  # 8 .. 256


def smooth_field(g, rng, modes=3):
    X, Y = g.coords
    out = np.zeros(g.shape)
    for _ in range(modes):
        k, l = rng.integers(-3, 4, size=2)
        out += rng.standard_normal() * np.cos(2 * np.pi * (k * X + l * Y) + rng.random() * 2 * np.pi)
    return out


def circle_pair(g, seed, K1=1):
    rng = np.random.default_rng(seed)
    return sample_barycenter(rng, K1, 0.25, g), sample_barycenter(rng, 1, 0.75, g)


def test_ac1_preset_reproduction(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(64)
    rng = np.random.default_rng(1)
    worst = 0.0
    for spec in (B2, G2):
        for _ in range(10):
            u = np.stack([smooth_field(g, rng), smooth_field(g, rng)])
            (ax, ay), (bx, by) = g.gradient(u[0]), g.gradient(u[1])
            g11, g12, g22 = ax * ax + ay * ay, ax * bx + ay * by, bx * bx + by * by
            if spec is B2:
                explicit = g11 / 2 + g12 / 2 + g22 / 4
            else:
                explicit = g11 + g12 + g22 / 3
            worst = max(worst, np.max(np.abs(quadratic_density(spec, g, u) - explicit)))
    ident = 0.0
    for _ in range(1000):
        x, y = rng.standard_normal(2), rng.standard_normal(2)
        for v, sw in itertools.product(("B2", "G2"), (False, True)):
            ident = max(ident, abs(elementary_identity_residual(v, x, y, sw)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-10 and ident < 1e-12 and dt < 10
    acceptance("AC-1", ok, f"density error {worst:.2e} (<1e-10), identity error {ident:.2e} (<1e-12), {dt:.1f}s")
    assert ok


def test_ac2_energy_divergence(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(256)
    z = JoinPoint.pair(*circle_pair(g, 0), 0.5)
    parts, ok = [], True
    for spec in (B2, G2):
        rep = energy_divergence_sweep(spec, g, (6 * np.pi, 6 * np.pi), [z], DYADIC, (1, 1))
        fit, pred = rep.fits[0], rep.predicted[0]
        ok &= fit.slope <= pred + 1 and fit.r2 >= 0.99
        parts.append(f"{spec.name} slope {fit.slope:.3f} (need <= {pred + 1:.3f}) R2 {fit.r2:.4f}")
    dt = time.perf_counter() - t0
    ok &= dt < 120
    acceptance("AC-2", ok, "; ".join(parts) + f", {dt:.1f}s")
    assert ok


def test_ac2_asymptotic_window(acceptance):
    """Same sweep one octave further out on a finer grid."""
    t0 = time.perf_counter()
    g = TorusGrid(2048)
    z = JoinPoint.pair(*circle_pair(g, 0), 0.5)
    parts, ok = [], True
    for spec in (B2, G2):
        rep = energy_divergence_sweep(spec, g, (6 * np.pi, 6 * np.pi), [z], 2 * DYADIC, (1, 1))
        fit, pred = rep.fits[0], rep.predicted[0]
        ok &= fit.slope <= pred + 1 and fit.r2 >= 0.99
        parts.append(f"{spec.name} slope {fit.slope:.3f} (need <= {pred + 1:.3f}) R2 {fit.r2:.4f}")
    dt = time.perf_counter() - t0
    acceptance("AC-2 supplementary (n=2048, lambda 16..512)", ok, "; ".join(parts) + f", {dt:.1f}s")
    assert ok


def test_ac3_average_and_exp_estimates(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(1024)
    s1, s2 = circle_pair(g, 0)
    avg = verify_average_estimate(g, s1, DYADIC).fit.slope
    ok = -4.3 <= avg <= -3.7
    parts = [f"average slope {avg:.3f} in [-4.3, -3.7]"]
    scales = 2.0 ** np.arange(3, 8)
    grid_s = np.array(list(itertools.product(scales, scales)))
    for spec in (B2, G2):
        rep = verify_exp_estimate(spec, g, (s1, s2), grid_s)
        for i, fit in enumerate(rep.fits):
            err = np.max(np.abs(fit.coef - rep.predicted[i]))
            ok &= err <= 0.3
            parts.append(f"{spec.name} comp {i + 1} coef {np.round(fit.coef, 3).tolist()} "
                         f"vs {rep.predicted[i].tolist()}")
    dt = time.perf_counter() - t0
    ok &= dt < 120
    acceptance("AC-3 (average, exp)", ok, "; ".join(parts) + f", {dt:.1f}s")
    assert ok


def test_ac3_gradient_cross_term(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(1024)
    z = JoinPoint.pair(*circle_pair(g, 0), 0.5)
    rep = verify_grad_estimate(B2, g, z, DYADIC, (1, 1))
    cross = rep.cross[:, 0]
    slope = linear_fit(np.log(DYADIC), cross).slope
    ratio = np.max(np.abs(cross)) / max(np.min(np.abs(cross)), 1e-300)
    dt = time.perf_counter() - t0
    ok = np.all(np.isfinite(cross)) and np.isfinite(ratio) and abs(slope) < 0.3 and dt < 120
    acceptance("AC-3 (gradient cross term)", ok,
               f"cross {np.round(cross, 2).tolist()}, log-slope {slope:.3f} (|.|<0.3), "
               f"max/min {ratio:.2f}, {dt:.1f}s")
    assert ok


def test_ac4_scalar_mt_sharpness(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(4096)
    cfg = BarycenterConfig.from_points([(0.5, 0.5)])
    lams = 2.0 ** np.arange(5, 11)  # 32 .. 1024
    deficits = np.array([mt_deficit(g, bubble(g, cfg, lam)) for lam in lams])
    fit = linear_fit(np.log(lams), deficits)
    dt = time.perf_counter() - t0
    ok = abs(fit.slope) < 0.5 and np.all(np.isfinite(deficits)) and dt < 60
    acceptance("AC-4", ok, f"slope {fit.slope:.3f} (|.|<0.5), max deficit {deficits.max():.3f}, {dt:.1f}s")
    assert ok


def test_ac5_coercive_solve(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(128)
    h = np.stack([sample(g, lambda x, y: 1 + 0.5 * np.sin(2 * np.pi * x)), np.ones(g.shape)])
    rho = (2 * np.pi, 2 * np.pi)
    base = SystemState.zero(B2, g, rho, h)
    opts = SolveOptions(tol=1e-8, max_iters=200)
    rep = minimize_coercive(base, opts, return_report=True)
    rng = np.random.default_rng(5)
    values = [rep.energy]
    for _ in range(3):
        u0 = np.stack([smooth_field(g, rng), smooth_field(g, rng)])
        values.append(minimize_coercive(SystemState(B2, g, u0, rho, h), opts, return_report=True).energy)
    spread = max(values) - min(values)
    dt = time.perf_counter() - t0
    ok = (rep.converged and rep.residual < 1e-8 and rep.iterations <= 200
          and rep.energy <= energy(base) and spread < 1e-6 and dt < 60)
    acceptance("AC-5", ok, f"residual {rep.residual:.2e} in {rep.iterations} iterations, "
               f"J(u*)={rep.energy:.6f} <= J(0)={energy(base):.6f}, multistart spread {spread:.1e}, {dt:.1f}s")
    assert ok


def test_ac6_matrix_domination(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    min_eig, max_viol, checks = np.inf, -np.inf, 0
    for k in range(200):
        N = int(rng.integers(1, 7))
        M = rng.standard_normal((N, N))
        A = M @ M.T + 0.05 * np.eye(N)
        for I in all_subsets(N):
            r = matrix_domination_check(A, I, seed=k)
            min_eig, max_viol = min(min_eig, r.min_eigenvalue), max(max_viol, r.max_violation)
            checks += 1
    preset = max(matrix_domination_check(s.s, I).max_violation
                 for s in (B2, G2) for I in all_subsets(2))
    preset_eig = min(matrix_domination_check(s.s, I).min_eigenvalue
                     for s in (B2, G2) for I in all_subsets(2))
    dt = time.perf_counter() - t0
    ok = min_eig >= -1e-10 and max_viol <= 1e-10 and preset < 1e-12 and preset_eig >= -1e-12 and dt < 30
    acceptance("AC-6", ok, f"{checks} subset checks, min eig {min_eig:.2e}, max violation {max_viol:.2e}, "
               f"presets {preset:.1e}, {dt:.1f}s")
    assert ok


def _cover_instance(g, rng, N, K):
    regs, dens = [], []
    for i in range(N):
        pts = []
        while len(pts) < K[i]:
            p = np.round(rng.random(2) * g.n) / g.n
            if all(flat_distance(p, q) > 0.3 for q in pts):
                pts.append(p)
        regs.append([g.distance_to(p) <= 0.06 for p in pts])
        f = sum(np.exp(-g.distance_to(p) ** 2 / 0.001) for p in pts)
        dens.append(f / f.mean())
    return regs, np.array(dens)


def test_ac7_covering(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(128)
    rng = np.random.default_rng(7)
    problems, counts = [], {1: 0, 2: 0, 3: 0}
    for _ in range(50):
        N = int(rng.integers(1, 4))
        K = [int(k) for k in rng.integers(1, 3, size=N)]
        delta = float(rng.uniform(0.03, 0.08))
        regs, dens = _cover_instance(g, rng, N, K)
        out = covering_merge(g, delta, regs, dens)
        problems += validate_cover(g, out, dens, K)
        counts[N] += 1
    dt = time.perf_counter() - t0
    ok = not problems and dt < 60
    acceptance("AC-7", ok, f"50 instances (N counts {counts}), {len(problems)} validator problems, {dt:.1f}s")
    assert ok, problems[:5]


def test_ac8_concentration_scaling(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(512)
    parts, ok = [], True
    for K1 in (1, 2):
        s1, s2 = circle_pair(g, 0, K1)
        z = JoinPoint.pair(s1, s2, 0.5)
        scaled = []
        for lam in DYADIC:
            st = SystemState(B2, g, make_test_map(B2, g, z, lam), (6 * np.pi, 6 * np.pi), 1.0)
            d, _ = dist_to_barycenters(unit_density(st, 0), K1)
            scaled.append(d * max(1.0, lam * 0.5))
        band = max(scaled) / min(scaled)
        ok &= band <= 10
        parts.append(f"K1={K1} band {band:.2f}")
    s1, s2 = circle_pair(g, 0)
    st = SystemState(B2, g, make_test_map(B2, g, JoinPoint.pair(s1, s2, 0.5), 256), (6 * np.pi, 6 * np.pi), 1.0)
    jc = join_coordinates(st, 0.3, (1, 1))
    t_err = abs(jc.join.t[1] - 0.5)
    a_err = max(flat_distance(jc.join.sigmas[0].points[0], s1.points[0]),
                flat_distance(jc.join.sigmas[1].points[0], s2.points[0]))
    ok &= t_err <= 0.1 and a_err <= 0.05
    parts.append(f"join t error {t_err:.3f}, atom error {a_err:.2e}")
    rng = np.random.default_rng(8)
    lp_err = 0.0
    for _ in range(20):
        mu = DiscreteMeasure(rng.random((5, 2)), rng.dirichlet(np.ones(5)))
        nu = DiscreteMeasure(rng.random((5, 2)), rng.dirichlet(np.ones(5)))
        ref = exhaustive_transport(mu.masses, nu.masses, pairwise_distance(mu.points, nu.points))
        lp_err = max(lp_err, abs(transport_distance(mu, nu) - ref))
    ok &= lp_err <= 1e-9
    parts.append(f"LP vs exhaustive {lp_err:.1e}")
    dt = time.perf_counter() - t0
    ok &= dt < 180
    acceptance("AC-8", ok, "; ".join(parts) + f", {dt:.1f}s")
    assert ok


def synthetic_state(spec, g, sigma, width=0.005):
    """Densities carrying mass ``sigma_i`` in a narrow peak at the center."""
    sigma = np.asarray(sigma, float)
    rho = np.where(sigma > 0, sigma + 2 * np.pi, 2 * np.pi)
    peak = np.exp(-g.distance_to((0.5, 0.5)) ** 2 / (2 * width**2))
    peak /= g.integrate(peak)
    f = np.stack([sigma[i] / rho[i] * peak + (1 - sigma[i] / rho[i]) for i in range(2)])
    return SystemState(spec, g, np.log(f), rho, 1.0)


def test_ac9_quantization_classifier(acceptance):
    t0 = time.perf_counter()
    g = TorusGrid(256)
    wrong, worst = [], 0.0
    for spec in (B2, G2):
        for entry in QUANTIZATION_TABLES[spec.name]:
            st = synthetic_state(spec, g, np.pi * np.array(entry))
            c = classify_quantization(local_masses(st, [(0.5, 0.5)]), spec.name)[0]
            worst = max(worst, c.distance)
            if c.entry != tuple(entry) or c.distance >= 0.2 * np.pi or not c.quantized:
                wrong.append((spec.name, entry, c.entry, c.distance))
    probe = classify_quantization(local_masses(synthetic_state(B2, g, (2 * np.pi, 2 * np.pi)),
                                               [(0.5, 0.5)]), "B2")[0]
    dt = time.perf_counter() - t0
    ok = not wrong and not probe.quantized and dt < 60
    acceptance("AC-9", ok, f"{len(wrong)} misclassified of 12, worst distance {worst / np.pi:.4f}pi (<0.2pi), "
               f"probe quantized={probe.quantized}, {dt:.1f}s")
    assert ok, wrong


def test_ac10_lambda_generator(acceptance):
    t0 = time.perf_counter()
    ok = True
    for rho_max in (3.0, 4 * np.pi, 30.0, 100.0, 13 * np.pi):
        expected = [4 * np.pi * k for k in range(1, int(rho_max / (4 * np.pi) + 1e-12) + 1)]
        ok &= lambda_set([], rho_max) == expected
    rho_max = 40 * np.pi
    bound = rho_max / (4 * np.pi)
    ref = sorted({a + 1.5 * b for a in range(11) for b in range(8) if 0 < a + 1.5 * b <= bound})
    got = np.array(lambda_set([[0.5]], rho_max)) / (4 * np.pi)
    ok &= len(got) == len(ref) and np.allclose(got, ref, atol=1e-12)
    dt = time.perf_counter() - t0
    ok &= dt < 1
    acceptance("AC-10", ok, f"{len(ref)} values for alpha=1/2 match enumeration, {dt * 1e3:.1f}ms")
    assert ok
