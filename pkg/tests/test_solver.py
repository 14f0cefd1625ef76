import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.ndimage import gaussian_filter

from todabench.bubbles import BarycenterConfig, JoinPoint, bubble, test_map as make_test_map
from todabench.cartan import CartanSpec, SystemState, energy, energy_gradient, residual, sup_norm
from todabench.solver import (SolveOptions, SolverError, all_subsets, blowup_monitor,
                              classify_point, classify_quantization, continuation, find_critical,
                              jacobian_action, lambda_set, local_masses, matrix_domination_check,
                              minimize_coercive, on_critical_lattice)
from todabench.torus import TorusGrid, sample

B2 = CartanSpec.preset("B2")


def weights(g):
    return np.stack([sample(g, lambda x, y: 1 + 0.5 * np.sin(2 * np.pi * x)), np.ones(g.shape)])


def test_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(dt=0)
    with pytest.raises(ValueError):
        SolveOptions(method="magic")


def test_uniform_weight_is_already_solved():
    g = TorusGrid(32)
    s = SystemState.zero(B2, g, (np.pi, 2 * np.pi))
    out = minimize_coercive(s)
    assert sup_norm(out.u) == 0
    assert sup_norm(find_critical(s).u) == 0


def test_minimize_coercive_example():
    g = TorusGrid(64)
    s = SystemState.zero(B2, g, (2 * np.pi, 2 * np.pi), weights(g))
    rep = minimize_coercive(s, SolveOptions(tol=1e-8), return_report=True)
    assert rep.residual < 1e-8
    assert rep.energy <= energy(s)
    J = [h["energy"] for h in rep.history]
    assert all(b <= a + 1e-12 for a, b in zip(J, J[1:]))
    assert np.all(np.abs(rep.state.u.mean(axis=(1, 2))) < 1e-12)
    grad = energy_gradient(rep.state)
    assert sup_norm(grad) < 10 * 1e-8


def test_minimize_rejects_supercritical():
    g = TorusGrid(16)
    with pytest.raises(ValueError):
        minimize_coercive(SystemState.zero(B2, g, (4 * np.pi, np.pi)))


def test_jacobian_matches_finite_differences():
    g = TorusGrid(32)
    rng = np.random.default_rng(0)
    u = gaussian_filter(rng.standard_normal((2, 32, 32)), (0, 3, 3), mode="wrap") * 3
    s = SystemState(B2, g, u, (5.0, 7.0), weights(g))
    v = g.zero_mean(gaussian_filter(rng.standard_normal((2, 32, 32)), (0, 3, 3), mode="wrap"))
    eps = 1e-6
    fd = (residual(s.with_u(s.u + eps * v)) - residual(s.with_u(s.u - eps * v))) / (2 * eps)
    assert sup_norm(fd - jacobian_action(s, v)) < 1e-6 * max(1, sup_norm(fd))


def test_find_critical_agrees_with_minimizer():
    g = TorusGrid(64)
    s = SystemState.zero(B2, g, (2 * np.pi, 2 * np.pi), weights(g))
    ref = minimize_coercive(s)
    rng = np.random.default_rng(1)
    u0 = gaussian_filter(rng.standard_normal((2, 64, 64)), (0, 4, 4), mode="wrap") * 5
    out = find_critical(s.with_u(u0), SolveOptions(method="newton", tol=1e-9))
    assert energy(out) == pytest.approx(energy(ref), abs=1e-6)
    assert sup_norm(residual(out)) < 1e-9


def test_find_critical_lattice_and_failures():
    g = TorusGrid(32)
    with pytest.raises(ValueError):
        find_critical(SystemState.zero(B2, g, (8 * np.pi, np.pi)))
    assert on_critical_lattice(B2, (4 * np.pi, 1.0))
    assert not on_critical_lattice(B2, (6 * np.pi, 2 * np.pi))
    with pytest.raises(SolverError):
        find_critical(SystemState.zero(B2, g, (2.0, 2.0), weights(g)), SolveOptions(method="newton", max_iters=1, tol=1e-14))


def test_find_critical_never_returns_non_solution():
    g = TorusGrid(64)
    z = JoinPoint.pair(BarycenterConfig.from_points([(0.3, 0.25)]), BarycenterConfig.from_points([(0.6, 0.75)]), 0.5)
    u0 = make_test_map(B2, g, z, 8)
    s = SystemState(B2, g, u0, (6 * np.pi, 2 * np.pi), weights(g))
    try:
        out = find_critical(s, SolveOptions(method="newton", tol=1e-8, max_iters=60))
    except SolverError as exc:
        assert np.isfinite(exc.last_residual) or np.isnan(exc.last_residual)
    else:
        assert sup_norm(residual(out)) < 1e-8


def test_continuation():
    g = TorusGrid(32)
    s = SystemState.zero(B2, g, (1.0, 1.0), weights(g))
    assert continuation(s, []) == []
    path = [(r, r) for r in np.linspace(1.0, 3.0, 6)]
    steps = continuation(s, path, SolveOptions(method="newton", tol=1e-9))
    assert all(st_.success for st_ in steps)
    for a, b in zip(steps, steps[1:]):
        assert sup_norm(a.state.u - b.state.u) < 0.1
    assert not any(st_.concentrating for st_ in steps)
    bad = continuation(s, [(1.0, 1.0), (4 * np.pi, 1.0), (2.0, 1.0)])
    assert [b.success for b in bad] == [True, False, True]


def test_blowup_monitor_rises_with_concentration():
    g = TorusGrid(128)
    cfg = BarycenterConfig.from_points([(0.5, 0.5)])
    vals = [blowup_monitor(SystemState(B2, g, np.stack([bubble(g, cfg, s), 0 * bubble(g, cfg, s)]), (1.0, 1.0), 1.0))
            for s in (2, 8, 32)]
    assert vals[0] < vals[1] < vals[2]


def test_local_masses_uniform():
    g = TorusGrid(256)
    s = SystemState.zero(B2, g, (3.0, 5.0))
    rep = local_masses(s, [(0.5, 0.5)])
    area = np.pi * rep.radii**2
    assert np.allclose(rep.masses[0, :, 0], 3.0 * area, rtol=0.02)
    assert np.all(rep.masses <= s.rho)
    assert np.all(np.diff(rep.masses[0, :, 1]) <= 0)


def test_local_masses_concentrated_bubble():
    g = TorusGrid(512)
    z = JoinPoint((BarycenterConfig.from_points([(0.5, 0.5)]), None), (1.0, 0.0))
    u = make_test_map(B2, g, z, 256)
    s = SystemState(B2, g, u, (3.0, 3.0), 1.0)
    rep = local_masses(s)
    assert np.allclose(rep.centers[0], (0.5, 0.5))
    assert rep.masses[0, 1, 0] >= 0.95 * 3.0
    with pytest.raises(ValueError):
        local_masses(s, radii=(0.1, 0.2))
    with pytest.raises(ValueError):
        local_masses(s, radii=(0.1, 0.001))


def test_classification_examples():
    entry, dist, ok = classify_point((4 * np.pi, 0), "B2")
    assert entry == (4, 0) and dist == 0 and ok
    entry, dist, ok = classify_point((8.1 * np.pi, 23.9 * np.pi), "G2")
    assert entry == (8, 24) and dist == pytest.approx(np.pi * np.sqrt(0.02)) and ok
    assert not classify_point((2 * np.pi, 2 * np.pi), "B2")[2]
    assert not classify_point((2 * np.pi, 2 * np.pi), "G2")[2]


def test_classification_g2_window():
    g = TorusGrid(64)
    s = SystemState.zero(CartanSpec.preset("G2"), g, (14 * np.pi, np.pi))
    with pytest.raises(ValueError):
        classify_quantization(local_masses(s, [(0.5, 0.5)]), "G2")


def test_lambda_set_examples():
    assert lambda_set([], 30) == [4 * np.pi, 8 * np.pi]
    assert lambda_set([[], []], 3.0) == []
    vals = np.array(lambda_set([[0.5]], 13 * np.pi)) / np.pi
    assert np.allclose(vals, [4, 6, 8, 10, 12])
    assert np.allclose(np.array(lambda_set([[0.5]], 13)) / np.pi, [4])
    with pytest.raises(ValueError):
        lambda_set([[-0.5]], 10)


@given(st.lists(st.lists(st.floats(0, 3), max_size=2), max_size=2), st.floats(1, 120))
def test_lambda_set_matches_enumeration(sing, rho_max):
    gens = [1.0] + [1 + a for comp in sing for a in comp]
    bound = rho_max / (4 * np.pi)
    ranges = [range(int(bound / gg) + 1) for gg in gens]
    ref = sorted({round(sum(n * gg for n, gg in zip(ns, gens)), 9) for ns in itertools.product(*ranges)} - {0.0})
    ref = [v for v in ref if v <= bound + 1e-12]
    got = np.array(lambda_set(sing, rho_max)) / (4 * np.pi)
    assert len(got) == len(ref)
    assert np.allclose(got, ref, atol=1e-8)
    assert np.all(np.diff(got) > 0)


def test_matrix_domination_examples():
    A = np.array([[3.0, -1.0, 0.5], [-1.0, 2.0, 0.0], [0.5, 0.0, 1.5]])
    full = matrix_domination_check(A, [0, 1, 2])
    assert full.max_violation == 0 and np.max(np.abs(full.C)) < 1e-14
    D = np.diag([1.0, 2.0, 5.0])
    assert matrix_domination_check(D, [0, 2]).max_violation == 0
    with pytest.raises(ValueError):
        matrix_domination_check([[1.0, 2.0], [2.0, 1.0]], [0])
    for name in ("B2", "G2"):
        for I in all_subsets(2):
            r = matrix_domination_check(CartanSpec.preset(name).s, I)
            assert r.max_violation < 1e-12 and r.min_eigenvalue >= -1e-12
