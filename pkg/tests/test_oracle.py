import numpy as np
import pytest

from dlmpc import (LocalNormBound, QuadraticCost, box_constraints,
                   box_polytope, closed_loop_map, d_sets_from_model,
                   local_norm_lhs, locality_masks, robust_violation_check,
                   solve_centralized, stack_response, unconstrained_spec)
from dlmpc.errors import InfeasibleError
from dlmpc.oracle import polytope_vertices

from conftest import two_node_model


def riccati_reference(model, T, q_w, r_w, x0):
    """Finite-horizon LQR by dynamic programming (independent oracle).

    Stage costs: x_t' (q_w I) x_t for t = 1..T and u_t' (r_w I) u_t for
    t = 0..T-1, matching the library's cost convention.
    """
    A, B = model.A, model.B
    n, p = model.n, model.p
    Q = q_w * np.eye(n)
    R = r_w * np.eye(p)
    P = Q.copy()                      # terminal weight: same state cost
    K = [None] * T
    for t in range(T - 1, -1, -1):
        K[t] = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = (Q if t >= 1 else np.zeros((n, n))) + A.T @ P @ (A - B @ K[t])
    xs = np.zeros((T + 1, n))
    us = np.zeros((T + 1, p))
    xs[0] = x0
    for t in range(T):
        us[t] = -K[t] @ xs[t]
        xs[t + 1] = A @ xs[t] + B @ us[t]
    return xs.ravel(), us.ravel()


def test_unconstrained_matches_riccati():
    model = two_node_model()
    T = 4
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(model.n)
    spec = unconstrained_spec(model, T)
    sol = solve_centralized(model, spec, None, x0, QuadraticCost())
    w = np.concatenate([x0, np.zeros(T * model.n)])
    x, u = closed_loop_map(sol.phi_x, sol.phi_u, w)
    x_ref, u_ref = riccati_reference(model, T, 1.0, 1.0, x0)
    assert np.abs(x - x_ref).max() <= 1e-6
    assert np.abs(u - u_ref).max() <= 1e-6


def test_baseline_constrained_regression(grid16, grid16_masks, grid16_x0, cost):
    # binding box: optimum exceeds the unconstrained one and stays feasible;
    # only the inputs are tightened (below their unconstrained peak), which
    # is always feasible yet guaranteed active
    T = 5
    loose = solve_centralized(grid16, unconstrained_spec(grid16, T),
                              grid16_masks, grid16_x0, cost)
    y_loose = stack_response(loose.phi_x, loose.phi_u)[:, :grid16.n] @ grid16_x0
    u_peak = np.abs(y_loose[(T + 1) * grid16.n:]).max()
    assert u_peak > 0
    spec = box_constraints(grid16, T, 1.0, 0.7 * u_peak)
    sol = solve_centralized(grid16, spec, grid16_masks, grid16_x0, cost)
    assert np.isfinite(sol.objective)
    assert sol.objective >= loose.objective - 1e-9
    phi1 = stack_response(sol.phi_x, sol.phi_u)[:, :grid16.n]
    resid = spec.H @ (phi1 @ grid16_x0) - spec.h
    assert resid.max() <= 1e-7
    # the tightened box binds: some rows active
    assert resid.max() >= -1e-4


def test_masks_dense_vs_saturated_equal(grid16, grid16_x0, cost):
    from dlmpc import d_sets_from_model, locality_masks
    T = 3
    spec = box_constraints(grid16, T, 1.0, 2.0)
    sat = locality_masks(grid16, d_sets_from_model(grid16, 40), T)
    sol_dense = solve_centralized(grid16, spec, None, grid16_x0, cost)
    sol_sat = solve_centralized(grid16, spec, sat, grid16_x0, cost)
    assert abs(sol_dense.objective - sol_sat.objective) <= \
        1e-7 * (1 + abs(sol_dense.objective))
    assert np.abs(sol_dense.u0 - sol_sat.u0).max() <= 1e-5


def test_infeasible_raises(grid16, grid16_masks, grid16_x0, cost):
    spec = box_constraints(grid16, 5, x_max=1e-6, u_max=1e-6)
    with pytest.raises(InfeasibleError):
        solve_centralized(grid16, spec, grid16_masks, grid16_x0, cost)


def test_violation_check_nominal_case():
    model = two_node_model()
    T = 2
    spec = box_constraints(model, T, 0.7, 0.9)
    rng = np.random.default_rng(1)
    phi = rng.standard_normal(((T + 1) * (model.n + model.p), (T + 1) * model.n))
    x0 = rng.standard_normal(model.n)
    margins = robust_violation_check(phi, spec, x0)
    expect = spec.H @ phi[:, :model.n] @ x0 - spec.h
    assert np.allclose(margins, expect, atol=1e-12)


def test_violation_check_norm_ball_tight():
    model = two_node_model()
    T = 2
    sigma = 0.25
    spec = box_constraints(model, T, 0.7, 0.9,
                           noise=LocalNormBound(p=np.inf, sigma=sigma))
    rng = np.random.default_rng(2)
    phi = rng.standard_normal(((T + 1) * (model.n + model.p), (T + 1) * model.n))
    x0 = rng.standard_normal(model.n)
    margins = robust_violation_check(phi, spec, x0)
    lhs = local_norm_lhs(phi, x0, spec)
    # dualization is exact for the infinity norm: worst case == closed form
    assert np.abs(margins - (lhs - spec.h)).max() <= 1e-10


def test_violation_check_certifies_oracle(cost):
    # desk-scale instance: 2 subsystems x 2 time blocks -> 256 vertices
    model = two_node_model()
    T = 2
    rng = np.random.default_rng(5)
    x0 = 0.3 * rng.standard_normal(model.n)
    spec = box_constraints(model, T, 0.8, 1.2,
                           noise=box_polytope(model, T, 0.1))
    sol = solve_centralized(model, spec, None, x0, cost)
    phi = stack_response(sol.phi_x, sol.phi_u)
    margins = robust_violation_check(phi, spec, x0, cap=2 ** 10)
    assert margins.max() <= 1e-6


def test_polytope_vertices_box():
    model = two_node_model()
    T = 2
    noise = box_polytope(model, T, 0.5)
    verts = polytope_vertices(noise, model.n, T, cap=2 ** 10)
    assert len(verts) == 2 ** (model.n * T)
    arr = np.asarray(verts)
    assert np.allclose(np.abs(arr), 0.5)


def test_vertex_cap_enforced():
    model = two_node_model()
    noise = box_polytope(model, 3, 0.5)
    with pytest.raises(ValueError):
        polytope_vertices(noise, model.n, 3, cap=16)
    spec = box_constraints(model, 3, 1.0, 1.0,
                           noise=LocalNormBound(p=np.inf, sigma=0.1))
    with pytest.raises(ValueError):
        robust_violation_check(np.zeros((16, 16)), spec, np.zeros(4), cap=16)
