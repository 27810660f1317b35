"""Centralized ground truth for the distributed solver.

``solve_centralized`` poses the whole finite-horizon synthesis problem --
achievability, locality masks, and the constraint regime of the spec -- as
one convex program and hands it to a mature solver stack.  It exists to be
trusted, not to be fast, and is kept completely independent of the ADMM
path.  ``robust_violation_check`` is the even dumber fallback: enumerate
disturbance vertices and measure constraint margins directly.
"""

import itertools
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .constraints import LocalNormBound, PolytopeNoise, QuadraticCost, response_mask
from .errors import InfeasibleError, SolverError
from .sls_core import BlockOperator, achievability_matrix, localized_completion
from .model import SparsityMask

__all__ = ["OracleSolution", "solve_centralized", "robust_violation_check", "polytope_vertices"]


@dataclass
class OracleSolution:
    phi_x: BlockOperator
    phi_u: BlockOperator
    xi: np.ndarray | None
    objective: float
    u0: np.ndarray
    status: str


def _dense_masks(model, T):
    n, p = model.n, model.p
    return (
        SparsityMask(np.ones(((T + 1) * n, (T + 1) * n), dtype=bool), "phi_x(dense)"),
        SparsityMask(np.ones(((T + 1) * p, (T + 1) * n), dtype=bool), "phi_u(dense)"),
    )


def _row_dual_norm_expr(rows, p):
    if p == np.inf:
        return cp.sum(cp.abs(rows), axis=1)
    if p == 2:
        return cp.norm(rows, 2, axis=1)
    if p == 1:
        return cp.max(cp.abs(rows), axis=1)
    raise ValueError(f"unsupported norm index {p}")


_SOLVER_OPTS = {
    "CLARABEL": {},
    "SCS": dict(eps=1e-9, max_iters=200000),
    "OSQP": dict(eps_abs=1e-9, eps_rel=1e-9, max_iter=200000, polish=True),
}


def _solve_with_fallback(problem, solver):
    """Run the preferred solver, falling back on numerical failures.

    A definitive status (optimal or infeasible) from any solver ends the
    chain; solver exceptions and unknown statuses move to the next one.
    """
    chain = [solver] + [s for s in ("SCS", "OSQP") if s != solver]
    last = None
    for name in chain:
        try:
            problem.solve(solver=name, **_SOLVER_OPTS.get(name, {}))
        except cp.error.SolverError as exc:
            last = exc
            continue
        if problem.status in ("optimal", "optimal_inaccurate",
                              "infeasible", "infeasible_inaccurate",
                              "unbounded"):
            return
        last = RuntimeError(f"status {problem.status}")
    raise SolverError(f"centralized solve failed: {last}")


def solve_centralized(model, spec, masks, x0, cost=None, case=None, solver="CLARABEL"):
    """Solve the synthesis problem as one monolithic convex program.

    case defaults to the regime implied by spec.noise.  masks may be None
    for a fully dense (unlocalized) solve.  Raises InfeasibleError /
    SolverError on bad statuses.
    """
    T = spec.T
    n, p = model.n, model.p
    cost = cost or QuadraticCost()
    if masks is None:
        masks = _dense_masks(model, T)
    if case is None:
        case = {type(None): "noise_free", LocalNormBound: "local_bound",
                PolytopeNoise: "polytopic"}[type(spec.noise)]

    mask = response_mask(masks, model, T)
    zab = achievability_matrix(model, T)
    r_sig = (T + 1) * (n + p)
    w = cost.row_weights(model, T)
    x0 = np.asarray(x0, dtype=float)

    cons = []
    xi_var = None
    if case == "noise_free":
        phi = cp.Variable((r_sig, n))
        dead = np.nonzero(~mask[:, :n])
        eye1 = np.eye((T + 1) * n)[:, :n]
        cons.append(zab @ phi == eye1)
        if dead[0].size:
            cons.append(phi[dead] == 0)
        if spec.n_rows:
            cons.append(spec.H @ (phi @ x0) <= spec.h)
        y = phi @ x0
    else:
        phi = cp.Variable((r_sig, (T + 1) * n))
        dead = np.nonzero(~mask)
        cons.append(zab @ phi == np.eye((T + 1) * n))
        if dead[0].size:
            cons.append(phi[dead] == 0)
        hphi = spec.H @ phi
        nominal = hphi[:, :n] @ x0
        if case == "local_bound":
            lhs = nominal + spec.noise.sigma * _row_dual_norm_expr(hphi[:, n:], spec.noise.p)
            cons.append(lhs <= spec.h)
        elif case == "polytopic":
            xi_var = cp.Variable((spec.n_rows, spec.noise.G.shape[0]), nonneg=True)
            cons.append(nominal + xi_var @ spec.noise.g <= spec.h)
            cons.append(hphi[:, n:] == xi_var @ spec.noise.G)
        else:
            raise ValueError(f"unknown case {case!r}")
        y = phi[:, :n] @ x0

    objective = cp.Minimize(cp.sum(cp.multiply(w, cp.square(y))))
    problem = cp.Problem(objective, cons)
    _solve_with_fallback(problem, solver)

    if problem.status in ("infeasible", "infeasible_inaccurate"):
        raise InfeasibleError(f"centralized problem infeasible (status {problem.status})")
    if problem.status not in ("optimal", "optimal_inaccurate"):
        raise SolverError(f"centralized solve ended with status {problem.status}")

    phi_val = np.asarray(phi.value)
    if case == "noise_free":
        # complete the unconstrained disturbance-response columns so the
        # returned operator is a full valid closed loop
        phi_val = localized_completion(model, mask, T, first_col=phi_val)

    phi_x = BlockOperator(T, n, n, phi_val[:(T + 1) * n].copy(), masks[0].allowed)
    phi_u = BlockOperator(T, p, n, phi_val[(T + 1) * n:].copy(), masks[1].allowed,
                          pin_last_block_row=True)
    y_val = np.concatenate([phi_x.first_col_block() @ x0, phi_u.first_col_block() @ x0])
    obj = cost.value(y_val, model, T)
    u0 = phi_u.block(0, 0) @ x0
    xi_val = None if xi_var is None else np.maximum(np.asarray(xi_var.value), 0.0)
    return OracleSolution(phi_x=phi_x, phi_u=phi_u, xi=xi_val, objective=obj,
                          u0=u0, status=problem.status)


def _block_vertices(G, g):
    """Vertices of a (small, bounded) polytope {z : G z <= g} by brute force.

    Enumerates all row subsets of size dim, solves each square system, and
    keeps feasible solutions.  Intended for per-block polytopes only.
    """
    m, dim = G.shape
    verts = []
    for rows in itertools.combinations(range(m), dim):
        sub = G[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        v = np.linalg.solve(sub, g[list(rows)])
        if np.all(G @ v <= g + 1e-9):
            verts.append(v)
    uniq = []
    for v in verts:
        if not any(np.allclose(v, u, atol=1e-9) for u in uniq):
            uniq.append(v)
    return uniq


def polytope_vertices(noise, n, T, cap=2 ** 14):
    """All vertices of a block-diagonal polytopic disturbance set.

    The set factors over (time, subsystem-group) blocks, so its vertex set
    is the Cartesian product of per-block vertex sets.  Raises when the
    total count exceeds cap.
    """
    G, g = noise.G, noise.g
    col_time = np.repeat(np.arange(T), n)
    groups = []
    used_cols = np.zeros(T * n, dtype=bool)
    for t in range(T):
        rows_t = np.flatnonzero(noise.row_time == t)
        cols_t = np.flatnonzero(col_time == t)
        sub_ids = np.unique(noise.row_subsystem[rows_t])
        for s in sub_ids:
            rows = rows_t[noise.row_subsystem[rows_t] == s]
            cols = cols_t[np.any(np.abs(G[np.ix_(rows, cols_t)]) > 0, axis=0)]
            if cols.size == 0:
                continue
            used_cols[cols] = True
            groups.append((cols, _block_vertices(G[np.ix_(rows, cols)], g[rows])))
    total = 1
    for _, verts in groups:
        total *= max(len(verts), 1)
        if total > cap:
            raise ValueError(f"vertex count exceeds cap {cap}")
    out = []
    for combo in itertools.product(*[verts for _, verts in groups]):
        delta = np.zeros(T * n)
        for (cols, _), v in zip(groups, combo):
            delta[cols] = v
        out.append(delta)
    return out


def robust_violation_check(phi, spec, x0, cap=2 ** 14):
    """Worst-case constraint margin per row by direct vertex enumeration.

    phi is the stacked response matrix.  Margins <= 0 certify robust
    feasibility.  Supports the sign-pattern vertices of the infinity-norm
    ball and general block-diagonal polytopes.
    """
    phi = np.asarray(phi)
    x0 = np.asarray(x0)
    n = x0.size
    T = spec.T
    hphi = spec.H @ phi
    nominal = hphi[:, :n] @ x0
    rest = hphi[:, n:]

    noise = spec.noise
    if noise is None:
        return nominal - spec.h
    if isinstance(noise, LocalNormBound):
        if noise.p != np.inf:
            raise ValueError("vertex enumeration supports the infinity norm only")
        dims = rest.shape[1]
        if 2 ** dims > cap:
            raise ValueError(f"vertex count 2^{dims} exceeds cap {cap}")
        worst = np.full(spec.n_rows, -np.inf)
        for signs in itertools.product((-1.0, 1.0), repeat=dims):
            delta = noise.sigma * np.asarray(signs)
            worst = np.maximum(worst, rest @ delta)
        return nominal + worst - spec.h
    if isinstance(noise, PolytopeNoise):
        worst = np.full(spec.n_rows, -np.inf)
        for delta in polytope_vertices(noise, n, T, cap=cap):
            worst = np.maximum(worst, rest @ delta)
        return nominal + worst - spec.h
    raise ValueError("unsupported noise model")
