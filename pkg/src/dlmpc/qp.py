"""Small dense convex solvers.

Two entry points:

* ``solve_qp`` — a primal-dual interior-point method for dense quadratic
  programs with affine equality and inequality constraints.  The contract
  is the KKT certificate: every optimal return is checked against
  stationarity, primal feasibility, and complementary slackness.

* ``eq_ls_closed_form`` — the pseudo-inverse closed form for
  min ||M z - v||_F^2 s.t. P z = q, used to make consensus column updates a
  single cached matrix application.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["QpProblem", "KktSolution", "eq_ls_closed_form", "solve_qp", "kkt_residuals"]

_PINV_RCOND = 1e-12  # singular-value cutoff relative to the largest


@dataclass
class QpProblem:
    """min 0.5 z'Qz + c'z  s.t.  E z = e,  F z <= f.

    Q must be symmetric positive semidefinite (checked loosely).  E/F may
    be None for unconstrained directions.
    """

    Q: np.ndarray
    c: np.ndarray
    E: np.ndarray | None = None
    e: np.ndarray | None = None
    F: np.ndarray | None = None
    f: np.ndarray | None = None

    def __post_init__(self):
        nz = self.c.size
        if self.Q.shape != (nz, nz):
            raise ValueError("Q shape does not match c")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10):
            raise ValueError("Q must be symmetric")
        if self.E is None:
            self.E = np.zeros((0, nz))
            self.e = np.zeros(0)
        if self.F is None:
            self.F = np.zeros((0, nz))
            self.f = np.zeros(0)
        if self.E.shape[1] != nz or self.F.shape[1] != nz:
            raise ValueError("constraint matrices do not conform with z")
        if self.E.shape[0] != self.e.size or self.F.shape[0] != self.f.size:
            raise ValueError("constraint right-hand sides do not conform")

    def check_psd(self, floor=-1e-10):
        w = np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))
        if w.min(initial=0.0) < floor * max(1.0, abs(w).max(initial=1.0)):
            raise ValueError(f"Q has negative eigenvalue {w.min():.3e}")


@dataclass
class KktSolution:
    """Primal/dual solution with a solver status and residual summary."""

    z: np.ndarray
    mu: np.ndarray                      # equality multipliers
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    status: str = "optimal"             # optimal | infeasible | max_iter
    iterations: int = 0
    residuals: dict = field(default_factory=dict)


def kkt_residuals(problem, z, mu, lam):
    """Stationarity / primal feasibility / complementarity residual norms."""
    stat = problem.Q @ z + problem.c
    if problem.E.shape[0]:
        stat = stat + problem.E.T @ mu
    if problem.F.shape[0]:
        stat = stat + problem.F.T @ lam
    r_eq = problem.E @ z - problem.e if problem.E.shape[0] else np.zeros(0)
    slack = problem.f - problem.F @ z if problem.F.shape[0] else np.zeros(0)
    comp = lam * slack if problem.F.shape[0] else np.zeros(0)
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0)),
        "eq": float(np.abs(r_eq).max(initial=0.0)),
        "ineq": float(np.maximum(-slack, 0.0).max(initial=0.0)),
        "comp": float(np.abs(comp).max(initial=0.0)),
        "lam_min": float(lam.min(initial=0.0)),
    }


def eq_ls_closed_form(M, v, P=None, q=None, tol=1e-8):
    """Minimize ||M z - v||_F^2 subject to P z = q via one pseudo-inverse.

    Solves the stationarity system

        [M'M  P'] [z ]   [M'v]
        [P    0 ] [mu] = [q  ]

    with a rank-revealing pseudo-inverse (cutoff 1e-12 relative).  v (and
    q) may carry multiple right-hand-side columns.  If the equality system
    is inconsistent the returned status is "infeasible".
    """
    M = np.asarray(M, dtype=float)
    v = np.asarray(v, dtype=float)
    nz = M.shape[1]
    if P is None:
        P = np.zeros((0, nz))
        q = np.zeros(0) if v.ndim == 1 else np.zeros((0, v.shape[1]))
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    if P.shape[1] != nz:
        raise ValueError("P does not conform with M")

    kkt = np.block([[M.T @ M, P.T], [P, np.zeros((P.shape[0], P.shape[0]))]])
    rhs = np.concatenate([M.T @ v, q], axis=0)
    sol = np.linalg.pinv(kkt, rcond=_PINV_RCOND) @ rhs
    z, mu = sol[:nz], sol[nz:]

    if P.shape[0]:
        scale = 1.0 + np.abs(q).max(initial=0.0) + np.abs(P).max(initial=0.0)
        if np.abs(P @ z - q).max(initial=0.0) > tol * scale:
            return KktSolution(z=z, mu=mu, status="infeasible")
    return KktSolution(z=z, mu=mu, status="optimal")


def _solve_eq_qp(problem):
    """Direct KKT solve for problems without inequality rows."""
    nz = problem.c.size
    m = problem.E.shape[0]
    kkt = np.block([[problem.Q, problem.E.T], [problem.E, np.zeros((m, m))]])
    rhs = np.concatenate([-problem.c, problem.e])
    sol = np.linalg.pinv(kkt, rcond=_PINV_RCOND) @ rhs
    z, mu = sol[:nz], sol[nz:]
    if m and np.abs(problem.E @ z - problem.e).max() > 1e-8 * (
        1.0 + np.abs(problem.e).max(initial=0.0)
    ):
        return KktSolution(z=z, mu=mu, status="infeasible")
    return KktSolution(z=z, mu=mu, lam=np.zeros(0), status="optimal",
                       residuals=kkt_residuals(problem, z, mu, np.zeros(0)))


def _phase1_feasible(problem, scale):
    """LP-style feasibility probe: min t s.t. Fz - t <= f, Ez = e.

    Returns True when a feasibility witness is found, False when phase 1
    converges to a clearly positive minimum violation, None when unsure.
    """
    nz = problem.c.size
    mF = problem.F.shape[0]
    Q = np.zeros((nz + 1, nz + 1))
    Q[np.diag_indices(nz)] = 1e-8          # tiny curvature keeps the IPM happy
    Q[-1, -1] = 1e-8
    c = np.zeros(nz + 1)
    c[-1] = 1.0
    E = np.hstack([problem.E, np.zeros((problem.E.shape[0], 1))])
    F = np.hstack([problem.F, -np.ones((mF, 1))])
    aux = QpProblem(Q=Q, c=c, E=E, e=problem.e.copy(), F=F, f=problem.f.copy())
    sol = _ipm(aux, tol=1e-7, max_iter=150, allow_phase1=False)
    z = sol.z[:nz]
    viol = float(np.max(problem.F @ z - problem.f, initial=0.0))
    if problem.E.shape[0]:
        viol = max(viol, float(np.abs(problem.E @ z - problem.e).max(initial=0.0)))
    if viol <= 1e-6 * scale:
        return True                         # concrete witness in hand
    if sol.status == "optimal" and sol.z[-1] > 1e-5 * scale:
        return False
    return None


def _ipm(problem, tol, max_iter, allow_phase1=True):
    """Mehrotra-style predictor-corrector primal-dual interior point."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _ipm_loop(problem, tol, max_iter, allow_phase1)


def _ipm_loop(problem, tol, max_iter, allow_phase1):
    nz = problem.c.size
    E, e, F, f = problem.E, problem.e, problem.F, problem.f
    mE, mF = E.shape[0], F.shape[0]

    scale = 1.0 + max(
        np.abs(problem.Q).max(initial=0.0), np.abs(problem.c).max(initial=0.0),
        np.abs(E).max(initial=0.0), np.abs(e).max(initial=0.0),
        np.abs(F).max(initial=0.0), np.abs(f).max(initial=0.0),
    )

    if mE:
        z = np.linalg.lstsq(E, e, rcond=None)[0]
    else:
        z = np.zeros(nz)
    s = np.maximum(f - F @ z, 1.0)
    lam = np.ones(mF)
    mu_eq = np.zeros(mE)
    reg = 1e-12 * scale

    best_infeas = np.inf
    stall = 0
    for it in range(1, max_iter + 1):
        r_d = problem.Q @ z + problem.c + E.T @ mu_eq + F.T @ lam
        r_e = E @ z - e
        r_i = F @ z + s - f
        mu = float(s @ lam) / mF if mF else 0.0

        infeas = max(np.abs(r_e).max(initial=0.0), np.abs(r_i).max(initial=0.0))
        if (np.abs(r_d).max(initial=0.0) <= tol * scale
                and infeas <= tol * scale and mu <= tol * scale):
            return KktSolution(z=z, mu=mu_eq, lam=lam, status="optimal", iterations=it,
                               residuals=kkt_residuals(problem, z, mu_eq, lam))

        # infeasibility heuristic: primal residual refuses to shrink while
        # the barrier parameter collapses or multipliers explode
        if infeas < best_infeas - 1e-14 * scale:
            best_infeas = infeas
            stall = 0
        else:
            stall += 1
        blown = it > 20 and np.abs(lam).max(initial=0.0) > 1e12 * scale
        if (stall > 25 and infeas > 1e4 * tol * scale) or blown:
            if allow_phase1 and _phase1_feasible(problem, scale) is False:
                return KktSolution(z=z, mu=mu_eq, lam=lam, status="infeasible", iterations=it)
            stall = 0
            reg = min(reg * 10.0, 1e-6 * scale)

        d = lam / s                       # diagonal of the eliminated block
        h_mat = problem.Q + F.T @ (d[:, None] * F)
        h_mat = h_mat + reg * np.eye(nz)
        kkt = np.block([[h_mat, E.T], [E, -reg * np.eye(mE)]])

        def newton(rd, re, ri, rc):
            # eliminate ds and dlam, solve for (dz, dmu), back-substitute
            tmp = F.T @ ((rc + lam * ri) / s) if mF else np.zeros(nz)
            rhs = np.concatenate([-rd - tmp, -re])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            dz = sol[:nz]
            dmu = sol[nz:]
            ds = -ri - F @ dz if mF else np.zeros(0)
            dlam = (rc - lam * ds) / s if mF else np.zeros(0)
            return dz, dmu, ds, dlam

        # predictor
        rc_aff = -(s * lam)
        dz, dmu, ds, dlam = newton(r_d, r_e, r_i, rc_aff)
        if mF:
            alpha_p = _step_len(s, ds)
            alpha_d = _step_len(lam, dlam)
            mu_aff = float((s + alpha_p * ds) @ (lam + alpha_d * dlam)) / mF
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            rc = -(s * lam) - ds * dlam + sigma * mu
            dz, dmu, ds, dlam = newton(r_d, r_e, r_i, rc)
            alpha_p = min(1.0, 0.99 * _step_len(s, ds))
            alpha_d = min(1.0, 0.99 * _step_len(lam, dlam))
        else:
            alpha_p = alpha_d = 1.0
        z_n = z + alpha_p * dz
        s_n = s + alpha_p * ds if mF else s
        mu_n = mu_eq + alpha_d * dmu
        lam_n = lam + alpha_d * dlam if mF else lam
        if not (np.all(np.isfinite(z_n)) and np.all(np.isfinite(lam_n))):
            reg = min(max(reg * 100.0, 1e-10 * scale), 1e-6 * scale)
            continue
        z, s, mu_eq, lam = z_n, s_n, mu_n, lam_n

    return KktSolution(z=z, mu=mu_eq, lam=lam, status="max_iter", iterations=max_iter,
                       residuals=kkt_residuals(problem, z, mu_eq, lam))


def _step_len(x, dx):
    """Largest alpha in (0, 1e10] keeping x + alpha dx > 0."""
    neg = dx < 0
    if not np.any(neg):
        return 1e10
    return float(np.min(-x[neg] / dx[neg]))


def solve_qp(problem, tol=1e-8, max_iter=100):
    """Solve a QpProblem; deterministic for fixed inputs.

    Returns a KktSolution whose residuals dict certifies the solve; status
    is "infeasible" when primal feasibility cannot be attained and
    "max_iter" when the iteration budget runs out.
    """
    problem.check_psd()
    if problem.E.shape[0]:
        # inconsistent equalities are caught up front by a least-squares probe
        z_ls = np.linalg.lstsq(problem.E, problem.e, rcond=None)[0]
        resid = np.abs(problem.E @ z_ls - problem.e).max(initial=0.0)
        if resid > 1e-8 * (1.0 + np.abs(problem.e).max(initial=0.0)):
            return KktSolution(z=z_ls, mu=np.zeros(problem.E.shape[0]),
                               status="infeasible")
    if problem.F.shape[0] == 0:
        return _solve_eq_qp(problem)
    return _ipm(problem, tol=tol, max_iter=max_iter)
