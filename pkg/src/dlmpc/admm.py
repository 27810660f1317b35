"""ADMM engine: per-subsystem row and column updates over the consensus split.

Each iteration runs three barrier-separated phases across subsystems:

1. row updates   -- every subsystem solves a small constrained problem for
   its rows of the row-separable copy (and its multiplier rows in the
   polytopic regime);
2. column updates -- every subsystem solves, in closed form, a consensus
   least-squares problem for its columns of the response copy subject to
   its local slice of the achievability constraint;
3. dual updates   -- the scaled dual accumulates the consensus gap.

All slice index sets are fixed ahead of iteration from the structural
masks, so every update touches only data inside the owning subsystem's
communication patch, and the per-subsystem work is independent of the
global system size.  Rows sharing a support pattern are updated as one
vectorized batch; projections with a single coupling inequality are solved
exactly by a monotone scalar-dual bisection, falling back to the dense QP
solver for general row structure.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .constraints import (LocalNormBound, PolytopeNoise, QuadraticCost,
                          build_augmented, response_mask)
from .errors import InfeasibleError, SolverError
from .qp import QpProblem, solve_qp
from .sls_core import BlockOperator, achievability_matrix, localized_completion

__all__ = [
    "AdmmConfig",
    "SolveResult",
    "DlmpcSolver",
    "solve_dlmpc",
    "check_localizability",
    "check_convergence",
]


@dataclass(frozen=True)
class AdmmConfig:
    """Penalty, tolerances, and iteration budget for the consensus loop."""

    rho: float = 1.0
    eps_p: float = 1e-4
    eps_d: float = 1e-4
    max_iter: int = 5000
    warm_start: bool = False

    def __post_init__(self):
        if self.rho <= 0 or self.eps_p <= 0 or self.eps_d <= 0 or self.max_iter <= 0:
            raise ValueError("ADMM parameters must be positive")


@dataclass
class SolveResult:
    phi_x: BlockOperator
    phi_u: BlockOperator
    u0: np.ndarray
    iterations: int
    objective: float
    xi: np.ndarray | None = None
    telemetry: list = field(default_factory=list)   # (k, max primal, max dual)
    subsystem_times: np.ndarray | None = None       # mean s/iter per subsystem
    warm_state: dict | None = None


def check_convergence(primal, dual, eps_p, eps_d):
    """Per-subsystem stopping flags from residual arrays."""
    return (np.asarray(primal) <= eps_p) & (np.asarray(dual) <= eps_d)


def check_localizability(model, masks, T, tol=1e-6):
    """True iff the locality masks admit an exact closed-loop response."""
    mask = response_mask(masks, model, T)
    phi = localized_completion(model, mask, T)
    zab = achievability_matrix(model, T)
    res = np.abs(zab @ phi - np.eye((T + 1) * model.n)).max()
    return bool(res <= tol)


# ----------------------------------------------------------------------
# exact projections with one coupling inequality (vectorized over rows)
# ----------------------------------------------------------------------

def _weighted_soft_threshold(tv, thresh, wts):
    """Rowwise prox of the weighted l1 penalty thresh_r * sum_c w_c |v_c|."""
    cut = thresh[:, None] * wts[None, :]
    return np.sign(tv) * np.maximum(np.abs(tv) - cut, 0.0)


def _project_rows_weighted_l1(ta, tv, xa, wts, h):
    """Project rows (a_r, v_r) onto {a_r . xa + sum_c w_c |v_rc| <= h_r}.

    The scalar dual of each row's projection solves a piecewise-linear
    equation whose breakpoints are the soft-threshold knees |tv_rc| / w_c;
    sorting them gives the exact root in one pass, vectorized over rows.
    Rows already feasible must be filtered out by the caller.
    """
    n_rows, ncol = tv.shape
    B = float(xa @ xa)
    A = ta @ xa - h                      # constraint excess at mu = 0 (before v term)
    live = wts > 0
    if ncol == 0 or not live.any():
        if B <= 0:
            raise InfeasibleError("robust row bound unreachable")
        mu = np.maximum(A / B, 0.0)
        return ta - mu[:, None] * xa[None, :], tv.copy()

    s = np.abs(tv[:, live]) * wts[live][None, :]      # w_c |t_c|
    q = np.broadcast_to(wts[live] ** 2, s.shape)      # w_c^2
    knees = np.abs(tv[:, live]) / wts[live][None, :]
    order = np.argsort(knees, axis=1)
    m = np.take_along_axis(knees, order, axis=1)
    s = np.take_along_axis(s, order, axis=1)
    q = np.take_along_axis(np.ascontiguousarray(q), order, axis=1)
    # suffix sums over coordinates still active beyond each knee
    S = np.cumsum(s[:, ::-1], axis=1)[:, ::-1]
    Q = np.cumsum(q[:, ::-1], axis=1)[:, ::-1]
    S = np.hstack([S, np.zeros((n_rows, 1))])
    Q = np.hstack([Q, np.zeros((n_rows, 1))])
    # f on the segment starting at knee j: (A + S[j]) - mu (B + Q[j])
    f_at_knee = (A[:, None] + S[:, 1:]) - m * (B + Q[:, 1:])
    seg = np.argmax(f_at_knee <= 0, axis=1)
    none_neg = ~(f_at_knee <= 0).any(axis=1)
    seg[none_neg] = m.shape[1]           # root beyond the last knee
    denom = B + Q[np.arange(n_rows), seg]
    if np.any(denom <= 0):
        raise InfeasibleError("robust row bound unreachable")
    mu = (A + S[np.arange(n_rows), seg]) / denom
    mu = np.maximum(mu, 0.0)
    return (ta - mu[:, None] * xa[None, :],
            _weighted_soft_threshold(tv, mu, wts))


def _project_rows_dual_norm(ta, tv, xa, sigma, p, h):
    """Rowwise projection onto {a . xa + sigma ||v||_* <= h} for p in {inf,2,1}."""
    if p == np.inf:
        wts = np.full(tv.shape[1], sigma)
        return _project_rows_weighted_l1(ta, tv, xa, wts, h)

    # p = 2 and p = 1 are solved row by row with the same monotone dual
    def prox(v, c):
        if p == 2:
            nrm = np.linalg.norm(v)
            if nrm <= c:
                return np.zeros_like(v)
            return (1.0 - c / nrm) * v
        # p = 1: dual norm is l-infinity; Moreau with the l1-ball projection
        return v - _project_l1_ball(v, c)

    def dnorm(v):
        if p == 2:
            return float(np.linalg.norm(v))
        return float(np.abs(v).max(initial=0.0))

    a_out = np.empty_like(ta)
    v_out = np.empty_like(tv)
    for r in range(ta.shape[0]):
        def val(mu):
            return float((ta[r] - mu * xa) @ xa) + sigma * dnorm(prox(tv[r], mu * sigma)) - h[r]
        hi = 1.0
        for _ in range(400):
            if val(hi) <= 0:
                break
            hi *= 2.0
        else:
            raise InfeasibleError("robust row bound unreachable")
        lo = 0.0
        for _ in range(120):
            mid = 0.5 * (lo + hi)
            if val(mid) > 0:
                lo = mid
            else:
                hi = mid
        a_out[r] = ta[r] - hi * xa
        v_out[r] = prox(tv[r], hi * sigma)
    return a_out, v_out


def _project_l1_ball(v, radius):
    """Euclidean projection of v onto the l1 ball of the given radius."""
    if np.abs(v).sum() <= radius:
        return v.copy()
    u = np.sort(np.abs(v))[::-1]
    cum = np.cumsum(u)
    ks = np.arange(1, v.size + 1)
    cond = u - (cum - radius) / ks > 0
    k = ks[cond][-1]
    tau = (cum[k - 1] - radius) / k
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def _dual_norm_rows(v, p):
    if p == np.inf:
        return np.abs(v).sum(axis=1)
    if p == 2:
        return np.sqrt((v * v).sum(axis=1))
    if p == 1:
        return np.abs(v).max(axis=1, initial=0.0)
    raise ValueError(f"unsupported norm index {p}")


# ----------------------------------------------------------------------
# layout records
# ----------------------------------------------------------------------

@dataclass
class _SignalGroup:
    """A batch of signal rows sharing one nominal-column support."""

    rows: np.ndarray          # global stacked row indices
    sup: np.ndarray           # supported x0 columns
    weights: np.ndarray       # per-row cost weights
    lo: np.ndarray            # per-row nominal-value bounds (noise-free only)
    hi: np.ndarray
    mesh: tuple = None        # cached open mesh (rows x sup)

    def __post_init__(self):
        self.mesh = np.ix_(self.rows, self.sup)


@dataclass
class _ConsGroup:
    """A batch of constraint rows sharing supports (same kind and time)."""

    ks: np.ndarray            # spec row indices
    a_sup: np.ndarray         # nominal-column support
    v_cols: np.ndarray        # disturbance-column support (global indices)
    h: np.ndarray
    r_sig: int                # augmented-row offset of the constraint block
    # polytopic-only fields
    box_wts: np.ndarray | None = None     # per-column worst-case weights
    box_pos: np.ndarray | None = None     # G-row index realizing v_c > 0
    box_neg: np.ndarray | None = None
    box_pos_coef: np.ndarray | None = None
    box_neg_coef: np.ndarray | None = None
    general: list | None = None           # per-row data for the QP fallback
    mesh_a: tuple = None      # augmented rows x a_sup
    mesh_v: tuple = None
    tgt_a: tuple = None       # spec rows x a_sup (into the gathered H psi)
    tgt_v: tuple = None
    mesh_all: tuple = None
    tgt_all: tuple = None

    def __post_init__(self):
        rows = self.r_sig + self.ks
        allc = np.concatenate([self.a_sup, self.v_cols])
        self.mesh_a = np.ix_(rows, self.a_sup)
        self.mesh_v = np.ix_(rows, self.v_cols)
        self.tgt_a = np.ix_(self.ks, self.a_sup)
        self.tgt_v = np.ix_(self.ks, self.v_cols)
        self.mesh_all = np.ix_(rows, allc)
        self.tgt_all = np.ix_(self.ks, allc)


@dataclass
class _GeneralConsRow:
    k: int
    a_sup: np.ndarray
    v_cols: np.ndarray
    h: float
    xi_sup: np.ndarray
    g_sub: np.ndarray
    G_sub: np.ndarray
    GGT: np.ndarray
    G_pinv: np.ndarray


class DlmpcSolver:
    """Reusable distributed solver for one (model, spec, masks) triple.

    Construction precomputes every slice index set and factorization; each
    ``solve(x0)`` then runs the consensus iteration.  Reuse across MPC
    steps keeps the per-step cost down and enables warm starting.
    """

    def __init__(self, model, spec, masks, config=None, cost=None, case=None):
        self.model = model
        self.spec = spec
        self.masks = masks
        self.config = config or AdmmConfig()
        self.cost = cost or QuadraticCost()
        if case is None:
            case = {type(None): "noise_free", LocalNormBound: "local_bound",
                    PolytopeNoise: "polytopic"}[type(spec.noise)]
        self.case = case
        self.T = spec.T
        self._build_layout()

    # ----- layout -------------------------------------------------------

    def _signal_groups(self, i, mask, row_bounds):
        """x-row and u-row batches for subsystem i (shared supports)."""
        model, T = self.model, self.T
        n, p = model.n, model.p
        groups = []
        x_rows = np.concatenate([t * n + model.state_coords(i) for t in range(T + 1)])
        u_rows = np.concatenate(
            [(T + 1) * n + t * p + model.input_coords(i) for t in range(T)]
        ) if model.input_dims[i] else np.zeros(0, dtype=int)
        for rows in (x_rows, u_rows):
            if rows.size == 0:
                continue
            sup = np.flatnonzero(mask[rows[0], :n])
            lo = np.array([row_bounds.get(int(r), (-np.inf, np.inf))[0] for r in rows])
            hi = np.array([row_bounds.get(int(r), (-np.inf, np.inf))[1] for r in rows])
            groups.append(_SignalGroup(rows=rows, sup=sup,
                                       weights=self.weights[rows].copy(), lo=lo, hi=hi))
        return groups

    def _box_structure(self, ks, v_cols):
        """Per-column worst-case weights when the polytope is a coordinate box.

        Returns None unless every G row covering the columns has a single
        nonzero coefficient and each column's positive/negative bounds are
        symmetric; in that case the robust budget is a weighted l1 norm.
        """
        noise = self.spec.noise
        G, g = noise.G, noise.g
        xi_any = self.pair.xi_mask.allowed[ks].any(axis=0)
        wts = np.empty(v_cols.size)
        pos_row = np.empty(v_cols.size, dtype=int)
        neg_row = np.empty(v_cols.size, dtype=int)
        pos_coef = np.empty(v_cols.size)
        neg_coef = np.empty(v_cols.size)
        n = self.model.n
        for idx, c in enumerate(v_cols - n):
            rows = np.flatnonzero((np.abs(G[:, c]) > 0) & xi_any)
            if rows.size == 0:
                return None
            if np.any(np.count_nonzero(G[rows], axis=1) != 1):
                return None
            coefs = G[rows, c]
            pr = rows[coefs > 0]
            nr = rows[coefs < 0]
            if pr.size == 0 or nr.size == 0:
                return None
            up = np.min(g[pr] / G[pr, c])
            dn = np.min(g[nr] / -G[nr, c])     # lower bound magnitude
            if not np.isclose(up, dn, rtol=1e-12, atol=0.0):
                return None
            kp = pr[np.argmin(g[pr] / G[pr, c])]
            kn = nr[np.argmin(g[nr] / -G[nr, c])]
            wts[idx] = up
            pos_row[idx], neg_row[idx] = kp, kn
            pos_coef[idx], neg_coef[idx] = G[kp, c], -G[kn, c]
        return wts, pos_row, neg_row, pos_coef, neg_coef

    def _cons_groups(self, i, h_struct):
        """Constraint-row batches for subsystem i, grouped by (kind, time)."""
        spec, pair = self.spec, self.pair
        groups = []
        spec_rows = spec.rows_of(i)
        if spec_rows.size == 0:
            return groups
        n = self.model.n
        for kind in ("x", "u"):
            for t in range(self.T + 1):
                ks = spec_rows[(spec.row_kind[spec_rows] == kind)
                               & (spec.row_time[spec_rows] == t)]
                if ks.size == 0:
                    continue
                a_sup = np.flatnonzero(pair.cons0_mask[ks].any(axis=0))
                v_cols = n + np.flatnonzero(pair.cons_rest_mask[ks].any(axis=0))
                grp = _ConsGroup(ks=ks, a_sup=a_sup, v_cols=v_cols,
                                 h=spec.h[ks].copy(), r_sig=pair.n_signal_rows)
                if self.case == "polytopic":
                    box = self._box_structure(ks, v_cols)
                    if box is not None:
                        (grp.box_wts, grp.box_pos, grp.box_neg,
                         grp.box_pos_coef, grp.box_neg_coef) = box
                    else:
                        grp.general = [self._general_cons_row(int(k)) for k in ks]
                groups.append(grp)
        return groups

    def _general_cons_row(self, k):
        spec, pair = self.spec, self.pair
        n = self.model.n
        a_sup = np.flatnonzero(pair.cons0_mask[k])
        v_cols = n + np.flatnonzero(pair.cons_rest_mask[k])
        xi_sup = np.flatnonzero(pair.xi_mask.allowed[k])
        G_sub = spec.noise.G[np.ix_(xi_sup, v_cols - n)]
        return _GeneralConsRow(
            k=k, a_sup=a_sup, v_cols=v_cols, h=float(spec.h[k]),
            xi_sup=xi_sup, g_sub=spec.noise.g[xi_sup].copy(), G_sub=G_sub,
            GGT=G_sub @ G_sub.T, G_pinv=np.linalg.pinv(G_sub.T, rcond=1e-12),
        )

    def _build_layout(self):
        model, spec, T = self.model, self.spec, self.T
        n, p, N = model.n, model.p, model.n_subsystems
        pair = build_augmented(self.case, model, spec, self.masks, T)
        self.pair = pair
        self.zab = achievability_matrix(model, T)
        self._zab_struct = np.abs(self.zab) > 0
        self.weights = self.cost.row_weights(model, T)
        self.noise_free = self.case == "noise_free"
        self.n_cols = pair.phi.shape[1]

        mask = pair.phi_mask
        h_struct = np.abs(spec.H) > 0
        multi = np.count_nonzero(h_struct, axis=1) > 1
        if self.noise_free and multi.any():
            self._nf_coupled = True      # general H: per-subsystem QP fallback
        else:
            self._nf_coupled = False

        self.sig_groups = []
        self.cons_groups = []
        self.x0_patch = []
        self.h_sparse = []               # per-subsystem sparse rows of H
        self.sig_rows = []
        self.col_groups = []

        for i in range(N):
            row_bounds = {}
            if self.noise_free:
                for k in spec.rows_of(i):
                    nz = np.flatnonzero(h_struct[k])
                    if nz.size != 1:
                        continue
                    r, coef = int(nz[0]), spec.H[k, nz[0]]
                    lo, hi = row_bounds.get(r, (-np.inf, np.inf))
                    bound = spec.h[k] / coef
                    if coef > 0:
                        hi = min(hi, bound)
                    else:
                        lo = max(lo, bound)
                    row_bounds[r] = (lo, hi)
            sgroups = self._signal_groups(i, mask, row_bounds)
            self.sig_groups.append(sgroups)
            self.sig_rows.append(np.concatenate([g.rows for g in sgroups]))

            cgroups = [] if self.noise_free else self._cons_groups(i, h_struct)
            self.cons_groups.append(cgroups)

            patch = set()
            for g in sgroups:
                patch.update(g.sup.tolist())
            for g in cgroups:
                patch.update(g.a_sup.tolist())
            self.x0_patch.append(np.asarray(sorted(patch), dtype=int))

            rows_i = spec.rows_of(i)
            self.h_sparse.append(
                sparse.csr_matrix(spec.H[rows_i]) if rows_i.size else None)

        # column groups: one per (subsystem, time block), shared sparsity
        eyec = np.eye((T + 1) * n)
        max_block = 1 if self.noise_free else T + 1
        for j in range(N):
            groups = []
            for t in range(max_block):
                cols = t * n + model.state_coords(j)
                sup = np.flatnonzero(mask[:, cols[0]])
                if sup.size == 0:
                    continue
                ach_rows = np.flatnonzero(self._zab_struct[:, sup].any(axis=1))
                P = self.zab[np.ix_(ach_rows, sup)]
                q = eyec[np.ix_(ach_rows, cols)]
                m_blocks = []
                cons_idx = np.zeros(0, dtype=int)
                if t == 0:
                    m_blocks.append(np.eye(sup.size))
                if not self.noise_free:
                    blk = pair.cons0_mask if t == 0 else pair.cons_rest_mask
                    cmask_cols = cols if t == 0 else cols - n
                    cons_idx = np.flatnonzero(blk[:, cmask_cols].any(axis=1))
                    if cons_idx.size:
                        m_blocks.append(spec.H[np.ix_(cons_idx, sup)])
                M = np.vstack(m_blocks) if m_blocks else np.zeros((0, sup.size))
                kkt = np.block([
                    [M.T @ M, P.T],
                    [P, np.zeros((P.shape[0], P.shape[0]))],
                ])
                kinv = np.linalg.pinv(kkt, rcond=1e-12)[:sup.size]
                groups.append({
                    "t": t, "cols": cols, "sup": sup,
                    "P": P, "q": q, "M": M, "cons_idx": cons_idx,
                    "kinv": kinv, "nv": sup.size,
                    "mesh": np.ix_(sup, cols),
                    "mesh_cons": np.ix_(pair.n_signal_rows + cons_idx, cols),
                })
            self.col_groups.append(groups)

        self._cons_target = (np.zeros((spec.n_rows, self.n_cols))
                             if not self.noise_free else None)
        self._psi_mask = mask[:, :pair.psi.shape[1]]
        lam_mask = np.zeros(pair.lam.shape, dtype=bool)
        lam_mask[:pair.n_signal_rows, :n] = mask[:, :n]
        if not self.noise_free:
            lam_mask[pair.n_signal_rows:, :n] = pair.cons0_mask
            lam_mask[pair.n_signal_rows:, n:] = pair.cons_rest_mask
        self._lam_mask = lam_mask

    # ----- solve --------------------------------------------------------

    def solve(self, x0, warm=None, transport=None, collect_telemetry=True,
              workers=1):
        """Run the consensus iteration from initial state x0.

        warm may carry {psi, lam, xi} from a previous solve (already
        shifted); transport, when given, materializes and audits the
        inter-subsystem shares of every phase.  workers > 1 runs each
        phase's per-subsystem updates on a thread pool; results are
        identical to the sequential schedule because phases are barriers
        and every update writes a disjoint slice.
        """
        model, cfg = self.model, self.config
        N = model.n_subsystems
        T, n = self.T, model.n
        pair = self.pair
        x0 = np.asarray(x0, dtype=float)

        psi = np.zeros_like(pair.psi)
        lam = np.zeros_like(pair.lam)
        phi = np.zeros_like(pair.phi)
        xi = None if pair.xi is None else np.zeros_like(pair.xi)
        if warm is not None:
            psi[:] = np.where(self._psi_mask, warm["psi"], 0.0)
            lam[:] = np.where(self._lam_mask, warm["lam"], 0.0)
            if xi is not None and warm.get("xi") is not None:
                xi[:] = np.where(pair.xi_mask.allowed, warm["xi"], 0.0)

        if transport is not None:
            transport.share_states(x0, self)

        telemetry = []
        sub_time = np.zeros(N)
        sub_iters = 0
        cons_tgt = self._cons_target
        if cons_tgt is not None:
            cons_tgt.fill(0.0)
            for i in range(N):
                self._refresh_cons_target(i, psi, cons_tgt)

        primal = np.full(N, np.inf)
        dual = np.full(N, np.inf)
        iters = 0
        pool = None
        if workers and workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            pool = ThreadPoolExecutor(max_workers=workers)

        def run_phase(task):
            if pool is None:
                for i in range(N):
                    task(i)
            else:
                list(pool.map(task, range(N)))

        def row_task(i):
            t0 = time.perf_counter()
            self._row_update(i, x0, phi, psi, lam, xi, cons_tgt)
            sub_time[i] += time.perf_counter() - t0

        def col_task(i):
            t0 = time.perf_counter()
            self._col_update(i, phi, psi, lam)
            sub_time[i] += time.perf_counter() - t0

        def dual_task(i):
            t0 = time.perf_counter()
            if cons_tgt is not None:
                self._refresh_cons_target(i, psi, cons_tgt)
            primal[i], dual[i] = self._dual_update(i, phi, psi, psi_prev, lam,
                                                   cons_tgt)
            sub_time[i] += time.perf_counter() - t0

        rp_history = []
        try:
            for k in range(1, cfg.max_iter + 1):
                iters = k
                psi_prev = psi.copy()
                run_phase(row_task)
                if transport is not None:
                    transport.share_rows(k, self)
                run_phase(col_task)
                if transport is not None:
                    transport.share_cols(k, self)
                run_phase(dual_task)
                if k == 1:
                    sub_time[:] = 0.0   # first iteration is cold; excluded
                else:
                    sub_iters += 1
                if collect_telemetry:
                    telemetry.append((k, float(primal.max()), float(dual.max())))
                if np.all(check_convergence(primal, dual, cfg.eps_p, cfg.eps_d)):
                    break
                # an infeasible problem drives the iterates toward the gap
                # between the two constraint sets: the consensus residual
                # freezes at a positive value while the copies stop moving
                rp_history.append(float(primal.max()))
                if (len(rp_history) > 60 and rp_history[-1] > 100 * cfg.eps_p
                        and dual.max() <= cfg.eps_d
                        and abs(rp_history[-1] - rp_history[-50])
                        <= 1e-8 * rp_history[-1]):
                    raise InfeasibleError(
                        "consensus residual stalled at "
                        f"{rp_history[-1]:.2e}; the problem is infeasible "
                        "at this initial state")
            else:
                raise SolverError(
                    f"consensus iteration did not converge in {cfg.max_iter} "
                    f"iterations (primal {primal.max():.2e}, dual {dual.max():.2e})"
                )
        finally:
            if pool is not None:
                pool.shutdown(wait=False)
            # timing survives a max_iter abort so benchmarks can harvest it
            self.last_subsystem_times = sub_time / max(sub_iters, 1)

        phi_full = self._extract(psi)
        phi_x = BlockOperator(T, n, n, phi_full[:(T + 1) * n].copy(),
                              self.masks[0].allowed)
        phi_u = BlockOperator(T, model.p, n, phi_full[(T + 1) * n:].copy(),
                              self.masks[1].allowed, pin_last_block_row=True)
        u0 = phi_u.block(0, 0) @ x0
        y = np.concatenate([phi_x.first_col_block() @ x0,
                            phi_u.first_col_block() @ x0])
        return SolveResult(
            phi_x=phi_x, phi_u=phi_u, u0=u0, iterations=iters,
            objective=self.cost.value(y, model, T),
            xi=None if xi is None else xi.copy(),
            telemetry=telemetry,
            subsystem_times=sub_time / max(sub_iters, 1),
            warm_state={"psi": psi.copy(), "lam": lam.copy(),
                        "xi": None if xi is None else xi.copy()},
        )

    # ----- iteration pieces ----------------------------------------------

    def _refresh_cons_target(self, i, psi, cons_tgt):
        """Recompute H psi on subsystem i's constraint rows (patch-local)."""
        hs = self.h_sparse[i]
        if hs is None:
            return
        cons_tgt[self.spec.rows_of(i)] = hs @ psi

    def _row_update(self, i, x0, phi, psi, lam, xi, cons_tgt):
        rho = self.config.rho
        if self._nf_coupled:
            self._row_update_coupled(i, x0, phi, psi, lam)
        else:
            for g in self.sig_groups[i]:
                if g.sup.size == 0:
                    continue
                tgt = psi[g.mesh] - lam[g.mesh]
                a = x0[g.sup]
                na2 = float(a @ a)
                c = (2.0 / rho) * g.weights
                if na2 > 0:
                    ip = tgt @ a
                    z = tgt - np.outer(c * ip / (1.0 + c * na2), a)
                    y = z @ a
                    y_cl = np.clip(y, g.lo, g.hi)
                    fix = y_cl != y
                    if fix.any():
                        if np.any(g.lo > g.hi + 1e-12):
                            raise InfeasibleError("conflicting nominal bounds",
                                                  subsystem=i)
                        z[fix] = tgt[fix] + np.outer((y_cl[fix] - ip[fix]) / na2, a)
                else:
                    z = tgt
                    if np.any(g.lo > 1e-12) or np.any(g.hi < -1e-12):
                        raise InfeasibleError(
                            "zero local state cannot satisfy a strict bound",
                            subsystem=i)
                phi[g.mesh] = z
        if self.noise_free:
            return
        for g in self.cons_groups[i]:
            ta = cons_tgt[g.tgt_a] - lam[g.mesh_a]
            tv = cons_tgt[g.tgt_v] - lam[g.mesh_v]
            xa = x0[g.a_sup]
            if self.case == "local_bound":
                noise = self.spec.noise
                a, v = self._project_group_norm(ta, tv, xa, noise.sigma, noise.p,
                                                g.h, i)
                phi[g.mesh_a] = a
                phi[g.mesh_v] = v
            elif g.box_wts is not None:
                a, v = self._project_group_norm(ta, tv, xa, None, "box", g.h, i,
                                                box_wts=g.box_wts)
                phi[g.mesh_a] = a
                phi[g.mesh_v] = v
                self._box_multipliers(g, v, xi)
            else:
                for row_data in g.general:
                    self._general_cons_row_update(i, row_data, x0, phi, lam, xi,
                                                  cons_tgt)

    def _project_group_norm(self, ta, tv, xa, sigma, p, h, i, box_wts=None):
        """Batch projection with the fast feasible-row bypass."""
        if p == "box":
            budget = np.abs(tv) @ box_wts
        else:
            budget = sigma * _dual_norm_rows(tv, p)
        lhs = ta @ xa + budget
        bad = lhs > h + 1e-14
        a, v = ta.copy(), tv.copy()
        if bad.any():
            if p == "box":
                a[bad], v[bad] = _project_rows_weighted_l1(
                    ta[bad], tv[bad], xa, box_wts, h[bad])
            elif p == np.inf:
                a[bad], v[bad] = _project_rows_weighted_l1(
                    ta[bad], tv[bad], xa, np.full(tv.shape[1], sigma), h[bad])
            else:
                a[bad], v[bad] = _project_rows_dual_norm(
                    ta[bad], tv[bad], xa, sigma, p, h[bad])
        return a, v

    def _box_multipliers(self, g, v, xi):
        """Recover the nonnegative multiplier rows from box-case values."""
        pos = np.maximum(v, 0.0) / g.box_pos_coef[None, :]
        neg = np.maximum(-v, 0.0) / g.box_neg_coef[None, :]
        xi[g.ks, :] = 0.0
        for idx in range(g.ks.size):
            k = g.ks[idx]
            np.add.at(xi[k], g.box_pos, pos[idx])
            np.add.at(xi[k], g.box_neg, neg[idx])

    def _general_cons_row_update(self, i, entry, x0, phi, lam, xi, cons_tgt):
        """QP fallback for one constraint row with general polytope rows."""
        rho = self.config.rho
        r_aug = self.pair.n_signal_rows + entry.k
        a_sup, v_cols = entry.a_sup, entry.v_cols
        ta = cons_tgt[entry.k, a_sup] - lam[r_aug, a_sup]
        tv = cons_tgt[entry.k, v_cols] - lam[r_aug, v_cols]
        xa = x0[a_sup]
        xi_sup = entry.xi_sup
        if xi_sup.size == 0:
            if float(xa @ ta) <= entry.h + 1e-14:
                a = ta
            else:
                a, _ = _project_rows_weighted_l1(
                    ta[None, :], np.zeros((1, 0)), xa, np.zeros(0),
                    np.array([entry.h]))
                a = a[0]
            phi[r_aug, a_sup] = a
            xi[entry.k, :] = 0.0
            return
        xi_ls = entry.G_pinv @ tv
        if (xi_ls.min(initial=0.0) >= 0.0
                and float(xa @ ta) + float(xi_ls @ entry.g_sub) <= entry.h + 1e-14):
            a, xrow = ta, xi_ls
        else:
            nv = a_sup.size + xi_sup.size
            Q = np.zeros((nv, nv))
            Q[:a_sup.size, :a_sup.size] = rho * np.eye(a_sup.size)
            ridge = 1e-10 * rho * max(1.0, float(np.trace(entry.GGT)))
            Q[a_sup.size:, a_sup.size:] = rho * entry.GGT + ridge * np.eye(xi_sup.size)
            c = np.concatenate([-rho * ta, -rho * (entry.G_sub @ tv)])
            F = np.zeros((1 + xi_sup.size, nv))
            F[0, :a_sup.size] = xa
            F[0, a_sup.size:] = entry.g_sub
            F[1:, a_sup.size:] = -np.eye(xi_sup.size)
            f = np.concatenate([[entry.h], np.zeros(xi_sup.size)])
            sol = solve_qp(QpProblem(Q=Q, c=c, F=F, f=f), tol=1e-10, max_iter=200)
            if sol.status == "infeasible":
                raise InfeasibleError("robust row subproblem infeasible", subsystem=i)
            if sol.status != "optimal":
                raise SolverError(f"robust row subproblem failed for subsystem {i}")
            a = sol.z[:a_sup.size]
            xrow = np.maximum(sol.z[a_sup.size:], 0.0)
        phi[r_aug, a_sup] = a
        phi[r_aug, v_cols] = xrow @ entry.G_sub
        xi[entry.k, :] = 0.0
        xi[entry.k, xi_sup] = xrow

    def _row_update_coupled(self, i, x0, phi, psi, lam):
        """General noise-free fallback: one QP over all coupled signal rows."""
        spec, rho = self.spec, self.config.rho
        offs = {}
        nv = 0
        groups = self.sig_groups[i]
        for g in groups:
            for idx, r in enumerate(g.rows):
                offs[int(r)] = (nv, g.sup, float(g.weights[idx]))
                nv += g.sup.size
        Q = np.zeros((nv, nv))
        c = np.zeros(nv)
        for g in groups:
            tgt = psi[np.ix_(g.rows, g.sup)] - lam[np.ix_(g.rows, g.sup)]
            a = x0[g.sup]
            for idx, r in enumerate(g.rows):
                o, sup, w = offs[int(r)]
                sl = slice(o, o + sup.size)
                Q[sl, sl] = rho * np.eye(sup.size) + 2.0 * w * np.outer(a, a)
                c[sl] = -rho * tgt[idx]
        ks = self.spec.rows_of(i)
        F = np.zeros((ks.size, nv))
        f = spec.h[ks].copy()
        for row_i, k in enumerate(ks):
            for r in np.flatnonzero(np.abs(spec.H[k]) > 0):
                if int(r) not in offs:
                    continue
                o, sup, _ = offs[int(r)]
                F[row_i, o:o + sup.size] = spec.H[k, r] * x0[sup]
        sol = solve_qp(QpProblem(Q=Q, c=c, F=F, f=f), tol=1e-10, max_iter=200)
        if sol.status == "infeasible":
            raise InfeasibleError("row subproblem infeasible", subsystem=i)
        if sol.status != "optimal":
            raise SolverError(f"row subproblem failed for subsystem {i}")
        for g in groups:
            for r in g.rows:
                o, sup, _ = offs[int(r)]
                phi[r, sup] = sol.z[o:o + sup.size]

    def _col_update(self, j, phi, psi, lam):
        for grp in self.col_groups[j]:
            v_blocks = []
            if grp["t"] == 0:
                v_blocks.append(phi[grp["mesh"]] + lam[grp["mesh"]])
            if grp["cons_idx"].size:
                v_blocks.append(phi[grp["mesh_cons"]] + lam[grp["mesh_cons"]])
            if v_blocks:
                v = np.vstack(v_blocks)
                rhs = np.vstack([grp["M"].T @ v, grp["q"]])
            else:
                rhs = np.vstack([np.zeros((grp["nv"], grp["cols"].size)), grp["q"]])
            psi[grp["mesh"]] = grp["kinv"] @ rhs

    def _dual_update(self, i, phi, psi, psi_prev, lam, cons_tgt):
        """Accumulate the consensus gap into the dual; return residuals."""
        rp2 = 0.0
        rd2 = 0.0
        for g in self.sig_groups[i]:
            if g.sup.size == 0:
                continue
            p_slice = psi[g.mesh]
            gap = phi[g.mesh] - p_slice
            lam[g.mesh] += gap
            rp2 += float((gap * gap).sum())
            d0 = p_slice - psi_prev[g.mesh]
            rd2 += float((d0 * d0).sum())
        # in the lifted layout the response copy appears twice (nominal
        # columns in the top block, all columns in the bottom block), so the
        # dual residual counts the full rows once more
        if not self.noise_free:
            rows = self.sig_rows[i]
            drest = psi[rows] - psi_prev[rows]
            rd2 += float((drest * drest).sum())
            for g in self.cons_groups[i]:
                gap = phi[g.mesh_all] - cons_tgt[g.tgt_all]
                lam[g.mesh_all] += gap
                rp2 += float((gap * gap).sum())
        return np.sqrt(rp2), np.sqrt(rd2)

    def _extract(self, psi):
        """Assemble the full response from the achievability-feasible copy."""
        mask = self.pair.phi_mask
        if self.noise_free:
            return localized_completion(self.model, mask, self.T, first_col=psi)
        return np.where(mask, psi, 0.0)

    # ----- warm start ----------------------------------------------------
    #
    # Warm starting reuses the previous solve's consensus state unchanged:
    # the decision variable is a response operator, not a trajectory, and
    # the optimal operator varies only mildly with the initial state, so
    # the converged (psi, lam, xi) of the previous MPC step is already an
    # excellent initializer for the next one.  (A diagonal time shift of
    # the blocks -- natural for trajectory-space solvers -- was measured
    # to be strictly worse here than plain reuse, and worse than a cold
    # start on constrained instances.)


def solve_dlmpc(model, spec, masks, x0, config=None, cost=None, case=None,
                transport=None, warm=None):
    """One-shot distributed solve; returns a SolveResult.

    Convenience wrapper over DlmpcSolver for callers that do not reuse the
    layout across initial states.
    """
    solver = DlmpcSolver(model, spec, masks, config=config, cost=cost, case=case)
    return solver.solve(x0, warm=warm, transport=transport)
