"""Signal constraints, disturbance models, and robust reformulations.

The constraint polytope is H [x; u] <= h with H block diagonal over per-time
per-subsystem row groups: state rows cover predicted steps 1..T (step 0 is
the measured state) and input rows cover applied steps 0..T-1.

Three disturbance regimes are supported:

* no noise — the constraint binds the nominal trajectory only;
* per-subsystem norm-bounded noise — worst cases dualize row-wise into
  dual-norm terms (exact for the infinity norm, conservative otherwise);
* polytopic noise {G delta <= g} — worst cases dualize into a nonnegative
  multiplier operator coupled by an equality to the noise-response rows.

``build_augmented`` assembles the lifted consensus variables that make the
robust problem simultaneously row- and column-separable for the ADMM
engine.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import SparsityMask

__all__ = [
    "LocalNormBound",
    "PolytopeNoise",
    "ConstraintSpec",
    "QuadraticCost",
    "box_constraints",
    "box_polytope",
    "unconstrained_spec",
    "nominal_feasible",
    "local_norm_lhs",
    "polytopic_constraints",
    "multiplier_mask",
    "AugmentedPair",
    "build_augmented",
    "response_mask",
    "dual_norm",
]


@dataclass(frozen=True)
class LocalNormBound:
    """Noise with ||delta_i||_p <= sigma on every subsystem patch."""

    p: float = np.inf
    sigma: float = 0.1


@dataclass(frozen=True)
class PolytopeNoise:
    """Noise confined to {delta : G delta <= g}.

    G is (R_G, T*n), block diagonal over time blocks with per-subsystem
    column groups; row_time / row_subsystem record which block each row of
    G belongs to (needed for slicing and for vertex enumeration).
    """

    G: np.ndarray
    g: np.ndarray
    row_time: np.ndarray
    row_subsystem: np.ndarray

    def __post_init__(self):
        if self.G.shape[0] != self.g.size:
            raise ValueError("G and g do not conform")
        self.G.setflags(write=False)
        self.g.setflags(write=False)


@dataclass(frozen=True)
class ConstraintSpec:
    """Stacked polytope H [x; u] <= h plus the disturbance model.

    H is (R_H, (T+1)(n+p)) over the stacked signal [x; u]; each row belongs
    to one subsystem at one time step (row_subsystem, row_time, row_kind),
    which is what makes per-subsystem slicing well defined.
    """

    T: int
    H: np.ndarray
    h: np.ndarray
    row_subsystem: np.ndarray
    row_time: np.ndarray
    row_kind: np.ndarray          # 'x' or 'u' per row
    noise: object = None

    def __post_init__(self):
        if self.H.shape[0] != self.h.size:
            raise ValueError("H and h do not conform")
        for arr in (self.H, self.h, self.row_subsystem, self.row_time, self.row_kind):
            arr.setflags(write=False)

    @property
    def n_rows(self):
        return self.H.shape[0]

    def rows_of(self, i):
        """Row indices owned by subsystem i."""
        return np.flatnonzero(self.row_subsystem == i)


@dataclass(frozen=True)
class QuadraticCost:
    """Separable quadratic cost on the nominal trajectory.

    value = sum_t x_t' (q I) x_t  +  sum_t u_t' (r I) u_t over predicted
    steps 1..T for states and 0..T-1 for inputs, evaluated on y = Phi{1} x0.
    """

    state_weight: float = 1.0
    input_weight: float = 1.0

    def row_weights(self, model, T):
        n, p = model.n, model.p
        w = np.zeros((T + 1) * (n + p))
        w[n:(T + 1) * n] = self.state_weight
        w[(T + 1) * n:(T + 1) * n + T * p] = self.input_weight
        return w

    def value(self, y, model, T):
        """Cost of a stacked nominal trajectory y = [x; u]."""
        w = self.row_weights(model, T)
        return float(y @ (w * y))


def _box_rows(coords, width, bound):
    """Rows +-e_k with bound, for each coordinate k in a block of width."""
    rows = np.zeros((2 * len(coords), width))
    h = np.empty(2 * len(coords))
    for idx, k in enumerate(coords):
        rows[2 * idx, k] = 1.0
        rows[2 * idx + 1, k] = -1.0
        h[2 * idx] = h[2 * idx + 1] = bound
    return rows, h


def box_constraints(model, T, x_max, u_max, noise=None):
    """Symmetric box bounds on every state (steps 1..T) and input (0..T-1)."""
    n, p = model.n, model.p
    width = (T + 1) * (n + p)
    x_max = np.broadcast_to(np.asarray(x_max, dtype=float), (n,))
    u_max = np.broadcast_to(np.asarray(u_max, dtype=float), (p,))
    blocks, hs, subs, times, kinds = [], [], [], [], []
    for t in range(1, T + 1):
        for i in range(model.n_subsystems):
            for k in model.state_coords(i):
                rows = np.zeros((2, width))
                rows[0, t * n + k] = 1.0
                rows[1, t * n + k] = -1.0
                blocks.append(rows)
                hs.extend([x_max[k], x_max[k]])
                subs.extend([i, i])
                times.extend([t, t])
                kinds.extend(["x", "x"])
    for t in range(T):
        for i in range(model.n_subsystems):
            for k in model.input_coords(i):
                rows = np.zeros((2, width))
                rows[0, (T + 1) * n + t * p + k] = 1.0
                rows[1, (T + 1) * n + t * p + k] = -1.0
                blocks.append(rows)
                hs.extend([u_max[k], u_max[k]])
                subs.extend([i, i])
                times.extend([t, t])
                kinds.extend(["u", "u"])
    H = np.vstack(blocks) if blocks else np.zeros((0, width))
    return ConstraintSpec(
        T=T,
        H=H,
        h=np.asarray(hs, dtype=float),
        row_subsystem=np.asarray(subs, dtype=int),
        row_time=np.asarray(times, dtype=int),
        row_kind=np.asarray(kinds),
        noise=noise,
    )


def unconstrained_spec(model, T):
    """A constraint spec with no rows (unbounded states and inputs)."""
    width = (T + 1) * (model.n + model.p)
    return ConstraintSpec(
        T=T, H=np.zeros((0, width)), h=np.zeros(0),
        row_subsystem=np.zeros(0, dtype=int), row_time=np.zeros(0, dtype=int),
        row_kind=np.asarray([], dtype="U1"), noise=None,
    )


def box_polytope(model, T, sigma):
    """The polytope description of the per-coordinate box |delta_k| <= sigma."""
    n = model.n
    G = np.zeros((2 * T * n, T * n))
    g = np.full(2 * T * n, float(sigma))
    row_time = np.empty(2 * T * n, dtype=int)
    row_sub = np.empty(2 * T * n, dtype=int)
    coord_sub = np.repeat(np.arange(model.n_subsystems), model.state_dims)
    r = 0
    for t in range(T):
        for k in range(n):
            G[r, t * n + k] = 1.0
            G[r + 1, t * n + k] = -1.0
            row_time[r:r + 2] = t
            row_sub[r:r + 2] = coord_sub[k]
            r += 2
    return PolytopeNoise(G=G, g=g, row_time=row_time, row_subsystem=row_sub)


def dual_norm(p):
    """Index of the norm dual to the p-norm (inf<->1, 2<->2)."""
    if p == np.inf or p == float("inf"):
        return 1
    if p == 2:
        return 2
    if p == 1:
        return np.inf
    raise ValueError(f"unsupported norm index {p}")


def _row_dual_norms(rows, p):
    q = dual_norm(p)
    if q == 1:
        return np.abs(rows).sum(axis=1)
    if q == 2:
        return np.sqrt((rows * rows).sum(axis=1))
    return np.abs(rows).max(axis=1)


def nominal_feasible(phi1, x0, spec):
    """Residual H Phi{1} x0 - h of the noise-free constraint (<= 0 feasible)."""
    if spec.noise is not None:
        raise ValueError("constraint spec carries a noise model; use the robust forms")
    return spec.H @ (np.asarray(phi1) @ np.asarray(x0)) - spec.h


def local_norm_lhs(phi, x0, spec):
    """Row-wise worst-case left-hand sides under norm-bounded noise.

    For each constraint row: nominal term plus sigma times the dual norm of
    the row's noise-response coefficients.  Feasible iff <= h row-wise.
    """
    if not isinstance(spec.noise, LocalNormBound):
        raise ValueError("constraint spec does not carry a norm-bounded noise model")
    phi = np.asarray(phi)
    n = np.asarray(x0).size
    hphi = spec.H @ phi
    nominal = hphi[:, :n] @ np.asarray(x0)
    robust = spec.noise.sigma * _row_dual_norms(hphi[:, n:], spec.noise.p)
    return nominal + robust


def polytopic_constraints(phi, xi, x0, spec):
    """Residuals of the dualized polytopic-noise constraints.

    Returns (inequality residual H Phi{1} x0 + xi g - h, equality residual
    H Phi{2:T} - xi G); feasible iff the first is <= 0 and the second = 0.
    xi must be entrywise nonnegative.
    """
    noise = spec.noise
    if not isinstance(noise, PolytopeNoise):
        raise ValueError("constraint spec does not carry a polytopic noise model")
    xi = np.asarray(xi)
    if xi.min(initial=0.0) < 0:
        raise ValueError("multiplier matrix has negative entries")
    phi = np.asarray(phi)
    n = np.asarray(x0).size
    hphi = spec.H @ phi
    ineq = hphi[:, :n] @ np.asarray(x0) + xi @ noise.g - spec.h
    eq = hphi[:, n:] - xi @ noise.G
    return ineq, eq


def response_mask(masks, model, T):
    """Effective boolean mask of the stacked response [phi_x; phi_u].

    Combines the locality masks with causality and the structural zero of
    the final input block row.
    """
    mask_x, mask_u = masks
    n, p = model.n, model.p
    tri = np.tril(np.ones((T + 1, T + 1), dtype=bool))
    caus_x = np.repeat(np.repeat(tri, n, axis=0), n, axis=1)
    caus_u = np.repeat(np.repeat(tri, p, axis=0), n, axis=1)
    mx = mask_x.allowed & caus_x
    mu = mask_u.allowed & caus_u
    mu[T * p:, :] = False
    return np.vstack([mx, mu])


def multiplier_mask(H, phi_rest_mask, noise):
    """Structural sparsity of the polytope dual multiplier matrix.

    Entry (r, c) is allowed iff row r of H can structurally reach, through
    the masked noise-response columns, any column in the support of G's
    row c.  Rows with no reachable columns are pinned entirely to zero.
    """
    reach = (np.abs(H) > 0) @ phi_rest_mask        # (R_H, T*n) counts
    g_support = np.abs(noise.G) > 0                # (R_G, T*n)
    allowed = (reach > 0) @ g_support.T > 0
    return SparsityMask(allowed=allowed, tag="xi(d_H)")


@dataclass
class AugmentedPair:
    """Lifted consensus variables for the row/column ADMM split.

    ``phi`` is the row-separably-updated copy in its augmented layout,
    ``psi`` the underlying response copy (signal rows only), ``lam`` the
    scaled dual in phi's layout, and ``xi`` the polytope multiplier (only
    in the polytopic case).  m1 / m2 / h_tilde are the selector and lift
    matrices tying the two copies together: the consensus constraint is
    phi = h_tilde @ psi_tilde().
    """

    case: str
    T: int
    n_signal_rows: int
    n_cons_rows: int
    n_cols: int
    phi: np.ndarray
    psi: np.ndarray
    lam: np.ndarray
    xi: np.ndarray | None
    m1: np.ndarray
    m2: np.ndarray
    h_tilde: np.ndarray
    spec: ConstraintSpec
    phi_mask: np.ndarray                  # effective mask of the stacked response
    cons0_mask: np.ndarray | None = None  # structural mask of constraint rows, col block 0
    cons_rest_mask: np.ndarray | None = None
    xi_mask: SparsityMask | None = None

    def psi_tilde(self):
        """The column-separable copy in its augmented (lifted) layout."""
        if self.case == "noise_free":
            return self.psi
        r, c = self.psi.shape
        n = self.n_cols // (self.T + 1)
        top = np.zeros((r, c))
        top[:, :n] = self.psi[:, :n]
        return np.vstack([top, self.psi])

    def consensus_gap(self):
        """phi - h_tilde @ psi_tilde(), the global primal residual matrix."""
        return self.phi - self.h_tilde @ self.psi_tilde()


def build_augmented(case, model, spec, masks, T):
    """Zero-initialized consensus variables and selectors for one regime.

    case must agree with spec.noise: "noise_free" with no noise model,
    "local_bound" with LocalNormBound, "polytopic" with PolytopeNoise.
    """
    n, p = model.n, model.p
    r_sig = (T + 1) * (n + p)
    phi_mask = response_mask(masks, model, T)

    if case == "noise_free":
        if spec.noise is not None:
            raise ValueError("noise-free case requested but spec carries noise")
        eye = np.eye(r_sig)
        return AugmentedPair(
            case=case, T=T, n_signal_rows=r_sig, n_cons_rows=0, n_cols=n,
            phi=np.zeros((r_sig, n)), psi=np.zeros((r_sig, n)),
            lam=np.zeros((r_sig, n)), xi=None,
            m1=eye.copy(), m2=eye.copy(), h_tilde=eye.copy(),
            spec=spec, phi_mask=phi_mask,
        )

    r_h = spec.n_rows
    cols = (T + 1) * n
    h_struct = np.abs(spec.H) > 0
    cons0 = h_struct @ phi_mask[:, :n] > 0
    cons_rest = h_struct @ phi_mask[:, n:] > 0

    m1 = np.zeros((r_sig + r_h, r_sig + r_h))
    m1[:r_sig, :r_sig] = np.eye(r_sig)
    m2 = np.hstack([np.zeros((r_sig, r_sig)), np.eye(r_sig)])
    h_tilde = np.zeros((r_sig + r_h, 2 * r_sig))
    h_tilde[:r_sig, :r_sig] = np.eye(r_sig)
    h_tilde[r_sig:, r_sig:] = spec.H

    xi = None
    xi_m = None
    if case == "local_bound":
        if not isinstance(spec.noise, LocalNormBound):
            raise ValueError("local_bound case requires a LocalNormBound noise model")
    elif case == "polytopic":
        if not isinstance(spec.noise, PolytopeNoise):
            raise ValueError("polytopic case requires a PolytopeNoise model")
        xi_m = multiplier_mask(spec.H, phi_mask[:, n:], spec.noise)
        xi = np.zeros(xi_m.shape)
        g_struct = np.abs(spec.noise.G) > 0
        cons_rest = cons_rest | (xi_m.allowed @ g_struct)
    else:
        raise ValueError(f"unknown case {case!r}")

    return AugmentedPair(
        case=case, T=T, n_signal_rows=r_sig, n_cons_rows=r_h, n_cols=cols,
        phi=np.zeros((r_sig + r_h, cols)), psi=np.zeros((r_sig, cols)),
        lam=np.zeros((r_sig + r_h, cols)), xi=xi,
        m1=m1, m2=m2, h_tilde=h_tilde,
        spec=spec, phi_mask=phi_mask,
        cons0_mask=cons0, cons_rest_mask=cons_rest, xi_mask=xi_m,
    )
