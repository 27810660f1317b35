"""Finite-horizon closed-loop response operators and their algebra.

The closed loop of x(t+1) = A x(t) + B u(t) + w(t) over a horizon T is
described by two block-lower-triangular operators mapping the stacked
disturbance w = [x0; delta_0; ...; delta_{T-1}] to the stacked state and
input signals:

    x = phi_x w,    u = phi_u w.

A pair (phi_x, phi_u) is achievable exactly when it satisfies the affine
constraint  [I - Z Ahat, -Z Bhat] [phi_x; phi_u] = I, with Z the block
downshift, Ahat = blkdiag(A, ..., A) and Bhat = blkdiag(B, ..., B, 0).

Column-block convention: column block 0 multiplies x0 and column blocks
1..T multiply delta_0..delta_{T-1}.  phi_u carries T+1 block rows; its last
block row multiplies nothing in the dynamics and is pinned to zero.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BlockOperator",
    "DisturbanceSignal",
    "achievability_matrix",
    "achievability_residual",
    "closed_loop_map",
    "controller_rollout",
    "extract_u0",
    "stack_response",
]


@dataclass
class BlockOperator:
    """Dense block-lower-triangular causal operator with an attached mask.

    values is ((T+1)*row_dim, (T+1)*col_dim); block (s, t) addresses time
    blocks, and is identically zero for t > s (causality).  Entries outside
    the attached locality mask are kept exactly zero (bit zero, not small).
    Set pin_last_block_row for input-response operators, whose final block
    row is structurally unused.
    """

    T: int
    row_dim: int
    col_dim: int
    values: np.ndarray
    mask: np.ndarray | None = None
    pin_last_block_row: bool = False

    def __post_init__(self):
        shape = ((self.T + 1) * self.row_dim, (self.T + 1) * self.col_dim)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape}, expected {shape}")
        if self.mask is not None and self.mask.shape != shape:
            raise ValueError("mask shape does not match operator shape")
        self.values = np.where(self.effective_mask(), self.values, 0.0)

    @classmethod
    def zeros(cls, T, row_dim, col_dim, mask=None, pin_last_block_row=False):
        vals = np.zeros(((T + 1) * row_dim, (T + 1) * col_dim))
        return cls(T, row_dim, col_dim, vals, mask, pin_last_block_row)

    def block(self, s, t):
        """Time block (s, t): rows of time s, columns of time t."""
        r, c = self.row_dim, self.col_dim
        return self.values[s * r:(s + 1) * r, t * c:(t + 1) * c]

    def col_block(self, t):
        c = self.col_dim
        return self.values[:, t * c:(t + 1) * c]

    def first_col_block(self):
        """Columns multiplying x0 (the nominal-response columns)."""
        return self.col_block(0)

    def noise_col_blocks(self):
        """Columns multiplying delta_0..delta_{T-1}."""
        return self.values[:, self.col_dim:]

    def causal_pattern(self):
        """Boolean pattern that is True on allowed (lower) time blocks."""
        tri = np.tril(np.ones((self.T + 1, self.T + 1), dtype=bool))
        out = np.repeat(np.repeat(tri, self.row_dim, axis=0), self.col_dim, axis=1)
        if self.pin_last_block_row:
            out[self.T * self.row_dim:, :] = False
        return out

    def effective_mask(self):
        """Locality mask AND causality AND structural row pins."""
        eff = self.causal_pattern()
        if self.mask is not None:
            eff &= self.mask
        return eff

    def project(self):
        """Zero out everything outside the effective mask, in place."""
        self.values = np.where(self.effective_mask(), self.values, 0.0)
        return self

    def is_causal(self, atol=0.0):
        bad = ~self.causal_pattern()
        return bool(np.all(np.abs(self.values[bad]) <= atol))

    def mask_respected(self):
        return bool(np.all(self.values[~self.effective_mask()] == 0.0))

    def copy(self):
        return BlockOperator(
            self.T, self.row_dim, self.col_dim, self.values.copy(),
            None if self.mask is None else self.mask, self.pin_last_block_row,
        )


@dataclass(frozen=True)
class DisturbanceSignal:
    """Stacked disturbance [x0; delta_0; ...; delta_{T-1}], blocks of size n."""

    x0: np.ndarray
    deltas: np.ndarray  # (T, n)

    @property
    def vector(self):
        return np.concatenate([self.x0, self.deltas.ravel()])

    @classmethod
    def from_vector(cls, w, n):
        if w.size % n != 0:
            raise ValueError("disturbance length is not a multiple of the state size")
        return cls(x0=w[:n].copy(), deltas=w[n:].reshape(-1, n).copy())


def achievability_matrix(model, T):
    """The affine map [I - Z Ahat, -Z Bhat] acting on stacked [phi_x; phi_u].

    Returns a ((T+1)n, (T+1)(n+p)) matrix; an achievable response pair
    satisfies  achievability_matrix @ stack_response(...) = I.
    """
    n, p = model.n, model.p
    rows = (T + 1) * n
    left = np.eye(rows)
    right = np.zeros((rows, (T + 1) * p))
    for t in range(1, T + 1):
        left[t * n:(t + 1) * n, (t - 1) * n:t * n] -= model.A
        right[t * n:(t + 1) * n, (t - 1) * p:t * p] = -model.B
    return np.hstack([left, right])


def stack_response(phi_x, phi_u):
    """Stack the state and input responses into one tall operator matrix."""
    return np.vstack([np.asarray(phi_x.values if isinstance(phi_x, BlockOperator) else phi_x),
                      np.asarray(phi_u.values if isinstance(phi_u, BlockOperator) else phi_u)])


def split_response(phi, model, T):
    """Inverse of stack_response: (state rows, input rows)."""
    cut = (T + 1) * model.n
    return phi[:cut], phi[cut:]


def achievability_residual(phi_x, phi_u, model):
    """Residual of the closed-loop achievability constraint.

    Zero (to numerical precision) iff the pair (phi_x, phi_u) is a valid
    closed-loop response of the plant.
    """
    T = phi_x.T if isinstance(phi_x, BlockOperator) else None
    if T is None:
        raise TypeError("phi_x must be a BlockOperator")
    zab = achievability_matrix(model, T)
    stacked = stack_response(phi_x, phi_u)
    if zab.shape[1] != stacked.shape[0]:
        raise ValueError("response operators do not conform with the model")
    eye = np.eye((T + 1) * model.n)
    if stacked.shape[1] != eye.shape[1]:
        raise ValueError("response operators have the wrong column count")
    return zab @ stacked - eye


def closed_loop_map(phi_x, phi_u, w):
    """Map a stacked disturbance through the response pair: (x, u)."""
    wv = w.vector if isinstance(w, DisturbanceSignal) else np.asarray(w)
    if phi_x.values.shape[1] != wv.size:
        raise ValueError("disturbance length does not match the operators")
    return phi_x.values @ wv, phi_u.values @ wv


def controller_rollout(phi_x, phi_u, model, x0, deltas):
    """Run the response pair as an online controller against the true plant.

    The controller reconstructs disturbances with one step of delay:

        what_0     = x_0,
        what_{t}   = x_t - sum_{s<t} phi_x[t,s] what_s,
        u_t        = sum_{s<=t} phi_u[t,s] what_s,

    and the plant is advanced with the true dynamics and the supplied
    disturbance sequence.  For an achievable pair the reconstruction is
    exact (what_t recovers delta_{t-1}) and the realized trajectories
    coincide with the operator images of the stacked disturbance.  Returns
    stacked (x, u) of the same layout as closed_loop_map.
    """
    T = phi_x.T
    n, p = model.n, model.p
    deltas = np.asarray(deltas).reshape(T, n)
    x = np.zeros((T + 1, n))
    u = np.zeros((T + 1, p))
    what = np.zeros((T + 1, n))
    x[0] = x0
    what[0] = np.asarray(x0, dtype=float)
    for t in range(T + 1):
        if t > 0:
            # the diagonal blocks of an achievable state response are the
            # identity, so the newest disturbance appears in x_t with unit
            # coefficient: subtracting the prediction from past estimates
            # reconstructs it with one step of delay
            xhat = sum(phi_x.block(t, s) @ what[s] for s in range(t))
            what[t] = x[t] - xhat
        u[t] = sum(phi_u.block(t, s) @ what[s] for s in range(t + 1))
        if t < T:
            x[t + 1] = model.A @ x[t] + model.B @ u[t] + deltas[t]
    return x.ravel(), u.ravel()


def extract_u0(phi_u, x0):
    """First control action of the policy: the (0, 0) block applied to x0."""
    blk = phi_u.block(0, 0) if isinstance(phi_u, BlockOperator) else phi_u
    x0 = np.asarray(x0)
    if blk.shape[1] != x0.size:
        raise ValueError("x0 length does not match the input response")
    return blk @ x0


def localized_completion(model, mask, T, first_col=None):
    """Least-squares masked solution of the achievability constraint.

    Minimizes ||Z_AB phi - I||_F over stacked responses confined to the
    effective mask, independently per column group (time block x owning
    subsystem, which share a sparsity pattern).  When first_col is given,
    column block 0 is pinned to it and only the disturbance-response
    columns are solved.  Returns the full stacked response matrix; a zero
    residual certifies that the mask admits a valid closed loop.
    """
    n = model.n
    zab = achievability_matrix(model, T)
    zab_struct = np.abs(zab) > 0
    phi = np.zeros(mask.shape)
    eye = np.eye((T + 1) * n)
    t_start = 0
    if first_col is not None:
        phi[:, :n] = np.where(mask[:, :n], first_col, 0.0)
        t_start = 1
    for t in range(t_start, T + 1):
        for j in range(model.n_subsystems):
            cols = t * n + model.state_coords(j)
            sup = np.flatnonzero(mask[:, cols[0]])
            if sup.size == 0:
                continue
            rows = np.flatnonzero(zab_struct[:, sup].any(axis=1))
            sol = np.linalg.lstsq(zab[np.ix_(rows, sup)], eye[np.ix_(rows, cols)],
                                  rcond=None)[0]
            phi[np.ix_(sup, cols)] = sol
    return phi
