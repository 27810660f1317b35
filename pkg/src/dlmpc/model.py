"""Plant description: block-partitioned LTI dynamics over an interconnection graph.

A system is a collection of subsystems, each owning a block of states and
inputs.  The interconnection graph is always derived from the nonzero block
pattern of (A, B) and never hand-edited.  Hop neighborhoods on that graph
drive every locality structure in the rest of the library.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SystemModel",
    "LocalitySets",
    "SparsityMask",
    "derive_graph",
    "d_sets",
    "locality_masks",
    "generate_power_grid",
]


def _offsets(dims):
    """Start offset of each subsystem block for a list of block sizes."""
    return np.concatenate([[0], np.cumsum(dims)])


@dataclass(frozen=True)
class SystemModel:
    """Block-partitioned LTI plant x(t+1) = A x(t) + B u(t) + w(t).

    state_dims[i] / input_dims[i] give the per-subsystem block sizes; A and
    B are stored dense with blocks [A]_ij of shape (state_dims[i],
    state_dims[j]) and [B]_ij of shape (state_dims[i], input_dims[j]).
    ``graph`` is the derived directed edge set: (j, i) present iff block
    [A]_ij or [B]_ij is nonzero (an edge means subsystem j influences i).
    """

    state_dims: tuple
    input_dims: tuple
    A: np.ndarray
    B: np.ndarray
    graph: frozenset = field(default=None)

    def __post_init__(self):
        n, p = sum(self.state_dims), sum(self.input_dims)
        if self.A.shape != (n, n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(n, n)}")
        if self.B.shape != (n, p):
            raise ValueError(f"B has shape {self.B.shape}, expected {(n, p)}")
        if self.graph is None:
            object.__setattr__(
                self, "graph", derive_graph(self.A, self.B, self.state_dims, self.input_dims)
            )
        self.A.setflags(write=False)
        self.B.setflags(write=False)

    @property
    def n_subsystems(self):
        return len(self.state_dims)

    @property
    def n(self):
        return int(sum(self.state_dims))

    @property
    def p(self):
        return int(sum(self.input_dims))

    @property
    def state_offsets(self):
        return _offsets(self.state_dims)

    @property
    def input_offsets(self):
        return _offsets(self.input_dims)

    def state_coords(self, i):
        """Global state indices owned by subsystem i."""
        off = self.state_offsets
        return np.arange(off[i], off[i + 1])

    def input_coords(self, i):
        off = self.input_offsets
        return np.arange(off[i], off[i + 1])

    def state_block(self, M, i, j):
        """Block (i, j) of a state-row, state-column matrix such as A."""
        so = self.state_offsets
        return M[so[i]:so[i + 1], so[j]:so[j + 1]]


@dataclass(frozen=True)
class LocalitySets:
    """d-hop outgoing/incoming subsystem index sets.

    out_sets[i] = subsystems reachable from i within d hops; in_sets[i] =
    subsystems that reach i within d hops.  i is always a member of both.
    Sets are monotone in d.
    """

    d: int
    out_sets: tuple
    in_sets: tuple


@dataclass(frozen=True)
class SparsityMask:
    """Allowed-nonzero pattern for a block operator, with a provenance tag.

    The mask carries locality structure only; causality (block lower
    triangularity) is enforced separately by the operator that wears it.
    """

    allowed: np.ndarray
    tag: str

    def __post_init__(self):
        self.allowed.setflags(write=False)

    @property
    def shape(self):
        return self.allowed.shape


def derive_graph(A, B, state_dims, input_dims=None):
    """Directed edge set (j -> i) wherever block [A]_ij or [B]_ij is nonzero.

    Self-loops are included when the corresponding diagonal block is
    nonzero.  ``input_dims`` defaults to ``state_dims`` pattern-wise only
    when omitted and B is square-partitioned; pass it explicitly otherwise.
    """
    state_dims = tuple(int(s) for s in state_dims)
    if input_dims is None:
        input_dims = state_dims
    input_dims = tuple(int(s) for s in input_dims)
    n, p = sum(state_dims), sum(input_dims)
    if A.shape != (n, n) or B.shape != (n, p):
        raise ValueError(
            f"partition ({n} states, {p} inputs) does not match A {A.shape}, B {B.shape}"
        )
    so, io = _offsets(state_dims), _offsets(input_dims)
    N = len(state_dims)
    edges = set()
    for i in range(N):
        rows = slice(so[i], so[i + 1])
        for j in range(N):
            a_blk = A[rows, so[j]:so[j + 1]]
            b_blk = B[rows, io[j]:io[j + 1]]
            if np.any(a_blk != 0) or np.any(b_blk != 0):
                edges.add((j, i))
    return frozenset(edges)


def d_sets(graph, N, d):
    """BFS out/in hop sets of radius d for every subsystem.

    Unreachable subsystems are simply excluded; d = 0 gives singleton sets.
    """
    if d < 0:
        raise ValueError("hop radius must be >= 0")
    succ = [[] for _ in range(N)]   # succ[j] = {i : edge j -> i}
    pred = [[] for _ in range(N)]
    for (j, i) in graph:
        succ[j].append(i)
        pred[i].append(j)

    def bfs(start, adj):
        seen = {start}
        frontier = [start]
        for _ in range(d):
            nxt = []
            for v in frontier:
                for w in adj[v]:
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            if not nxt:
                break
            frontier = nxt
        return frozenset(seen)

    out_sets = tuple(bfs(i, succ) for i in range(N))
    in_sets = tuple(bfs(i, pred) for i in range(N))
    return LocalitySets(d=d, out_sets=out_sets, in_sets=in_sets)


def subsystem_mask(N, sets):
    """N x N boolean matrix: block (i, j) allowed iff i in out_j(d)."""
    allowed = np.zeros((N, N), dtype=bool)
    for j in range(N):
        for i in sets.out_sets[j]:
            allowed[i, j] = True
    return allowed


def _expand(block_mask, row_dims, col_dims):
    """Expand a subsystem-level boolean pattern to coordinate level."""
    return np.repeat(np.repeat(block_mask, row_dims, axis=0), col_dims, axis=1)


def locality_masks(model, sets, T):
    """Coordinate-level locality masks for the two system-response operators.

    The state-response mask allows block (i, j) iff i is in out_j(d); the
    input-response mask uses radius d + 1 (boundary subsystems one hop
    beyond the containment region must act to seal it).  Patterns are
    replicated over all (T+1) x (T+1) time blocks; causality is not encoded
    here.
    """
    d = sets.d
    sets_u = d_sets_from_model(model, d + 1)
    blk_x = subsystem_mask(model.n_subsystems, sets)
    blk_u = subsystem_mask(model.n_subsystems, sets_u)
    mx = _expand(blk_x, model.state_dims, model.state_dims)
    mu = _expand(blk_u, model.input_dims, model.state_dims)
    mask_x = np.tile(mx, (T + 1, T + 1))
    mask_u = np.tile(mu, (T + 1, T + 1))
    return (
        SparsityMask(allowed=mask_x, tag=f"phi_x({d})"),
        SparsityMask(allowed=mask_u, tag=f"phi_u({d + 1})"),
    )


def d_sets_from_model(model, d):
    """Convenience wrapper: hop sets of the model's derived graph."""
    return d_sets(model.graph, model.n_subsystems, d)


def generate_power_grid(rows, cols, p_connect, dt, seed):
    """Randomized linearized swing-dynamics instance on a rows x cols mesh.

    Each node is a two-state (phase, frequency) subsystem with a single
    scalar actuator.  Every potential mesh link is kept independently with
    probability ``p_connect``; kept links are bidirectional with a shared
    coupling strength.  Block templates:

        A_ii = [[1, dt], [-k_i*minv_i*dt, 1 - d_i*minv_i*dt]]
        A_ij = [[0, 0], [k_ij*minv_i*dt, 0]]      (j a kept neighbor)
        B_ii = [[0], [1]]

    with minv_i ~ U[0, 2] (inverse inertia, sampled directly so that near-
    zero inertia never divides), d_i ~ U[0.5, 1], k_ij = k_ji ~ U[1, 1.5],
    and k_i the sum of k_ij over kept neighbors of i.

    The RNG stream order is fixed so instances are bit-reproducible:
    one uniform per potential link in scan order (node-major, right link
    then down link), then minv per node, then d per node, then k per kept
    link in the same scan order.
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid must be at least 1 x 1")
    if not (0.0 <= p_connect <= 1.0):
        raise ValueError("p_connect must lie in [0, 1]")
    if dt <= 0:
        raise ValueError("dt must be positive")

    N = rows * cols
    rng = np.random.default_rng(seed)

    def node(r, c):
        return r * cols + c

    potential = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                potential.append((node(r, c), node(r, c + 1)))
            if r + 1 < rows:
                potential.append((node(r, c), node(r + 1, c)))

    keep = rng.random(len(potential)) < p_connect
    links = [lk for lk, k in zip(potential, keep) if k]

    minv = rng.uniform(0.0, 2.0, size=N)
    damp = rng.uniform(0.5, 1.0, size=N)
    coupling = rng.uniform(1.0, 1.5, size=len(links))

    neighbors = [{} for _ in range(N)]
    for (a, b), k_ab in zip(links, coupling):
        neighbors[a][b] = k_ab
        neighbors[b][a] = k_ab

    A = np.zeros((2 * N, 2 * N))
    B = np.zeros((2 * N, N))
    for i in range(N):
        k_i = sum(neighbors[i].values())
        A[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [
            [1.0, dt],
            [-k_i * minv[i] * dt, 1.0 - damp[i] * minv[i] * dt],
        ]
        for j, k_ij in neighbors[i].items():
            A[2 * i + 1, 2 * j] = k_ij * minv[i] * dt
        B[2 * i + 1, i] = 1.0

    return SystemModel(state_dims=(2,) * N, input_dims=(1,) * N, A=A, B=B)
