"""Message-passing simulation and closed-loop rollouts.

The consensus iteration is simulated with explicit per-phase message sets:
every share phase materializes one message per (sender, receiver) pair in
the sender's communication neighborhood, and ``exchange`` is the single
enforcement point for the hop-distance rule -- any out-of-neighborhood
send is a hard error.  Subsystem updates themselves only index patch-local
slices, so a run that completes has provably exchanged only local data.

The communication radius is d + 1: the input-response rows of boundary
subsystems one hop outside a disturbance's containment region participate
in its rejection, so their slices (and the matching initial-state patches)
travel one hop further than the state-response radius d.

``run_closed_loop`` wraps the per-step solve -> apply u0 -> advance plant
loop and records everything needed to audit a run after the fact.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .admm import DlmpcSolver
from .constraints import LocalNormBound, PolytopeNoise
from .errors import InfeasibleError, SolverError, TopologyViolation
from .model import d_sets_from_model

__all__ = [
    "Message",
    "exchange",
    "SimTransport",
    "noise_gen",
    "Trajectory",
    "run_closed_loop",
]

PHASES = ("state_share", "row_share", "col_share")


@dataclass
class Message:
    sender: int
    receiver: int
    phase: str
    iteration: int
    payload: dict


def exchange(messages, sets, radius, graph=None):
    """Deliver a batch of messages, enforcing the hop-distance rule.

    sets must be the locality sets of the enforcement radius; a message is
    legal iff its receiver lies in the sender's outgoing set.  Returns the
    messages grouped by receiver; raises TopologyViolation (naming sender,
    receiver, and hop distance) on the first illegal send.
    """
    delivered = {}
    for msg in messages:
        if msg.receiver not in sets.out_sets[msg.sender]:
            dist = _hop_distance(graph, len(sets.out_sets), msg.sender, msg.receiver)
            raise TopologyViolation(msg.sender, msg.receiver, dist, radius, msg.phase)
        delivered.setdefault(msg.receiver, []).append(msg)
    return delivered


def _hop_distance(graph, N, src, dst):
    """Directed hop distance src -> dst (inf when unreachable)."""
    if graph is None:
        return float("nan")
    succ = [[] for _ in range(N)]
    for (j, i) in graph:
        succ[j].append(i)
    frontier = {src}
    seen = {src}
    d = 0
    while frontier:
        if dst in frontier:
            return d
        d += 1
        frontier = {w for v in frontier for w in succ[v] if w not in seen}
        seen |= frontier
    return float("inf")


class SimTransport:
    """Materializes and audits every share phase of the consensus loop.

    Each phase broadcasts the sender's current slice to its communication
    neighborhood (radius d + 1, excluding itself) and funnels the batch
    through ``exchange``.  Counters per phase support message-complexity
    checks; set keep_messages to retain full payloads for inspection.
    """

    def __init__(self, model, d, keep_messages=False):
        self.model = model
        self.radius = d + 1
        self.sets = d_sets_from_model(model, self.radius)
        self.counts = {phase: 0 for phase in PHASES}
        self.rounds = {phase: 0 for phase in PHASES}
        self.keep_messages = keep_messages
        self.messages = []

    def _broadcast(self, phase, iteration, payload_of):
        msgs = []
        for j in range(self.model.n_subsystems):
            payload = payload_of(j)      # one slice copy per sender
            for i in sorted(self.sets.out_sets[j]):
                if i == j:
                    continue
                msgs.append(Message(sender=j, receiver=i, phase=phase,
                                    iteration=iteration, payload=payload))
        exchange(msgs, self.sets, self.radius, self.model.graph)
        self.counts[phase] += len(msgs)
        self.rounds[phase] += 1
        if self.keep_messages:
            self.messages.extend(msgs)

    def share_states(self, x0, solver):
        self._broadcast(
            "state_share", 0,
            lambda j: {"indices": self.model.state_coords(j),
                       "values": x0[self.model.state_coords(j)].copy()})

    def share_rows(self, iteration, solver):
        self._broadcast(
            "row_share", iteration,
            lambda j: {"indices": solver.sig_rows[j]})

    def share_cols(self, iteration, solver):
        self._broadcast(
            "col_share", iteration,
            lambda j: {"indices": self.model.state_coords(j)})

    def expected_per_round(self, phase):
        return sum(len(self.sets.out_sets[j]) - 1
                   for j in range(self.model.n_subsystems))


def noise_gen(kind, model, spec, seed, sigma=None, hold=1):
    """Seeded per-step disturbance stream; returns gen(t) -> w(t).

    kinds: "zero"; "uniform_local" (uniform per coordinate, rescaled so
    every per-subsystem patch meets its norm bound at every step);
    "uniform_polytope" (uniform, rescaled into the first time block of the
    polytope); "vertex_adversarial" (a seeded vertex sequence of the
    polytope, each vertex held for ``hold`` steps -- longer holds mean a
    harsher drift).
    """
    n = model.n
    rng = np.random.default_rng(seed)

    if kind == "zero":
        return lambda t: np.zeros(n)

    if kind == "uniform_local":
        noise = spec.noise if isinstance(spec.noise, LocalNormBound) else None
        sig = sigma if sigma is not None else (noise.sigma if noise else 0.1)
        p = noise.p if noise else np.inf

        def gen_local(t):
            w = rng.uniform(-sig, sig, n)
            if p != np.inf:
                worst = max(
                    np.linalg.norm(w[model.state_coords(i)], ord=p)
                    for i in range(model.n_subsystems)
                )
                if worst > sig:
                    w *= sig / worst
            return w

        return gen_local

    if kind in ("uniform_polytope", "vertex_adversarial"):
        if not isinstance(spec.noise, PolytopeNoise):
            raise ValueError(f"{kind} requires a polytopic noise model")
        noise = spec.noise
        rows0 = np.flatnonzero(noise.row_time == 0)
        G0 = noise.G[rows0][:, :n]
        g0 = noise.g[rows0]

        if kind == "uniform_polytope":
            # crude bounding box per coordinate, then rescale into the set
            col_bound = np.empty(n)
            for c in range(n):
                pos = G0[:, c] > 0
                col_bound[c] = np.min(g0[pos] / G0[pos, c]) if pos.any() else 1.0

            def gen_poly(t):
                w = rng.uniform(-col_bound, col_bound)
                ratio = np.max((G0 @ w) / g0, initial=0.0)
                if ratio > 1.0:
                    w /= ratio
                return w

            return gen_poly

        from .oracle import _block_vertices  # local import to avoid a cycle

        verts = []
        for i in range(model.n_subsystems):
            rows = rows0[noise.row_subsystem[rows0] == i]
            cols = model.state_coords(i)
            vs = _block_vertices(G0[np.ix_(rows, cols)], g0[rows])
            verts.append((cols, vs))

        def draw():
            w = np.zeros(n)
            for cols, vs in verts:
                if vs:
                    w[cols] = vs[rng.integers(len(vs))]
            return w

        state = {"w": draw(), "next": hold}

        def gen_vertex(t):
            if t >= state["next"]:
                state["w"] = draw()
                state["next"] = t + hold
            return state["w"].copy()

        return gen_vertex

    raise ValueError(f"unknown noise kind {kind!r}")


@dataclass
class Trajectory:
    """Recorded closed-loop run: states, inputs, disturbances, solve stats."""

    x: np.ndarray                 # (steps+1, n)
    u: np.ndarray                 # (steps, p)
    w: np.ndarray                 # (steps, n)
    iterations: list = field(default_factory=list)
    solve_seconds: list = field(default_factory=list)
    telemetry: list = field(default_factory=list)   # (tau, k, rp, rd)

    def replay_defect(self, model):
        """Max dynamics replay error; zero for a faithfully recorded run."""
        worst = 0.0
        for t in range(self.u.shape[0]):
            ref = model.A @ self.x[t] + model.B @ self.u[t] + self.w[t]
            worst = max(worst, float(np.abs(self.x[t + 1] - ref).max()))
        return worst


def run_closed_loop(model, spec, masks, x0, config, noise, steps, cost=None,
                    transport=None, solver=None, workers=None):
    """Run an MPC loop: solve, apply the first input, advance the plant.

    noise is a callable t -> w(t) (see noise_gen).  Solver errors are
    re-raised with the failing time step attached.  Pass a prebuilt solver
    to reuse its layout; warm starting follows config.warm_start.
    """
    solver = solver or DlmpcSolver(model, spec, masks, config, cost)
    n, p = model.n, model.p
    x = np.zeros((steps + 1, n))
    u = np.zeros((steps, p))
    w = np.zeros((steps, n))
    traj = Trajectory(x=x, u=u, w=w)
    x[0] = x0
    warm = None
    for tau in range(steps):
        t0 = time.perf_counter()
        try:
            res = solver.solve(x[tau], warm=warm, transport=transport,
                               workers=workers or 1)
        except (InfeasibleError, SolverError) as exc:
            exc.time_step = tau
            raise
        traj.solve_seconds.append(time.perf_counter() - t0)
        traj.iterations.append(res.iterations)
        traj.telemetry.extend((tau, k, rp, rd) for (k, rp, rd) in res.telemetry)
        if config.warm_start:
            warm = res.warm_state
        u[tau] = res.u0
        w[tau] = noise(tau)
        x[tau + 1] = model.A @ x[tau] + model.B @ u[tau] + w[tau]
    return traj
