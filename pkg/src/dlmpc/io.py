"""Plain-text serialization and CSV emission.

Matrix format: a named header line ``matrix NAME rows cols`` followed by
one line per row of space-separated ``repr`` floats.  repr is the shortest
round-trip representation, so files are byte-stable for identical data and
reload exactly.  Integer and string vectors use the same one-line layout.

CSV schemas (documented here, stable by contract):

* trajectory.csv: tau, subsystem, state_index, x, u, w  -- one row per
  (time step, subsystem, local state index); u is only present on rows
  whose state index addresses an input of that subsystem, and the final
  row block (tau = steps) carries the terminal state with empty u, w.
* telemetry.csv:  tau, k, primal_residual, dual_residual -- one row per
  consensus iteration (tau = -1 for standalone solves).
* benchmark.csv:  param, value, case, seed_count, mean_runtime, std_runtime.
"""

import csv

import numpy as np

from .constraints import ConstraintSpec, LocalNormBound, PolytopeNoise
from .model import SystemModel

__all__ = [
    "write_model", "read_model", "write_spec", "read_spec",
    "write_trajectory_csv", "write_telemetry_csv", "write_benchmark_csv",
    "write_operator", "read_operator",
]


def _fmt(x):
    return repr(float(x))


def _write_matrix(fh, name, mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    fh.write(f"matrix {name} {mat.shape[0]} {mat.shape[1]}\n")
    for row in mat:
        fh.write(" ".join(_fmt(v) for v in row) + "\n")


def _read_matrix(lines, name):
    head = next(lines).split()
    if head[0] != "matrix" or head[1] != name:
        raise ValueError(f"expected matrix {name}, found {' '.join(head)}")
    rows, cols = int(head[2]), int(head[3])
    out = np.empty((rows, cols))
    for r in range(rows):
        vals = next(lines).split()
        if len(vals) != cols:
            raise ValueError(f"matrix {name} row {r} has {len(vals)} entries")
        out[r] = [float(v) for v in vals]
    return out


def _write_ints(fh, name, arr):
    fh.write(f"ints {name} " + " ".join(str(int(v)) for v in arr) + "\n")


def _read_ints(lines, name):
    parts = next(lines).split()
    if parts[0] != "ints" or parts[1] != name:
        raise ValueError(f"expected ints {name}")
    return np.asarray([int(v) for v in parts[2:]], dtype=int)


def write_model(model, path):
    """Serialize a SystemModel to the plain-text matrix format."""
    with open(path, "w", newline="\n") as fh:
        fh.write("dlmpc-model 1\n")
        _write_ints(fh, "state_dims", model.state_dims)
        _write_ints(fh, "input_dims", model.input_dims)
        _write_matrix(fh, "A", model.A)
        _write_matrix(fh, "B", model.B)


def read_model(path):
    with open(path) as fh:
        lines = iter(ln.rstrip("\n") for ln in fh)
        if next(lines) != "dlmpc-model 1":
            raise ValueError(f"{path} is not a model file")
        state_dims = tuple(int(v) for v in _read_ints(lines, "state_dims"))
        input_dims = tuple(int(v) for v in _read_ints(lines, "input_dims"))
        A = _read_matrix(lines, "A")
        B = _read_matrix(lines, "B")
    return SystemModel(state_dims=state_dims, input_dims=input_dims, A=A, B=B)


def write_spec(spec, path):
    """Serialize a ConstraintSpec, including its noise model header."""
    with open(path, "w", newline="\n") as fh:
        fh.write("dlmpc-spec 1\n")
        fh.write(f"horizon {spec.T}\n")
        noise = spec.noise
        if noise is None:
            fh.write("noise none\n")
        elif isinstance(noise, LocalNormBound):
            p = "inf" if noise.p == np.inf else repr(float(noise.p))
            fh.write(f"noise local_bound {p} {_fmt(noise.sigma)}\n")
        elif isinstance(noise, PolytopeNoise):
            fh.write("noise polytope\n")
        else:
            raise ValueError("unknown noise model")
        _write_matrix(fh, "H", spec.H)
        _write_matrix(fh, "h", spec.h.reshape(1, -1))
        _write_ints(fh, "row_subsystem", spec.row_subsystem)
        _write_ints(fh, "row_time", spec.row_time)
        fh.write("kinds " + " ".join(spec.row_kind) + "\n")
        if isinstance(noise, PolytopeNoise):
            _write_matrix(fh, "G", noise.G)
            _write_matrix(fh, "g", noise.g.reshape(1, -1))
            _write_ints(fh, "g_row_time", noise.row_time)
            _write_ints(fh, "g_row_subsystem", noise.row_subsystem)


def read_spec(path):
    with open(path) as fh:
        lines = iter(ln.rstrip("\n") for ln in fh)
        if next(lines) != "dlmpc-spec 1":
            raise ValueError(f"{path} is not a constraint-spec file")
        T = int(next(lines).split()[1])
        noise_parts = next(lines).split()
        H = _read_matrix(lines, "H")
        h = _read_matrix(lines, "h").ravel()
        row_subsystem = _read_ints(lines, "row_subsystem")
        row_time = _read_ints(lines, "row_time")
        kinds = np.asarray(next(lines).split()[1:])
        noise = None
        if noise_parts[1] == "local_bound":
            p = np.inf if noise_parts[2] == "inf" else float(noise_parts[2])
            noise = LocalNormBound(p=p, sigma=float(noise_parts[3]))
        elif noise_parts[1] == "polytope":
            G = _read_matrix(lines, "G")
            g = _read_matrix(lines, "g").ravel()
            g_rt = _read_ints(lines, "g_row_time")
            g_rs = _read_ints(lines, "g_row_subsystem")
            noise = PolytopeNoise(G=G, g=g, row_time=g_rt, row_subsystem=g_rs)
    return ConstraintSpec(T=T, H=H, h=h, row_subsystem=row_subsystem,
                          row_time=row_time, row_kind=kinds, noise=noise)


def write_operator(op, path, name="phi"):
    """Serialize a BlockOperator: values plus its mask as a 0/1 matrix."""
    with open(path, "w", newline="\n") as fh:
        fh.write("dlmpc-operator 1\n")
        fh.write(f"shape {op.T} {op.row_dim} {op.col_dim} "
                 f"{int(op.pin_last_block_row)}\n")
        _write_matrix(fh, name, op.values)
        mask = op.mask if op.mask is not None else np.ones_like(op.values, dtype=bool)
        _write_matrix(fh, "mask", mask.astype(float))


def read_operator(path, name="phi"):
    from .sls_core import BlockOperator
    with open(path) as fh:
        lines = iter(ln.rstrip("\n") for ln in fh)
        if next(lines) != "dlmpc-operator 1":
            raise ValueError(f"{path} is not an operator file")
        T, rd, cd, pin = (int(v) for v in next(lines).split()[1:])
        vals = _read_matrix(lines, name)
        mask = _read_matrix(lines, "mask") > 0.5
    return BlockOperator(T=T, row_dim=rd, col_dim=cd, values=vals, mask=mask,
                         pin_last_block_row=bool(pin))


def write_trajectory_csv(traj, model, path):
    steps = traj.u.shape[0]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tau", "subsystem", "state_index", "x", "u", "w"])
        for tau in range(steps + 1):
            for i in range(model.n_subsystems):
                coords = model.state_coords(i)
                inputs = model.input_coords(i)
                for local, k in enumerate(coords):
                    has_u = tau < steps and local < len(inputs)
                    wr.writerow([
                        tau, i, local,
                        _fmt(traj.x[tau, k]),
                        _fmt(traj.u[tau, inputs[local]]) if has_u else "",
                        _fmt(traj.w[tau, k]) if tau < steps else "",
                    ])


def write_telemetry_csv(rows, path):
    """rows: iterable of (tau, k, primal, dual) tuples."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tau", "k", "primal_residual", "dual_residual"])
        for tau, k, rp, rd in rows:
            wr.writerow([tau, k, _fmt(rp), _fmt(rd)])


def write_benchmark_csv(rows, path):
    """rows: iterable of (param, value, case, seeds, mean, std) tuples."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["param", "value", "case", "seed_count",
                     "mean_runtime", "std_runtime"])
        for param, value, case, nseeds, mean, std in rows:
            wr.writerow([param, value, case, nseeds, _fmt(mean), _fmt(std)])
