"""Implicit Euler-Maruyama time stepping.

Each step solves ``v + dt A_h(v) = u_prev + forcing`` by minimizing the
strictly convex functional

    J(v) = 1/2 |v - b|^2 + dt sum_e (g_e^2 + eps^2)^(p/2) / p,   b = u_prev + forcing

(node sums, i.e. the h-scaled functional divided by h**dim) with damped Newton.
The Hessian ``I + dt G^T diag(c) G`` is symmetric positive definite and banded,
so every Newton system is a banded Cholesky solve.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solveh_banded

from .errors import NonConvergence, OffGrid
from .grid import Mesh, discrete_divergence, edge_difference, extend
from .noise import BrownianPath, NoiseField
from .plap import PlapParams, edge_flux, edge_flux_derivative


@dataclass(frozen=True)
class SolverOptions:
    newton_tol: float = 1e-10
    max_newton_iters: int = 200
    armijo_c: float = 1e-4

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be > 0")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be >= 1")


def _node_energy(mesh: Mesh, V: np.ndarray, params: PlapParams) -> np.ndarray:
    g = edge_difference(mesh, extend(V))
    return np.sum((g * g + params.eps**2) ** (params.p / 2), axis=-1) / params.p


def _objective(mesh, V, B, dt, params) -> np.ndarray:
    R = V - B
    return 0.5 * np.sum(R * R, axis=-1) + dt * _node_energy(mesh, V, params)


def _residual(mesh, V, B, dt, params):
    g = edge_difference(mesh, extend(V))
    return V - B - dt * discrete_divergence(mesh, edge_flux(g, params)), g


def _hessian_banded(mesh: Mesh, g: np.ndarray, dt: float, params: PlapParams):
    N, n = mesh.n_nodes, mesh.n_per_axis
    bw = min(1 if mesh.dim == 1 else n, N - 1)
    c = dt * edge_flux_derivative(g, params) / mesh.h**2
    diag = 1.0 + (
        np.bincount(mesh.edge_up, weights=c, minlength=N + 1)[:N]
        + np.bincount(mesh.edge_down, weights=c, minlength=N + 1)[:N]
    )
    ab = np.zeros((bw + 1, N))
    ab[bw] = diag
    inner = mesh.interior_edges
    a, b = mesh.edge_up[inner], mesh.edge_down[inner]
    ab[bw - (b - a), b] = -c[inner]
    return ab


def _solve_banded(ab: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve for every row of ``rhs``."""
    if ab.shape[0] == 1:
        return rhs / ab[0]
    return solveh_banded(ab, rhs.T, check_finite=False).T


def implicit_step_batch(
    mesh: Mesh,
    U_prev,
    dt: float,
    forcing,
    params: PlapParams,
    opts: SolverOptions = SolverOptions(),
) -> np.ndarray:
    """One implicit step for every row of ``U_prev`` (shape ``(m, n_nodes)``).

    Rows are independent problems; each one runs its own damped Newton
    iteration with a backtracking (Armijo) line search on J.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if params.singular:
        raise ValueError("p < 2 requires eps > 0 in the time stepper")
    B = np.atleast_2d(mesh.check(U_prev)) + np.asarray(forcing, dtype=float)
    V = B.copy()
    F, G = _residual(mesh, V, B, dt, params)
    res = np.max(np.abs(F), axis=1)
    J = _objective(mesh, V, B, dt, params)
    linear = params.p == 2
    shared_ab = _hessian_banded(mesh, G[0], dt, params) if linear else None
    for _ in range(opts.max_newton_iters):
        rows = np.flatnonzero(res > opts.newton_tol)
        if rows.size == 0:
            return V
        if linear:
            D = -_solve_banded(shared_ab, F[rows])
        else:
            D = np.stack([-_solve_banded(_hessian_banded(mesh, G[i], dt, params), F[i][None])[0] for i in rows])
        slope = np.sum(F[rows] * D, axis=1)
        # J is only resolvable to a few ulps; below that a decrease test is noise
        slack = 64 * np.finfo(float).eps * np.maximum(1.0, np.abs(J[rows]))
        alpha = np.ones(rows.size)
        W = V[rows] + D
        Jw = _objective(mesh, W, B[rows], dt, params)
        bad = Jw > J[rows] + opts.armijo_c * alpha * slope + slack
        while bad.any():
            alpha[bad] *= 0.5
            sub = np.flatnonzero(bad)
            W[sub] = V[rows[sub]] + alpha[sub, None] * D[sub]
            Jw[sub] = _objective(mesh, W[sub], B[rows[sub]], dt, params)
            bad = (Jw > J[rows] + opts.armijo_c * alpha * slope + slack) & (alpha >= 1e-12)
        V[rows], J[rows] = W, Jw
        F[rows], G[rows] = _residual(mesh, W, B[rows], dt, params)
        res[rows] = np.max(np.abs(F[rows]), axis=1)
    if np.any(res > opts.newton_tol):
        raise NonConvergence(float(res.max()), opts.max_newton_iters)
    return V


def implicit_step(
    mesh: Mesh,
    u_prev,
    dt: float,
    forcing,
    params: PlapParams,
    opts: SolverOptions = SolverOptions(),
) -> np.ndarray:
    """Solve ``v + dt A_h(v) = u_prev + forcing`` for a single grid function."""
    u_prev = mesh.check(u_prev)
    if u_prev.ndim != 1:
        raise ValueError("implicit_step takes one grid function; use implicit_step_batch")
    return implicit_step_batch(mesh, u_prev[None], dt, np.asarray(forcing, dtype=float)[None], params, opts)[0]


def step_index(time: float, dt: float) -> int:
    k = round(time / dt)
    if abs(k * dt - time) > 1e-9 * max(dt, abs(time)):
        raise OffGrid(f"time {time} is not on the step grid dt={dt}")
    return int(k)


@dataclass(frozen=True, eq=False)
class Trajectory:
    mesh: Mesh
    dt: float
    start_step: int
    states: np.ndarray  # shape (n_times, n_nodes)
    params: PlapParams
    path: BrownianPath
    phi: NoiseField

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.start_step, self.start_step + len(self.states))

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.start_step, self.start_step + len(self.states))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def index_of(self, t: float) -> int:
        k = step_index(t, self.dt) - self.start_step
        if not 0 <= k < len(self.states):
            raise OffGrid(f"time {t} outside the trajectory")
        return k

    def at(self, t: float) -> np.ndarray:
        return self.states[self.index_of(t)]


def _noise_rows(phi: NoiseField, mesh: Mesh, dt: float):
    static = None if phi.time_dependent else phi.at_nodes(0.0, mesh)
    return lambda n: static if static is not None else phi.at_nodes(n * dt, mesh)


def solve_ensemble(
    mesh: Mesh,
    U_r,
    r: float,
    t: float,
    paths: list[BrownianPath],
    phi: NoiseField,
    params: PlapParams,
    opts: SolverOptions = SolverOptions(),
    keep_states: bool = False,
) -> np.ndarray:
    """Advance row ``i`` of ``U_r`` along ``paths[i]`` from ``r`` to ``t``.

    Returns the final states ``(m, n_nodes)``, or all states
    ``(m, n_times, n_nodes)`` with ``keep_states``.  Noise indexing follows
    :func:`solve_path`.
    """
    if t < r:
        raise ValueError(f"need r <= t, got r={r}, t={t}")
    if not paths:
        raise ValueError("no paths given")
    dt = paths[0].dt
    if any(pth.dt != dt for pth in paths):
        raise ValueError("all paths must share dt")
    k0, k1 = step_index(r, dt), step_index(t, dt)
    if any(k1 > pth.n_steps for pth in paths):
        raise OffGrid(f"a path does not reach t={t}")
    U = np.array(np.broadcast_to(mesh.check(U_r), (len(paths), mesh.n_nodes)), dtype=float)
    if k1 > k0:
        dbeta = np.stack([pth.increments[k0:k1] for pth in paths], axis=1)
    noise_at = _noise_rows(phi, mesh, dt)
    states = [U] if keep_states else None
    for j, n in enumerate(range(k0, k1)):
        forcing = dbeta[j][:, None] * noise_at(n)[None, :]
        try:
            U = implicit_step_batch(mesh, U, dt, forcing, params, opts)
        except NonConvergence as exc:
            raise NonConvergence(exc.residual, exc.iterations, step=n) from None
        if keep_states:
            states.append(U)
    return np.stack(states, axis=1) if keep_states else U


def solve_path(
    mesh: Mesh,
    u_r,
    r: float,
    t: float,
    path: BrownianPath,
    phi: NoiseField,
    params: PlapParams,
    opts: SolverOptions = SolverOptions(),
) -> Trajectory:
    """Integrate from ``u_r`` at time ``r`` to time ``t``.

    Step ``n`` (from ``n dt`` to ``(n+1) dt``) always consumes
    ``path.increments[n]``, whatever the start time, so restarted solves see
    the same noise realization.
    """
    u_r = mesh.check(u_r)
    if u_r.ndim != 1:
        raise ValueError("solve_path takes one grid function; use solve_ensemble")
    states = solve_ensemble(mesh, u_r, r, t, [path], phi, params, opts, keep_states=True)[0]
    states.setflags(write=False)
    return Trajectory(mesh, path.dt, step_index(r, path.dt), states, params, path, phi)


def write_trajectory(traj: Trajectory, csv_path, meta: dict | None = None) -> None:
    """CSV ``step,time,node_index,value`` plus a ``.meta.json`` sidecar."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time", "node_index", "value"])
        for step, time, state in zip(traj.steps, traj.times, traj.states):
            for i, val in enumerate(state):
                w.writerow([int(step), repr(float(time)), i, repr(float(val))])
    sidecar = {
        "seed": traj.path.seed,
        "p": traj.params.p,
        "eps": traj.params.eps,
        "dt": traj.dt,
        "h": traj.mesh.h,
        "dim": traj.mesh.dim,
        "n_per_axis": traj.mesh.n_per_axis,
        "phi": traj.phi.name,
    }
    sidecar.update(meta or {})
    csv_path.with_suffix(".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_trajectory_states(csv_path) -> tuple[np.ndarray, np.ndarray]:
    """Read back ``(times, states)`` from a trajectory CSV."""
    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    steps = rows[:, 0].astype(int)
    uniq, first = np.unique(steps, return_index=True)
    n_nodes = int(rows[:, 2].max()) + 1
    states = rows[:, 3].reshape(len(uniq), n_nodes)
    return rows[first, 1], states
