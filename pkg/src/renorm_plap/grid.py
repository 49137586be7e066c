"""Uniform Dirichlet grids on the unit interval / unit square.

Grid functions are plain 1D numpy arrays holding one value per interior node
in lexicographic (row-major) order. Edge fields are 1D arrays holding one value
per axis-aligned edge touching an interior node; in 2D the axis-0 edges come
first, then the axis-1 edges. Boundary nodes carry the implicit value 0.

Both inner products are scaled by ``h**dim``, and the divergence is defined as
the negative adjoint of the gradient, so summation by parts holds exactly::

    <div F, u>_nodes = -<F, grad u>_edges
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Mesh:
    dim: int
    n_per_axis: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n_per_axis < 1:
            raise ValueError(f"n_per_axis must be >= 1, got {self.n_per_axis}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_per_axis + 1)

    @property
    def n_nodes(self) -> int:
        return self.n_per_axis**self.dim

    @property
    def n_edges(self) -> int:
        n = self.n_per_axis
        return self.dim * (n + 1) * n ** (self.dim - 1)

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @cached_property
    def _topology(self):
        # Edge e joins node up[e] to node down[e]; index n_nodes means boundary.
        n, N = self.n_per_axis, self.n_nodes
        if self.dim == 1:
            idx = np.arange(n + 1)
            up = np.where(idx - 1 >= 0, idx - 1, N)
            down = np.where(idx < n, idx, N)
            axis = np.zeros(n + 1, dtype=int)
        else:
            # axis 0: edges ((i-1, j) -> (i, j)), i = 0..n, j = 0..n-1
            i, j = np.meshgrid(np.arange(n + 1), np.arange(n), indexing="ij")
            i, j = i.ravel(), j.ravel()
            up0 = np.where(i - 1 >= 0, (i - 1) * n + j, N)
            down0 = np.where(i < n, i * n + j, N)
            # axis 1: edges ((i, j-1) -> (i, j)), i = 0..n-1, j = 0..n
            i, j = np.meshgrid(np.arange(n), np.arange(n + 1), indexing="ij")
            i, j = i.ravel(), j.ravel()
            up1 = np.where(j - 1 >= 0, i * n + j - 1, N)
            down1 = np.where(j < n, i * n + j, N)
            up = np.concatenate([up0, up1])
            down = np.concatenate([down0, down1])
            axis = np.concatenate([np.zeros(up0.size, int), np.ones(up1.size, int)])
        for a in (up, down, axis):
            a.setflags(write=False)
        return up, down, axis

    @property
    def edge_up(self) -> np.ndarray:
        return self._topology[0]

    @property
    def edge_down(self) -> np.ndarray:
        return self._topology[1]

    @property
    def edge_axis(self) -> np.ndarray:
        return self._topology[2]

    @cached_property
    def node_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Per axis, the edge entering and the edge leaving every node."""
        N = self.n_nodes
        into = np.empty((self.dim, N), dtype=int)
        out = np.empty((self.dim, N), dtype=int)
        for a in range(self.dim):
            sel = np.flatnonzero(self.edge_axis == a)
            d, u = self.edge_down[sel], self.edge_up[sel]
            into[a, d[d < N]] = sel[d < N]
            out[a, u[u < N]] = sel[u < N]
        into.setflags(write=False)
        out.setflags(write=False)
        return into, out

    @cached_property
    def interior_edges(self) -> np.ndarray:
        """Boolean mask of edges joining two interior nodes."""
        N = self.n_nodes
        mask = (self.edge_up < N) & (self.edge_down < N)
        mask.setflags(write=False)
        return mask

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (n_nodes, dim)."""
        x = self.h * np.arange(1, self.n_per_axis + 1)
        if self.dim == 1:
            c = x[:, None]
        else:
            X, Y = np.meshgrid(x, x, indexing="ij")
            c = np.stack([X.ravel(), Y.ravel()], axis=1)
        c.setflags(write=False)
        return c

    @cached_property
    def edge_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates of the upstream and downstream end of every edge.

        Boundary ends sit on the boundary itself, so closed-form functions
        can be evaluated there.
        """
        n, h = self.n_per_axis, self.h
        if self.dim == 1:
            a = h * np.arange(n + 1)
            up, down = a[:, None], (a + h)[:, None]
        else:
            i, j = np.meshgrid(np.arange(n + 1), np.arange(n), indexing="ij")
            up0 = np.stack([i.ravel() * h, (j.ravel() + 1) * h], axis=1)
            i, j = np.meshgrid(np.arange(n), np.arange(n + 1), indexing="ij")
            up1 = np.stack([(i.ravel() + 1) * h, j.ravel() * h], axis=1)
            up = np.vstack([up0, up1])
            down = up.copy()
            down[: up0.shape[0], 0] += h
            down[up0.shape[0]:, 1] += h
        up.setflags(write=False)
        down.setflags(write=False)
        return up, down

    @cached_property
    def edge_midpoints(self) -> np.ndarray:
        up, down = self.edge_endpoints
        return 0.5 * (up + down)

    @cached_property
    def boundary_distance(self) -> np.ndarray:
        c = self.coords
        return np.minimum(c, 1.0 - c).min(axis=1)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_nodes)

    def check(self, u) -> np.ndarray:
        """Validate ``u`` (a grid function, or a stack of them) as floats."""
        u = np.asarray(u, dtype=float)
        if u.ndim < 1 or u.shape[-1] != self.n_nodes:
            raise ValueError(f"expected {self.n_nodes} node values, got shape {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("grid function has non-finite values")
        return u


def extend(u: np.ndarray) -> np.ndarray:
    """Append the zero boundary value so that index ``n_nodes`` reads 0.

    Works on stacks of grid functions (leading batch axes).
    """
    u = np.asarray(u, dtype=float)
    return np.concatenate([u, np.zeros(u.shape[:-1] + (1,))], axis=-1)


def edge_difference(mesh: Mesh, w_ext: np.ndarray) -> np.ndarray:
    """Difference quotients of an already boundary-extended node array."""
    return (w_ext[..., mesh.edge_down] - w_ext[..., mesh.edge_up]) / mesh.h


def discrete_gradient(mesh: Mesh, u) -> np.ndarray:
    return edge_difference(mesh, extend(mesh.check(u)))


def discrete_divergence(mesh: Mesh, F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape[-1] != mesh.n_edges:
        raise ValueError(f"expected {mesh.n_edges} edge values, got shape {F.shape}")
    into, out = mesh.node_edges
    acc = F[..., out[0]] - F[..., into[0]]
    for a in range(1, mesh.dim):
        acc = acc + (F[..., out[a]] - F[..., into[a]])
    return acc / mesh.h


def inner_nodes(mesh: Mesh, u, v) -> float:
    return mesh.cell_volume * float(np.dot(u, v))


def inner_edges(mesh: Mesh, F, G) -> float:
    return mesh.cell_volume * float(np.dot(F, G))


def norm_lq(mesh: Mesh, u, q: float = 2.0) -> float:
    if q < 1:
        raise ValueError(f"norm exponent must be >= 1, got {q}")
    u = np.abs(np.asarray(u, dtype=float))
    if q == 1:
        return mesh.cell_volume * float(u.sum())
    return (mesh.cell_volume * float(np.sum(u**q))) ** (1.0 / q)


def edge_norm_lq(mesh: Mesh, F, q: float) -> float:
    """Discrete L^q norm of an edge field (same h**dim scaling)."""
    if q < 1:
        raise ValueError(f"norm exponent must be >= 1, got {q}")
    return (mesh.cell_volume * float(np.sum(np.abs(F) ** q))) ** (1.0 / q)


def evaluate(mesh: Mesh, func, t: float | None = None) -> np.ndarray:
    """Evaluate ``func(x)`` or ``func(t, x)`` at the interior nodes."""
    x = mesh.coords
    vals = func(x) if t is None else func(t, x)
    return np.broadcast_to(np.asarray(vals, dtype=float), (mesh.n_nodes,)).copy()
