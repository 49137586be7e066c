"""Discrete regularizing operators ``v -> (phi_n v) * rho_n``.

``phi_n`` is the boundary cutoff: 0 within distance 1/n of the boundary, 1
beyond distance 2/n, linear in the boundary distance in between (slope n).
``rho_n`` is a tensor product of triangular weights supported in
``[-1/n, 1/n]`` and normalized to unit mass under the ``h**dim`` quadrature.
The convolution zero-extends across the boundary.

Only the L^1 / L^2 / discrete W^{1,p} statements are checked numerically;
negative-norm (W^{-1,p'}) bounds are not computed.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .grid import Mesh, discrete_gradient, edge_norm_lq, norm_lq


@dataclass(frozen=True, eq=False)
class CutoffProfile:
    n: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class MollifierKernel:
    n: int
    half_width: float
    weights: np.ndarray  # 1D weights on offsets -m..m (per axis)

    @property
    def radius(self) -> int:
        return (len(self.weights) - 1) // 2


def _check_level(n: int, mesh: Mesh):
    if n < 2:
        raise ValueError(f"level n must be >= 2, got {n}")
    if 1.0 / n < mesh.h:
        raise ValueError(f"cutoff at level {n} is not resolvable with h={mesh.h:g}")
    if mesh.h >= 1.0 / (2 * n):
        warnings.warn(f"level {n} is barely resolved on h={mesh.h:g}", stacklevel=3)


def cutoff_values(dist, n: int):
    """Cutoff as a function of the boundary distance."""
    return np.clip(n * np.asarray(dist, dtype=float) - 1.0, 0.0, 1.0)


def build_cutoff(n: int, mesh: Mesh) -> CutoffProfile:
    _check_level(n, mesh)
    vals = cutoff_values(mesh.boundary_distance, n)
    vals.setflags(write=False)
    return CutoffProfile(n, vals)


def build_mollifier(n: int, mesh: Mesh, half_width: float | None = None) -> MollifierKernel:
    hw = 1.0 / n if half_width is None else half_width
    if not 0 < hw <= 1.0 / n:
        raise ValueError(f"half width must lie in (0, 1/n], got {hw}")
    m = int(np.floor(hw / mesh.h + 1e-12))
    offsets = mesh.h * np.arange(-m, m + 1)
    w = np.clip(1.0 - np.abs(offsets) / hw, 0.0, None)
    w /= mesh.h * w.sum()
    w.setflags(write=False)
    return MollifierKernel(n, hw, w)


def _convolve(mesh: Mesh, f: np.ndarray, kernel: MollifierKernel) -> np.ndarray:
    n = mesh.n_per_axis
    arr = f.reshape((n,) * mesh.dim)
    w = mesh.h * kernel.weights
    for axis in range(mesh.dim):
        arr = convolve1d(arr, w, axis=axis, mode="constant", cval=0.0)
    return arr.ravel()


def apply_pi_n(v, n: int, mesh: Mesh, half_width: float | None = None) -> np.ndarray:
    v = mesh.check(v)
    cut = build_cutoff(n, mesh)
    return _convolve(mesh, cut.values * v, build_mollifier(n, mesh, half_width))


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    q: str
    discrepancy: float


def pi_n_convergence_report(
    v, mesh: Mesh, levels, qs=(1, 2), sobolev_p: float | None = None
) -> list[ConvergenceRow]:
    """``||Pi_n v - v||`` per level, in each L^q norm and optionally in the
    discrete W^{1,p} seminorm (rows labelled ``W1p<p>``)."""
    v = mesh.check(v)
    rows = []
    for n in levels:
        diff = apply_pi_n(v, n, mesh) - v
        for q in qs:
            rows.append(ConvergenceRow(n, f"{q:g}", norm_lq(mesh, diff, q)))
        if sobolev_p is not None:
            gnorm = edge_norm_lq(mesh, discrete_gradient(mesh, diff), sobolev_p)
            rows.append(ConvergenceRow(n, f"W1p{sobolev_p:g}", gnorm))
    return rows


def write_report(rows: list[ConvergenceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "q", "discrepancy"])
        for row in rows:
            w.writerow([row.n, row.q, repr(row.discrepancy)])
