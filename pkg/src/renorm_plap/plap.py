"""Discrete p-Laplacian and its convex energy.

On every edge the flux is ``m(g) * g`` with ``m(g) = (g**2 + eps**2)**((p-2)/2)``
and ``g`` the edge difference quotient, so

    A_h(u) = -div_h(m(grad_h u) * grad_h u)

is the gradient (up to the factor ``h**dim``) of

    E(u) = h**dim * sum_e (g_e**2 + eps**2)**(p/2) / p.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Mesh, discrete_divergence, discrete_gradient


class SingularOperatorError(ValueError):
    """Raised when p < 2, eps = 0 and some edge gradient vanishes."""


@dataclass(frozen=True)
class PlapParams:
    p: float
    eps: float = 0.0

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"p must be > 1, got {self.p}")
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")

    @property
    def singular(self) -> bool:
        return self.p < 2 and self.eps == 0


def edge_weight(g: np.ndarray, params: PlapParams) -> np.ndarray:
    p, eps = params.p, params.eps
    if p == 2:
        return np.ones_like(g)
    s = g * g + eps * eps
    if p < 2 and np.any(s == 0):
        raise SingularOperatorError("zero edge gradient with p < 2 and eps = 0")
    return s ** ((p - 2) / 2)


def edge_flux(g: np.ndarray, params: PlapParams) -> np.ndarray:
    return edge_weight(g, params) * g


def edge_flux_derivative(g: np.ndarray, params: PlapParams) -> np.ndarray:
    """d/dg of ``m(g) g``, i.e. ``(g^2+eps^2)^((p-4)/2) ((p-1) g^2 + eps^2)``."""
    p, eps = params.p, params.eps
    if p == 2:
        return np.ones_like(g)
    s = g * g + eps * eps
    if p < 2 and np.any(s == 0):
        raise SingularOperatorError("zero edge gradient with p < 2 and eps = 0")
    if p < 4:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = s ** ((p - 4) / 2) * ((p - 1) * g * g + eps * eps)
        # p in (2, 4), eps = 0, g = 0: the limit is 0
        return np.where(s == 0, 0.0, out)
    return s ** ((p - 4) / 2) * ((p - 1) * g * g + eps * eps)


def apply_plap(mesh: Mesh, u, params: PlapParams) -> np.ndarray:
    g = discrete_gradient(mesh, u)
    return -discrete_divergence(mesh, edge_flux(g, params))


def energy(mesh: Mesh, u, params: PlapParams) -> float:
    g = discrete_gradient(mesh, u)
    p, eps = params.p, params.eps
    return mesh.cell_volume * float(np.sum((g * g + eps * eps) ** (p / 2))) / p
