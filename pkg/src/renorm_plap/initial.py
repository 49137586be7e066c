"""Registry of initial data.

``zero``, ``eigenmode[:amp]`` (amp times the first Dirichlet eigenvector),
``bump[:amp]`` (a smooth bump supported in the middle half of each axis),
``spike[:mass]`` (all mass on one seeded random node, a discrete stand-in for
merely integrable data), ``step[:height]`` (height on the middle half of each
axis) and ``random[:scale]`` (i.i.d. normal values).
"""
from __future__ import annotations

import numpy as np

from .grid import Mesh


def _bump(x: np.ndarray) -> np.ndarray:
    """exp(1 - 1/(1 - z^2)) with z = 4(x - 1/2); 1 at the centre, C-infinity."""
    z = 4.0 * (x - 0.5)
    inside = np.abs(z) < 1
    out = np.zeros_like(x)
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - z[inside] ** 2))
    return out


def make_initial(name: str, mesh: Mesh, seed: int = 0) -> np.ndarray:
    kind, _, arg = name.partition(":")
    try:
        a = float(arg) if arg else 1.0
    except ValueError:
        raise ValueError(f"bad argument in initial datum {name!r}") from None
    x = mesh.coords
    if kind == "zero":
        return mesh.zeros()
    if kind == "eigenmode":
        return a * np.prod(np.sin(np.pi * x), axis=1)
    if kind == "bump":
        return a * np.prod(_bump(x), axis=1)
    if kind == "step":
        inside = np.all((x > 0.25) & (x < 0.75), axis=1)
        return np.where(inside, a, 0.0)
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == "spike":
        u = mesh.zeros()
        u[rng.integers(mesh.n_nodes)] = a / mesh.cell_volume
        return u
    if kind == "random":
        return a * rng.standard_normal(mesh.n_nodes)
    raise ValueError(f"unknown initial datum {name!r}")
