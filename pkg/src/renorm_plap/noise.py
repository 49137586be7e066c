"""Brownian increments and deterministic noise fields.

Increments come from ``numpy.random.Generator(PCG64(seed)).standard_normal``
scaled by ``sqrt(dt)``.  Ensemble member ``i`` of a campaign with master seed
``m`` uses the 64-bit seed produced by ``SeedSequence(m, spawn_key=(i,))``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import Mesh


@dataclass(frozen=True, eq=False)
class BrownianPath:
    dt: float
    increments: np.ndarray
    seed: int

    @property
    def n_steps(self) -> int:
        return len(self.increments)

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def values(self) -> np.ndarray:
        """beta at t_0 = 0, t_1, ..., t_N."""
        return np.concatenate([[0.0], np.cumsum(self.increments)])

    def coarsen(self, factor: int) -> "BrownianPath":
        """Same realization on a grid ``factor`` times coarser.

        Coarse increments are sums of consecutive fine increments, which is
        the nesting rule used by refinement studies.
        """
        if factor < 1 or self.n_steps % factor:
            raise ValueError(f"cannot coarsen {self.n_steps} steps by {factor}")
        inc = self.increments.reshape(-1, factor).sum(axis=1)
        return BrownianPath(self.dt * factor, inc, self.seed)


def sample_brownian(seed: int, n_steps: int, dt: float) -> BrownianPath:
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    rng = np.random.Generator(np.random.PCG64(seed))
    inc = rng.standard_normal(n_steps) * np.sqrt(dt)
    inc.setflags(write=False)
    return BrownianPath(dt, inc, int(seed))


def derive_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class NoiseField:
    name: str
    func: Callable[[float, np.ndarray], np.ndarray]
    bound: float
    time_dependent: bool = False

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.func(t, x)

    def at_nodes(self, t: float, mesh: Mesh) -> np.ndarray:
        vals = np.asarray(self.func(t, mesh.coords), dtype=float)
        return np.broadcast_to(vals, (mesh.n_nodes,)).copy()

    @property
    def is_zero(self) -> bool:
        return self.bound == 0


def _sin_product(x: np.ndarray) -> np.ndarray:
    return np.prod(np.sin(np.pi * x), axis=1)


def _bump(x: np.ndarray) -> np.ndarray:
    return np.prod(4.0 * x * (1.0 - x), axis=1)


SPACE_PROFILES = {"sin": (_sin_product, 1.0), "bump": (_bump, 1.0)}


def make_noise(name: str) -> NoiseField:
    """Build a noise field from its registry name.

    Accepted: ``zero``, ``const:<c>``, ``sinprod:<a>`` (``a cos(2 pi t)``
    times the sine product, time dependent) and ``space:<profile>`` with
    profile ``sin`` or ``bump``.
    """
    kind, _, arg = name.partition(":")
    if kind == "zero" and not arg:
        return NoiseField(name, lambda t, x: np.zeros(len(x)), 0.0)
    if kind == "const":
        c = float(arg)
        return NoiseField(name, lambda t, x: np.full(len(x), c), abs(c))
    if kind == "sinprod":
        a = float(arg)
        return NoiseField(
            name, lambda t, x: a * np.cos(2 * np.pi * t) * _sin_product(x), abs(a), True
        )
    if kind == "space" and arg in SPACE_PROFILES:
        f, bound = SPACE_PROFILES[arg]
        return NoiseField(name, lambda t, x: f(x), bound)
    raise ValueError(f"unknown noise field {name!r}")


def ito_forcing(phi: NoiseField, t_n: float, dbeta: float, mesh: Mesh) -> np.ndarray:
    """Forcing of the step starting at ``t_n``; Phi is read at the left end."""
    return phi.at_nodes(t_n, mesh) * dbeta
