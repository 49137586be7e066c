"""Monte Carlo checks of the flow, Markov and contraction properties.

Per-sample noise paths use seeds derived from the master seed with
``SeedSequence(master, spawn_key=key)`` where ``key`` is a tuple naming the
role of the sample (direct / outer / inner layer and index).  Results are
therefore independent of scheduling; samples are aggregated in index order.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import Mesh, norm_lq
from .noise import BrownianPath, NoiseField, sample_brownian
from .plap import PlapParams
from .stepper import SolverOptions, solve_ensemble, solve_path, step_index


CHUNK = 1024


def worker_count() -> int:
    raw = os.environ.get("RENORM_PLAP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def ensemble_map(fn, items) -> list:
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sample_seed(master_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class Model:
    mesh: Mesh
    params: PlapParams
    phi: NoiseField
    dt: float
    opts: SolverOptions = SolverOptions()

    @property
    def tolerance(self) -> float:
        """Slack for pathwise inequalities: 10 * n_nodes * newton_tol."""
        return 10 * self.mesh.n_nodes * self.opts.newton_tol

    def path(self, seed: int, t: float) -> BrownianPath:
        return sample_brownian(seed, step_index(t, self.dt), self.dt)

    def evolve(self, x, s: float, t: float, path: BrownianPath) -> np.ndarray:
        return solve_path(self.mesh, x, s, t, path, self.phi, self.params, self.opts).final

    def evolve_many(self, X, s: float, t: float, seeds) -> np.ndarray:
        """Final states for one start (or one start per seed) over seeded paths.

        Work is split into chunks of :data:`CHUNK` rows, which are mapped over
        the worker threads.
        """
        seeds = list(seeds)
        X = np.asarray(X, dtype=float)
        per_row = X.ndim == 2

        def run(lo):
            hi = min(lo + CHUNK, len(seeds))
            paths = [self.path(sd, t) for sd in seeds[lo:hi]]
            start = X[lo:hi] if per_row else X
            return solve_ensemble(self.mesh, start, s, t, paths, self.phi, self.params, self.opts)

        return np.concatenate(ensemble_map(run, range(0, len(seeds), CHUNK)), axis=0)


@dataclass(frozen=True)
class ObservableSpec:
    label: str
    func: Callable[[Mesh, np.ndarray], float]
    bound: float
    lipschitz_const: float | None = None

    def __call__(self, mesh: Mesh, w) -> float:
        return float(self.func(mesh, w))


def make_observable(name: str) -> ObservableSpec:
    """Registry: ``clipped_l1[:c]`` (min(|w|_1, c), Lipschitz 1), ``const:<c>``,
    ``cos_mode`` (cos of the first-mode coefficient, Lipschitz 1) and
    ``tanh_mass`` (tanh of the integral, Lipschitz 1)."""
    kind, _, arg = name.partition(":")
    if kind == "clipped_l1":
        c = float(arg) if arg else 1.0
        return ObservableSpec(name, lambda m, w: min(norm_lq(m, w, 1), c), c, 1.0)
    if kind == "const":
        c = float(arg)
        return ObservableSpec(name, lambda m, w: c, abs(c), 0.0)
    if kind == "cos_mode" and not arg:
        def cos_mode(m, w):
            mode = np.prod(np.sin(np.pi * m.coords), axis=1)
            return np.cos(m.cell_volume * np.dot(mode, w))

        return ObservableSpec(name, cos_mode, 1.0, 1.0)
    if kind == "tanh_mass" and not arg:
        return ObservableSpec(name, lambda m, w: np.tanh(m.cell_volume * np.sum(w)), 1.0, 1.0)
    raise ValueError(f"unknown observable {name!r}")


@dataclass(frozen=True)
class SemigroupEstimate:
    value: float
    std_error: float
    n_samples: int
    s: float
    t: float
    x_label: str
    obs_label: str
    seed: int


def _mean_se(vals) -> tuple[float, float]:
    vals = np.asarray(vals, dtype=float)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def contraction_check(
    model: Model, u0, v0, path: BrownianPath, n_eval_times: int | None = None
) -> float:
    """max_t |u(t) - v(t)|_1 - |u0 - v0|_1 over times t > 0, for two solves
    driven by one path.

    ``n_eval_times=None`` evaluates every step; otherwise that many steps are
    spread evenly over (0, T].
    """
    mesh = model.mesh
    pair = np.stack([mesh.check(u0), mesh.check(v0)])
    states = solve_ensemble(mesh, pair, 0.0, path.horizon, [path, path], model.phi, model.params, model.opts, keep_states=True)
    diff = states[0] - states[1]
    n_steps = diff.shape[0] - 1
    if n_steps == 0:
        return 0.0
    idx = np.arange(1, n_steps + 1)
    if n_eval_times is not None:
        idx = np.unique(np.linspace(1, n_steps, n_eval_times).round().astype(int))
    diff0 = norm_lq(mesh, diff[0], 1)
    return max(norm_lq(mesh, diff[i], 1) for i in idx) - diff0


def flow_check(model: Model, u_r, r: float, s: float, t: float, path: BrownianPath) -> float:
    """|u(t, r, u_r) - u(t, s, u(s, r, u_r))|_1 on one noise path."""
    if not r <= s <= t:
        raise ValueError(f"need r <= s <= t, got {r}, {s}, {t}")
    direct = model.evolve(u_r, r, t, path)
    mid = model.evolve(u_r, r, s, path)
    composed = model.evolve(mid, s, t, path)
    return norm_lq(model.mesh, direct - composed, 1)


def _estimate_values(model, obs, x, s, t, seeds) -> np.ndarray:
    finals = model.evolve_many(x, s, t, seeds)
    return np.array([obs(model.mesh, w) for w in finals])


def semigroup_estimate(
    model: Model,
    obs: ObservableSpec,
    x,
    s: float,
    t: float,
    n_samples: int,
    master_seed: int,
    x_label: str = "x",
    key: tuple[int, ...] = (),
) -> SemigroupEstimate:
    """Estimate of E[obs(u(t, s, x))] over independent noise paths."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    seeds = [sample_seed(master_seed, *key, i) for i in range(n_samples)]
    mean, se = _mean_se(_estimate_values(model, obs, x, s, t, seeds))
    return SemigroupEstimate(mean, se, n_samples, s, t, x_label, obs.label, master_seed)


@dataclass(frozen=True)
class GapResult:
    gap: float
    combined_se: float
    first: float
    second: float

    def within(self, n_se: float = 4.0) -> bool:
        return self.gap <= n_se * self.combined_se


def chapman_kolmogorov_check(
    model: Model,
    obs: ObservableSpec,
    x,
    r: float,
    s: float,
    t: float,
    n_outer: int,
    n_inner: int,
    master_seed: int,
    n_direct: int | None = None,
) -> GapResult:
    """Compare P_{r,t} obs(x) with the nested estimate of P_{r,s}(P_{s,t} obs)(x).

    The nested estimator runs ``n_outer`` paths on [r, s] and, from each
    endpoint, ``n_inner`` fresh paths on [s, t].  Its standard error is taken
    from the spread of the per-endpoint inner means, which accounts for both
    layers.  The discrete chain is exactly Markov, so no discretization bias
    enters the comparison.
    """
    if not r <= s <= t:
        raise ValueError(f"need r <= s <= t, got {r}, {s}, {t}")
    n_direct = n_outer if n_direct is None else n_direct
    direct = semigroup_estimate(model, obs, x, r, t, n_direct, master_seed, key=(0,))

    if n_outer < 2 or n_inner < 1:
        raise ValueError("need n_outer >= 2 and n_inner >= 1")
    mids = model.evolve_many(x, r, s, [sample_seed(master_seed, 1, j) for j in range(n_outer)])
    starts = np.repeat(mids, n_inner, axis=0)
    seeds = [sample_seed(master_seed, 2, j, i) for j in range(n_outer) for i in range(n_inner)]
    finals = model.evolve_many(starts, s, t, seeds)
    vals = np.array([obs(model.mesh, w) for w in finals])
    nest, nest_se = _mean_se(vals.reshape(n_outer, n_inner).mean(axis=1))
    combined = float(np.hypot(direct.std_error, nest_se))
    return GapResult(abs(direct.value - nest), combined, direct.value, nest)


def homogeneity_check(
    model: Model,
    obs: ObservableSpec,
    x,
    s: float,
    t: float,
    n_samples: int,
    master_seed: int,
    shared_seeds: bool = False,
) -> GapResult:
    """Compare P_{s,t} obs(x) with P_{0,t-s} obs(x)."""
    if model.phi.time_dependent:
        raise ValueError("time homogeneity is only checked for time-independent noise fields")
    if not s <= t:
        raise ValueError(f"need s <= t, got {s}, {t}")
    shifted = semigroup_estimate(model, obs, x, s, t, n_samples, master_seed, key=(0,))
    base_key = (0,) if shared_seeds else (1,)
    base = semigroup_estimate(model, obs, x, 0.0, t - s, n_samples, master_seed, key=base_key)
    combined = float(np.hypot(shifted.std_error, base.std_error))
    return GapResult(abs(shifted.value - base.value), combined, shifted.value, base.value)


def e_property_check(
    model: Model, obs: ObservableSpec, x, z, s: float, t: float, n_samples: int, master_seed: int
) -> float:
    """|P obs(x) - P obs(z)| - L |x - z|_1 with both estimates on common paths."""
    if obs.lipschitz_const is None:
        raise ValueError(f"observable {obs.label} has no Lipschitz constant")
    seeds = [sample_seed(master_seed, i) for i in range(n_samples)]
    px = np.mean(_estimate_values(model, obs, x, s, t, seeds))
    pz = np.mean(_estimate_values(model, obs, z, s, t, seeds))
    return float(abs(px - pz) - obs.lipschitz_const * norm_lq(model.mesh, np.subtract(x, z), 1))


def feller_check(
    model: Model,
    obs: ObservableSpec,
    x,
    direction,
    n_levels: int,
    s: float,
    t: float,
    n_samples: int,
    master_seed: int,
) -> list[float]:
    """Gaps |P obs(x + 2^-j direction) - P obs(x)|, j = 1..n_levels, on common paths."""
    seeds = [sample_seed(master_seed, i) for i in range(n_samples)]
    x = np.asarray(x, dtype=float)
    base = np.mean(_estimate_values(model, obs, x, s, t, seeds))
    gaps = []
    for j in range(1, n_levels + 1):
        xj = x + 2.0**-j * np.asarray(direction, dtype=float)
        gaps.append(float(abs(np.mean(_estimate_values(model, obs, xj, s, t, seeds)) - base)))
    return gaps


@dataclass(frozen=True)
class CampaignRow:
    check: str
    params: str
    value: float
    threshold: float
    passed: bool


def write_campaign(rows: list[CampaignRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "params", "value", "threshold", "passed"])
        for row in rows:
            w.writerow([row.check, row.params, repr(row.value), repr(row.threshold), str(row.passed).lower()])
