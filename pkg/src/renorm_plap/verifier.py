"""Discrete residuals of the renormalized / Ito identities along trajectories.

Conventions shared by every evaluator:

* spatial integrals are ``h**dim`` node (or edge) sums;
* time integrals are left-endpoint Riemann sums on the trajectory grid, and
  the stochastic integral is the left-endpoint Ito sum;
* edge terms evaluate S', S'' at the average of the two endpoint values, and
  psi at the edge through its endpoint values (true boundary values of psi,
  not the Dirichlet ghost 0).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InadmissiblePair, InadmissibleZ, MismatchedCoupling, OffGrid
from .grid import Mesh, discrete_gradient
from .plap import edge_flux
from .stepper import Trajectory
from .truncation import ScalarFamily, t_k, tilde_t_k


@dataclass(frozen=True)
class TestFunctionSpec:
    __test__ = False  # not a pytest class

    name: str
    psi: Callable[[float, np.ndarray], np.ndarray]
    psi_t: Callable[[float, np.ndarray], np.ndarray]
    grad: Callable[[float, np.ndarray], np.ndarray]
    vanishes_on_boundary: bool


def _sinprod(x):
    return np.prod(np.sin(np.pi * x), axis=1)


def _sinprod_grad(x):
    s, c = np.sin(np.pi * x), np.cos(np.pi * x)
    if x.shape[1] == 1:
        return np.pi * c
    return np.pi * np.stack([c[:, 0] * s[:, 1], s[:, 0] * c[:, 1]], axis=1)


def make_test_function(name: str) -> TestFunctionSpec:
    """Registry: ``zero``, ``one``, ``sin`` and ``sin_decay`` (e^{-t} sin)."""
    zero = lambda t, x: np.zeros(len(x))
    zgrad = lambda t, x: np.zeros_like(x)
    if name == "zero":
        return TestFunctionSpec(name, zero, zero, zgrad, True)
    if name == "one":
        return TestFunctionSpec(name, lambda t, x: np.ones(len(x)), zero, zgrad, False)
    if name == "sin":
        return TestFunctionSpec(name, lambda t, x: _sinprod(x), zero, lambda t, x: _sinprod_grad(x), True)
    if name == "sin_decay":
        return TestFunctionSpec(
            name,
            lambda t, x: np.exp(-t) * _sinprod(x),
            lambda t, x: -np.exp(-t) * _sinprod(x),
            lambda t, x: np.exp(-t) * _sinprod_grad(x),
            True,
        )
    raise ValueError(f"unknown test function {name!r}")


@dataclass
class ResidualReport:
    label: str
    t: float
    dt: float
    h: float
    eps: float
    terms: dict[str, float]
    signs: dict[str, int]
    residual: float = field(init=False)

    def __post_init__(self):
        self.residual = abs(self.signed_sum())

    def signed_sum(self) -> float:
        """LHS - RHS assembled from the breakdown."""
        return float(sum(self.signs[k] * v for k, v in self.terms.items()))


def write_reports(reports: list[ResidualReport], path, extra: list[dict] | None = None) -> None:
    if not reports:
        raise ValueError("no reports to write")
    names = list(reports[0].terms)
    extra = extra or [{} for _ in reports]
    extra_keys = list(extra[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(extra_keys + ["label", "t", "h", "dt", "eps"] + names + ["residual"])
        for rep, ex in zip(reports, extra):
            w.writerow(
                [ex[k] for k in extra_keys]
                + [rep.label, repr(rep.t), repr(rep.h), repr(rep.dt), repr(rep.eps)]
                + [repr(rep.terms[k]) for k in names]
                + [repr(rep.residual)]
            )


def _edge_average(mesh: Mesh, states: np.ndarray) -> np.ndarray:
    ext = np.concatenate([states, np.zeros((len(states), 1))], axis=1)
    return 0.5 * (ext[:, mesh.edge_up] + ext[:, mesh.edge_down])


def _grad_rows(mesh: Mesh, rows: np.ndarray) -> np.ndarray:
    ext = np.concatenate([rows, np.zeros((len(rows), 1))], axis=1)
    return (ext[:, mesh.edge_down] - ext[:, mesh.edge_up]) / mesh.h


def renorm_residual(
    traj: Trajectory, S: ScalarFamily, psi: TestFunctionSpec, t_eval: float
) -> ResidualReport:
    """Residual of the renormalized identity at ``t_eval``.

    LHS: S(u)psi endpoints + int S''(u) flux.grad u psi + int S'(u) flux.grad psi
    RHS: Ito term + int S(u) psi_t + 1/2 int S''(u) psi Phi^2
    """
    if float(S.d1(np.array([0.0]))[0]) != 0.0 and not psi.vanishes_on_boundary:
        raise InadmissiblePair(f"{S.label} has S'(0) != 0 but psi={psi.name} does not vanish on the boundary")
    k = traj.index_of(t_eval)
    mesh, dt, vol = traj.mesh, traj.dt, traj.mesh.cell_volume
    x = mesh.coords
    up, down = mesh.edge_endpoints
    times = traj.times
    u = traj.states[: k + 1]
    left = u[:-1]

    psi_nodes = np.array([psi.psi(times[n], x) for n in range(k + 1)])
    psi_t_nodes = np.array([psi.psi_t(times[n], x) for n in range(k)]).reshape(k, -1)
    psi_up = np.array([psi.psi(times[n], up) for n in range(k)]).reshape(k, -1)
    psi_down = np.array([psi.psi(times[n], down) for n in range(k)]).reshape(k, -1)
    phi_nodes = np.array([traj.phi.at_nodes(times[n], mesh) for n in range(k)]).reshape(k, -1)
    dbeta = traj.path.increments[traj.start_step : traj.start_step + k]

    g = _grad_rows(mesh, left)
    flux = edge_flux(g, traj.params)
    ubar = _edge_average(mesh, left)
    psi_bar = 0.5 * (psi_up + psi_down)
    grad_psi = (psi_down - psi_up) / mesh.h

    terms = {
        "term_S_endpoints": vol * float(
            np.sum(S.value(u[k]) * psi_nodes[k]) - np.sum(S.value(u[0]) * psi_nodes[0])
        ),
        "term_Spp_grad": dt * vol * float(np.sum(S.d2(ubar) * flux * g * psi_bar)),
        "term_grad_psi": dt * vol * float(np.sum(S.d1(ubar) * flux * grad_psi)),
        "term_ito": vol * float(np.sum((S.d1(left) * phi_nodes * psi_nodes[:k]).sum(axis=1) * dbeta)),
        "term_psi_t": dt * vol * float(np.sum(S.value(left) * psi_t_nodes)),
        "term_Spp_phi2": 0.5 * dt * vol * float(np.sum(S.d2(left) * psi_nodes[:k] * phi_nodes**2)),
    }
    signs = {
        "term_S_endpoints": 1,
        "term_Spp_grad": 1,
        "term_grad_psi": 1,
        "term_ito": -1,
        "term_psi_t": -1,
        "term_Spp_phi2": -1,
    }
    return ResidualReport(
        f"renorm[{S.label},{psi.name}]", float(times[k]), dt, mesh.h, traj.params.eps, terms, signs
    )


def _check_coupling(u_traj: Trajectory, v_traj: Trajectory):
    same = (
        u_traj.mesh == v_traj.mesh
        and u_traj.dt == v_traj.dt
        and u_traj.start_step == v_traj.start_step
        and u_traj.params == v_traj.params
        and u_traj.phi.name == v_traj.phi.name
        and np.array_equal(
            u_traj.path.increments[u_traj.start_step :][: len(u_traj.states) - 1],
            v_traj.path.increments[v_traj.start_step :][: len(v_traj.states) - 1],
        )
    )
    if not same:
        raise MismatchedCoupling("trajectories differ in mesh, time grid, parameters, noise path or Phi")


def ito_product_residual(
    u_traj: Trajectory, v_traj: Trajectory, H: ScalarFamily, Z: ScalarFamily, t_eval: float
) -> ResidualReport:
    """Residual of the Ito product rule for ``(Z(u - v), H(u))``.

    Duality pairings are evaluated by summation by parts:
    ``<Delta_p(u), w> = -h**dim sum_e flux_e (grad w)_e``.
    """
    _check_coupling(u_traj, v_traj)
    z0 = Z.value(np.array([0.0]))[0], Z.d1(np.array([0.0]))[0]
    if z0[0] != 0.0 or z0[1] != 0.0:
        raise InadmissibleZ(f"{Z.label} needs Z(0) = Z'(0) = 0, got {z0}")
    k = u_traj.index_of(t_eval)
    if len(v_traj.states) <= k:
        raise OffGrid(f"time {t_eval} outside the second trajectory")
    mesh, dt, vol = u_traj.mesh, u_traj.dt, u_traj.mesh.cell_volume
    times = u_traj.times
    u, v = u_traj.states[: k + 1], v_traj.states[: k + 1]
    w = u - v
    ul, wl = u[:-1], w[:-1]
    phi_nodes = np.array([u_traj.phi.at_nodes(times[n], mesh) for n in range(k)]).reshape(k, -1)
    dbeta = u_traj.path.increments[u_traj.start_step : u_traj.start_step + k]

    flux_u = edge_flux(_grad_rows(mesh, ul), u_traj.params)
    flux_v = edge_flux(_grad_rows(mesh, v[:-1]), u_traj.params)
    test_a = _grad_rows(mesh, H.value(ul) * Z.d1(wl))
    test_b = _grad_rows(mesh, H.d1(ul) * Z.value(wl))

    terms = {
        "term_ZH_endpoints": vol * float(
            np.sum(Z.value(w[k]) * H.value(u[k])) - np.sum(Z.value(w[0]) * H.value(u[0]))
        ),
        "term_diff_flux": -dt * vol * float(np.sum((flux_u - flux_v) * test_a)),
        "term_flux_Hp": -dt * vol * float(np.sum(flux_u * test_b)),
        "term_ito": vol * float(np.sum((phi_nodes * H.d1(ul) * Z.value(wl)).sum(axis=1) * dbeta)),
        "term_Hpp_phi2": 0.5 * dt * vol * float(np.sum(phi_nodes**2 * H.d2(ul) * Z.value(wl))),
    }
    signs = {name: -1 for name in terms}
    signs["term_ZH_endpoints"] = 1
    return ResidualReport(
        f"product[{H.label},{Z.label}]", float(times[k]), dt, mesh.h, u_traj.params.eps, terms, signs
    )


def _check_ensemble(ensemble: list[Trajectory]):
    if not ensemble:
        raise ValueError("empty ensemble")
    ref = ensemble[0]
    for tr in ensemble[1:]:
        if tr.mesh != ref.mesh or tr.dt != ref.dt or tr.states.shape != ref.states.shape:
            raise MismatchedCoupling("ensemble members use different discretizations")


@dataclass(frozen=True)
class TruncationEnergy:
    k: float
    energy: float
    std_error: float
    bound: float
    identity_rhs: float
    n_samples: int


def _mean_se(vals: np.ndarray) -> tuple[float, float]:
    if len(vals) < 2:
        return float(vals.mean()), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def truncation_energy(ensemble: list[Trajectory], k: float) -> TruncationEnergy:
    """Monte Carlo mean of ``h**dim dt sum_n sum_e |grad_h T_k(u_n)|^p``.

    Also returns the bound obtained from the Ito identity for the primitive of
    T_k (``bound = int T~_k(u_0) + 1/2 int int chi_{|u|<k} Phi^2``) and the
    identity's right-hand side, which additionally subtracts ``int T~_k(u(T))``.
    """
    _check_ensemble(ensemble)
    energies, bounds, rhs = [], [], []
    for tr in ensemble:
        mesh, vol, dt, p = tr.mesh, tr.mesh.cell_volume, tr.dt, tr.params.p
        left = tr.states[:-1]
        g = _grad_rows(mesh, t_k(left, k))
        energies.append(dt * vol * float(np.sum(np.abs(g) ** p)))
        phi2 = np.array([tr.phi.at_nodes(t, mesh) ** 2 for t in tr.times[:-1]]).reshape(left.shape)
        noise = 0.5 * dt * vol * float(np.sum((np.abs(left) < k) * phi2))
        start = vol * float(np.sum(tilde_t_k(tr.states[0], k)))
        end = vol * float(np.sum(tilde_t_k(tr.states[-1], k)))
        bounds.append(start + noise)
        rhs.append(start - end + noise)
    mean, se = _mean_se(np.array(energies))
    return TruncationEnergy(k, mean, se, float(np.mean(bounds)), float(np.mean(rhs)), len(ensemble))


@dataclass(frozen=True)
class DissipationRow:
    k: float
    value: float
    std_error: float


def band_energy(tr: Trajectory, k: float) -> float:
    """``h**dim dt sum |g_e|^p`` over edges whose both endpoint moduli lie in (k, k+1)."""
    mesh = tr.mesh
    left = np.abs(tr.states[:-1])
    ext = np.concatenate([left, np.zeros((len(left), 1))], axis=1)
    a, b = ext[:, mesh.edge_up], ext[:, mesh.edge_down]
    inside = (a > k) & (a < k + 1) & (b > k) & (b < k + 1)
    g = _grad_rows(mesh, tr.states[:-1])
    return tr.dt * mesh.cell_volume * float(np.sum(np.where(inside, np.abs(g) ** tr.params.p, 0.0)))


def dissipation_profile(ensemble: list[Trajectory], ks) -> list[DissipationRow]:
    _check_ensemble(ensemble)
    ks = [float(k) for k in ks]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("ks must be increasing")
    rows = []
    for k in ks:
        mean, se = _mean_se(np.array([band_energy(tr, k) for tr in ensemble]))
        rows.append(DissipationRow(k, mean, se))
    return rows


def generalized_gradient(mesh: Mesh, u, k: float) -> tuple[np.ndarray, np.ndarray]:
    """``grad_h T_k(u)`` and the mask of edges lying inside ``{|u| < k}``."""
    u = mesh.check(u)
    ext = np.abs(np.append(u, 0.0))
    mask = (ext[mesh.edge_up] < k) & (ext[mesh.edge_down] < k)
    return discrete_gradient(mesh, t_k(u, k)), mask
