import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from oracles import energy_loop, laplacian_eigenvalue, plap_loop
from renorm_plap.errors import NonConvergence, OffGrid
from renorm_plap.grid import Mesh, evaluate, norm_lq
from renorm_plap.noise import NoiseField, make_noise, sample_brownian
from renorm_plap.plap import PlapParams, apply_plap
from renorm_plap.stepper import (
    SolverOptions,
    implicit_step,
    implicit_step_batch,
    read_trajectory_states,
    solve_ensemble,
    solve_path,
    step_index,
    write_trajectory,
)


def eigenmode(mesh):
    return evaluate(mesh, lambda x: np.prod(np.sin(np.pi * x), axis=1))


def test_scalar_closed_form():
    v = implicit_step(Mesh(1, 1), [1.0], 0.1, [0.0], PlapParams(2))
    assert v[0] == pytest.approx(1 / 1.8, abs=1e-12)


@pytest.mark.parametrize("p,eps", [(1.5, 1e-3), (2, 0), (3, 0), (5, 0)])
def test_zero_is_fixed(p, eps):
    m = Mesh(2, 4)
    assert not np.any(implicit_step(m, m.zeros(), 0.05, m.zeros(), PlapParams(p, eps)))


@pytest.mark.parametrize("dim,n", [(1, 31), (2, 9)])
def test_one_step_eigen_decay(dim, n):
    m = Mesh(dim, n)
    lam = laplacian_eigenvalue(m.h, dim)
    u = eigenmode(m)
    dt = 0.01
    np.testing.assert_allclose(implicit_step(m, u, dt, m.zeros(), PlapParams(2)), u / (1 + dt * lam), atol=1e-12)


@pytest.mark.parametrize("p,eps", [(1.5, 1e-2), (3.0, 0.0), (4.0, 1e-3)])
@pytest.mark.parametrize("dim,n", [(1, 6), (2, 3)])
def test_step_minimizes_convex_objective(p, eps, dim, n):
    m = Mesh(dim, n)
    rng = np.random.default_rng(0)
    b = rng.standard_normal(m.n_nodes)
    dt = 0.02
    v = implicit_step(m, b, dt, m.zeros(), PlapParams(p, eps))
    res = v + dt * plap_loop(dim, n, v, p, eps) - b
    assert np.max(np.abs(res)) <= 1e-10

    def J(w):
        return 0.5 * np.sum((w - b) ** 2) + dt * energy_loop(dim, n, w, p, eps) / m.cell_volume

    def dJ(w):
        return w - b + dt * plap_loop(dim, n, w, p, eps)

    ref = minimize(J, b, jac=dJ, method="BFGS", options={"gtol": 1e-11, "maxiter": 10_000}).x
    np.testing.assert_allclose(v, ref, atol=1e-6)
    assert J(v) <= J(ref) + 1e-12


def test_singular_operator_rejected():
    with pytest.raises(ValueError):
        implicit_step(Mesh(1, 3), [1, 2, 3], 0.1, [0, 0, 0], PlapParams(1.5))


def test_nonconvergence_reports_residual():
    m = Mesh(1, 15)
    u = 10 * np.random.default_rng(1).standard_normal(m.n_nodes)
    with pytest.raises(NonConvergence) as err:
        implicit_step(m, u, 0.5, m.zeros(), PlapParams(1.2, 1e-6), SolverOptions(max_newton_iters=1))
    assert err.value.residual > 0
    assert "reduce dt or increase eps" in str(err.value)


def test_solver_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(newton_tol=0)
    with pytest.raises(ValueError):
        SolverOptions(max_newton_iters=0)


@pytest.mark.parametrize("p,eps", [(1.5, 1e-3), (2.0, 0.0), (3.0, 0.0)])
def test_batch_rows_match_single_steps(p, eps):
    m = Mesh(2, 4)
    rng = np.random.default_rng(2)
    U, F = rng.standard_normal((2, 5, m.n_nodes))
    batch = implicit_step_batch(m, U, 0.01, 0.1 * F, PlapParams(p, eps))
    for i in range(5):
        single = implicit_step(m, U[i], 0.01, 0.1 * F[i], PlapParams(p, eps))
        np.testing.assert_allclose(batch[i], single, atol=1e-11)


@settings(max_examples=40, deadline=None)
@given(p=st.sampled_from([1.5, 2.0, 3.0]), seed=st.integers(0, 2**32 - 1), dt=st.sampled_from([1e-3, 1e-2, 1e-1]))
def test_resolvent_contracts_and_preserves_order(p, seed, dt):
    m = Mesh(1, 12)
    params = PlapParams(p, 1e-3 if p < 2 else 0.0)
    rng = np.random.default_rng(seed)
    a, f = rng.standard_normal((2, m.n_nodes))
    b = a + np.abs(rng.standard_normal(m.n_nodes))  # b >= a
    sa, sb = implicit_step_batch(m, np.stack([a, b]), dt, np.stack([f, f]), params)
    tol = 10 * m.n_nodes * 1e-10
    assert norm_lq(m, sa - sb, 2) <= norm_lq(m, a - b, 2) + tol
    assert norm_lq(m, sa - sb, 1) <= norm_lq(m, a - b, 1) + tol
    assert np.all(sa <= sb + tol)


def test_step_index():
    assert step_index(0.25, 1 / 64) == 16
    with pytest.raises(OffGrid):
        step_index(0.1, 1 / 64)


def test_solve_path_trivial_interval():
    m = Mesh(1, 5)
    path = sample_brownian(1, 8, 0.125)
    u = np.arange(5.0)
    tr = solve_path(m, u, 0.5, 0.5, path, make_noise("const:1"), PlapParams(2))
    assert tr.states.shape == (1, 5)
    np.testing.assert_array_equal(tr.final, u)


def test_solve_path_eigen_decay_many_steps():
    m = Mesh(1, 31)
    lam = laplacian_eigenvalue(m.h)
    dt = 1 / 256
    path = sample_brownian(0, 100, dt)
    tr = solve_path(m, eigenmode(m), 0.0, 100 * dt, path, make_noise("zero"), PlapParams(2))
    n = np.arange(101)[:, None]
    np.testing.assert_allclose(tr.states, eigenmode(m)[None, :] * (1 + dt * lam) ** -n, atol=1e-10)


@pytest.mark.parametrize("p,eps", [(1.5, 1e-3), (3.0, 0.0)])
def test_restart_composition(p, eps):
    m = Mesh(1, 15)
    path = sample_brownian(9, 64, 1 / 64)
    phi, params = make_noise("space:sin"), PlapParams(p, eps)
    u0 = np.random.default_rng(3).standard_normal(m.n_nodes)
    full = solve_path(m, u0, 0.0, 1.0, path, phi, params)
    for s in (0.0, 0.25, 0.5 + 1 / 64, 1.0):
        first = solve_path(m, u0, 0.0, s, path, phi, params)
        second = solve_path(m, first.final, s, 1.0, path, phi, params)
        np.testing.assert_allclose(second.states, full.states[step_index(s, 1 / 64):], atol=10 * 1e-10)


def test_forcing_reads_field_at_left_endpoint():
    seen = []

    def func(t, x):
        seen.append(t)
        return np.ones(len(x))

    phi = NoiseField("probe", func, 1.0, time_dependent=True)
    m = Mesh(1, 3)
    solve_path(m, m.zeros(), 0.25, 0.5, sample_brownian(0, 8, 1 / 16), phi, PlapParams(2))
    np.testing.assert_allclose(sorted(seen), [0.25, 0.3125, 0.375, 0.4375])


def test_absolute_noise_indexing():
    m = Mesh(1, 3)
    path = sample_brownian(5, 4, 0.25)
    phi = make_noise("const:1")
    tr = solve_path(m, m.zeros(), 0.5, 0.75, path, phi, PlapParams(2))
    expected = implicit_step(m, m.zeros(), 0.25, np.full(3, path.increments[2]), PlapParams(2))
    np.testing.assert_allclose(tr.final, expected)


def test_path_too_short():
    m = Mesh(1, 3)
    with pytest.raises(OffGrid):
        solve_path(m, m.zeros(), 0.0, 1.0, sample_brownian(0, 2, 0.25), make_noise("zero"), PlapParams(2))


def test_solve_ensemble_matches_solve_path():
    m = Mesh(2, 5)
    paths = [sample_brownian(s, 16, 1 / 32) for s in range(3)]
    phi, params = make_noise("space:bump"), PlapParams(3)
    u0 = eigenmode(m)
    states = solve_ensemble(m, u0, 0.0, 0.5, paths, phi, params, keep_states=True)
    for i, path in enumerate(paths):
        np.testing.assert_allclose(states[i], solve_path(m, u0, 0.0, 0.5, path, phi, params).states, atol=1e-12)


def test_trajectory_states_satisfy_step_equation():
    m = Mesh(1, 9)
    path = sample_brownian(2, 20, 0.05)
    phi, params = make_noise("const:0.5"), PlapParams(3)
    tr = solve_path(m, eigenmode(m), 0.0, 1.0, path, phi, params)
    for n in range(20):
        res = tr.states[n + 1] + 0.05 * apply_plap(m, tr.states[n + 1], params) - tr.states[n] - 0.5 * path.increments[n]
        assert np.max(np.abs(res)) <= 1e-10


def test_trajectory_csv_round_trip(tmp_path):
    m = Mesh(1, 4)
    tr = solve_path(m, eigenmode(m), 0.0, 0.5, sample_brownian(7, 4, 0.125), make_noise("const:0.2"), PlapParams(2))
    out = tmp_path / "traj.csv"
    write_trajectory(tr, out, {"note": "x"})
    times, states = read_trajectory_states(out)
    np.testing.assert_array_equal(states, tr.states)
    np.testing.assert_array_equal(times, tr.times)
    meta = json.loads((tmp_path / "traj.meta.json").read_text())
    assert meta["seed"] == 7 and meta["phi"] == "const:0.2" and meta["h"] == m.h and meta["note"] == "x"
    assert out.read_text().splitlines()[0] == "step,time,node_index,value"
