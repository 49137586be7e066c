import numpy as np
import pytest

from renorm_plap.grid import Mesh
from renorm_plap.noise import derive_seed, ito_forcing, make_noise, sample_brownian


def test_empty_path():
    path = sample_brownian(5, 0, 0.1)
    assert path.n_steps == 0
    np.testing.assert_array_equal(path.values(), [0.0])


def test_determinism():
    a, b = sample_brownian(11, 50, 0.01), sample_brownian(11, 50, 0.01)
    np.testing.assert_array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, sample_brownian(12, 50, 0.01).increments)


def test_rejects_bad_dt():
    with pytest.raises(ValueError):
        sample_brownian(1, 10, 0.0)
    with pytest.raises(ValueError):
        sample_brownian(1, -1, 0.1)


def test_increment_variance():
    # chi-square with 10^4 degrees of freedom: the relative sd of the sample
    # variance is sqrt(2/10^4) ~ 0.014, so [0.9, 1.1] is a ~7 sigma window
    inc = sample_brownian(1, 10_000, 1e-3).increments
    assert 0.9e-3 <= np.var(inc, ddof=1) <= 1.1e-3
    assert abs(inc.mean()) < 5 * np.sqrt(1e-3 / 10_000)


def test_values_are_cumulative_sums():
    path = sample_brownian(3, 8, 0.25)
    np.testing.assert_allclose(np.diff(path.values()), path.increments)
    assert path.horizon == pytest.approx(2.0)


def test_coarsen_nests_fine_path():
    fine = sample_brownian(4, 64, 1 / 64)
    coarse = fine.coarsen(4)
    assert coarse.dt == pytest.approx(1 / 16)
    np.testing.assert_allclose(coarse.values(), fine.values()[::4], atol=1e-14)
    with pytest.raises(ValueError):
        fine.coarsen(3)


def test_ensemble_streams_are_distinct_and_uncorrelated():
    seeds = [derive_seed(2024, i) for i in range(200)]
    assert len(set(seeds)) == 200
    X = np.stack([sample_brownian(s, 400, 1.0).increments for s in seeds])
    corr = np.corrcoef(X)
    off = corr[~np.eye(len(X), dtype=bool)]
    # sd of a null sample correlation is 1/sqrt(400) = 0.05
    assert np.max(np.abs(off)) < 6 * 0.05
    assert abs(off.mean()) < 0.01


def test_ito_forcing_examples():
    m = Mesh(1, 3)
    assert not np.any(ito_forcing(make_noise("const:0.7"), 0.0, 0.0, m))
    np.testing.assert_allclose(ito_forcing(make_noise("const:1"), 0.5, 0.3, m), [0.3, 0.3, 0.3])
    np.testing.assert_allclose(
        ito_forcing(make_noise("space:sin"), 0.9, 2.0, m),
        [2 * np.sin(np.pi / 4), 2.0, 2 * np.sin(3 * np.pi / 4)],
        atol=1e-15,
    )


def test_registry_bounds_hold():
    m = Mesh(2, 9)
    for name in ["zero", "const:-0.4", "sinprod:1.5", "space:sin", "space:bump"]:
        phi = make_noise(name)
        for t in np.linspace(0, 1, 7):
            assert np.all(np.abs(phi.at_nodes(t, m)) <= phi.bound + 1e-15)
    assert make_noise("sinprod:1").time_dependent
    assert not make_noise("space:bump").time_dependent
    assert make_noise("zero").is_zero


@pytest.mark.parametrize("name", ["", "const", "const:x", "space:nope", "gauss"])
def test_registry_rejects_unknown(name):
    with pytest.raises(ValueError):
        make_noise(name)
