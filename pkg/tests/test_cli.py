import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from renorm_plap.cli import ExperimentConfig, build_config, load_config_entries, main, parse_config_text
from renorm_plap.errors import ConfigError
from renorm_plap.stepper import read_trajectory_states


def write(path, text):
    path.write_text(text)
    return str(path)


def run_cli(tmp_path, command, text, out="out", extra=()):
    cfg = write(tmp_path / f"{command}.cfg", text)
    return main([command, "--config", cfg, "--out", str(tmp_path / out), *extra])


def test_simulate_zero(tmp_path):
    rc = run_cli(tmp_path, "simulate", "noise = zero\ninitial = zero\nT = 1/8\ndt = 1/32\nn = 5\n")
    assert rc == 0
    times, states = read_trajectory_states(tmp_path / "out" / "trajectory.csv")
    assert states.shape == (5, 5) and not np.any(states)
    np.testing.assert_allclose(times, np.arange(5) / 32)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["noise"] == "zero"
    assert set(manifest["files"]) == {"trajectory.csv", "trajectory.meta.json"}


def _tree(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_rerun_and_manifest_rerun_are_byte_identical(tmp_path):
    text = "n = 7\nT = 1/4\ndt = 1/16\np = 3\nnoise = space:bump\n"
    assert run_cli(tmp_path, "simulate", text, "a", ["--seed", "42"]) == 0
    assert run_cli(tmp_path, "simulate", text, "b", ["--seed", "42"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    assert main(["simulate", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "c")]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "c")
    assert run_cli(tmp_path, "simulate", text, "d", ["--seed", "43"]) == 0
    assert _tree(tmp_path / "a")["trajectory.csv"] != _tree(tmp_path / "d")["trajectory.csv"]


def test_verify_renorm_ladder(tmp_path):
    assert run_cli(tmp_path, "verify-renorm", "T = 0.25\ntest_functions = one\n") == 0
    with open(tmp_path / "out" / "residuals.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["level"] for r in rows] == ["0", "1", "2"]
    res = [float(r["residual"]) for r in rows]
    assert res[0] > res[1] > res[2]
    assert [float(r["h"]) for r in rows] == [1 / 32, 1 / 64, 1 / 128]
    assert [float(r["dt"]) for r in rows] == [1 / 64, 1 / 256, 1 / 1024]


def test_other_commands_run(tmp_path):
    assert run_cli(tmp_path, "verify-product", "family = tssigma:1:1\n", "p") == 0
    assert run_cli(tmp_path, "verify-energy", "T = 1/4\ndt = 1/64\ninitial = eigenmode:6\nensemble = 8\n", "e") == 0
    assert run_cli(tmp_path, "markov", "n = 7\nT = 1/2\ndt = 1/16\nensemble = 8\n", "m") == 0
    assert run_cli(tmp_path, "regularizer", "n = 127\ninitial = eigenmode:1\n", "r") == 0
    for sub, name in [("p", "residuals.csv"), ("e", "dissipation.csv"), ("m", "campaign.csv"), ("r", "regularizer.csv")]:
        assert (tmp_path / sub / name).exists() and (tmp_path / sub / "manifest.json").exists()


def test_failed_checks_exit_nonzero(tmp_path, capsys):
    # a point mass is not smooth, so the discrepancy does not shrink
    assert run_cli(tmp_path, "regularizer", "n = 255\ninitial = spike:1\n") == 1
    assert "FAILED discrepancy_decrease_L1" in capsys.readouterr().err


def test_solver_error_exit(tmp_path, capsys):
    assert run_cli(tmp_path, "simulate", "newton_tol = 1e-300\ninitial = random:1\nT = 1/64\n") == 3
    assert "step 0" in capsys.readouterr().err


@pytest.mark.parametrize(
    "text,key",
    [
        ("bogus = 1\n", "bogus"),
        ("dt = -0.1\n", "dt"),
        ("T = 0.3\ndt = 1/64\n", "T"),
        ("p = 1.5\n", "eps"),
        ("noise = white\n", "noise"),
        ("initial = gaussian\n", "initial"),
        ("family = tk\n", "family"),
        ("n = many\n", "n"),
        ("dim = 3\n", "dim"),
        ("ensemble = 1\n", "ensemble"),
        ("levels = 4,x\n", "levels"),
        ("command = markov\n", "command"),
        ("seed = 1\nseed = 2\n", "seed"),
    ],
)
def test_config_errors_name_the_key(tmp_path, capsys, text, key):
    assert run_cli(tmp_path, "simulate", text) == 2
    err = capsys.readouterr().err
    assert f"{key}:" in err
    assert not (tmp_path / "out").exists()


def test_unresolvable_regularizer_level(tmp_path, capsys):
    assert run_cli(tmp_path, "regularizer", "n = 3\nlevels = 4,8\n") == 2
    assert "levels:" in capsys.readouterr().err


def test_config_parsing():
    entries = parse_config_text("# comment\n dt = 1/64   # trailing\nn=7\n")
    cfg = build_config(entries, "simulate")
    assert cfg.dt == 1 / 64 and cfg.n == 7 and cfg.command == "simulate"
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign\n")
    with pytest.raises(ConfigError):
        build_config({})


def test_manifest_config_round_trip(tmp_path):
    cfg = ExperimentConfig("markov", n=9, dt=1 / 32, T=0.5, p=3.0, seed=5)
    path = tmp_path / "manifest.json"
    echo = cfg.as_text()
    path.write_text(json.dumps({"config": echo}))
    again = build_config(load_config_entries(path))
    assert again == cfg
    path.write_text(json.dumps({"config": {**echo, "extra": "1"}}))
    with pytest.raises(ConfigError):
        load_config_entries(path)


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path / "c.cfg", "noise = zero\nT = 1/16\ndt = 1/16\nn = 3\n")
    out = subprocess.run(
        [sys.executable, "-m", "renorm_plap", "simulate", "--config", cfg, "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert out.returncode == 0, out.stderr
    assert "content hash" in out.stdout
