"""Batch experiment runner.

Usage::

    renorm-plap <command> --config <path> [--seed <u64>] [--out <dir>]

The config is a plain ``key = value`` file (``#`` starts a comment) whose keys
are the fields of :class:`ExperimentConfig`; a ``manifest.json`` written by an
earlier run is accepted as well, which reruns that campaign exactly.

Exit status: 0 when every check passes, 1 when some check fails (the failures
are listed on stderr), 2 for a bad config, 3 for a solver failure and 4 for
I/O errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, OffGrid, SolverError
from .grid import Mesh, discrete_gradient, norm_lq
from .initial import make_initial
from .markov import (
    CampaignRow,
    Model,
    chapman_kolmogorov_check,
    contraction_check,
    e_property_check,
    feller_check,
    flow_check,
    homogeneity_check,
    make_observable,
    sample_seed,
    write_campaign,
)
from .noise import make_noise, sample_brownian
from .plap import PlapParams
from .regularizer import apply_pi_n, build_cutoff, pi_n_convergence_report, write_report
from .stepper import SolverOptions, solve_path, step_index, write_trajectory
from .truncation import make_family
from .verifier import (
    dissipation_profile,
    ito_product_residual,
    make_test_function,
    renorm_residual,
    truncation_energy,
    write_reports,
)

COMMANDS = ("simulate", "verify-renorm", "verify-product", "verify-energy", "markov", "regularizer")
LADDER_LEVELS = 3


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    dim: int = 1
    n: int = 31
    T: float = 0.25
    dt: float = 1 / 64
    r: float = 0.0
    p: float = 2.0
    eps: float = 0.0
    noise: str = "const:0.2"
    seed: int = 0
    initial: str = "eigenmode:3"
    family: str = "compact_s:1:3"
    z_family: str = "tilde_tk:1"
    test_functions: str = "one,sin"
    observable: str = "clipped_l1"
    ensemble: int = 64
    levels: str = "4,8,16"
    newton_tol: float = 1e-10
    out: str = "out"

    @property
    def mesh(self) -> Mesh:
        return Mesh(self.dim, self.n)

    @property
    def params(self) -> PlapParams:
        return PlapParams(self.p, self.eps)

    @property
    def opts(self) -> SolverOptions:
        return SolverOptions(newton_tol=self.newton_tol)

    def as_text(self) -> dict[str, str]:
        """Field values as the strings a config file would carry."""
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out[f.name] = repr(val) if isinstance(val, float) else str(val)
        return out


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            # fractions such as 1/64 are exact
            return float(Fraction(raw)) if "/" in raw else float(raw)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{key}: unknown config key")
        if key in entries:
            raise ConfigError(f"{key}: given twice")
        entries[key] = value.strip()
    return entries


def load_config_entries(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    if path.suffix == ".json":
        try:
            manifest = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {path} is not valid JSON ({exc.msg})") from None
        if not isinstance(manifest, dict) or not isinstance(manifest.get("config"), dict):
            raise ConfigError("config: manifest has no 'config' table")
        entries = {str(k): str(v) for k, v in manifest["config"].items()}
        for key in entries:
            if key not in FIELD_TYPES:
                raise ConfigError(f"{key}: unknown config key")
        return entries
    return parse_config_text(text)


def build_config(entries: dict[str, str], command: str | None = None, **overrides) -> ExperimentConfig:
    """Assemble and validate a config; ``overrides`` win over ``entries``."""
    entries = dict(entries)
    if command is not None:
        if "command" in entries and entries["command"] != command:
            raise ConfigError(f"command: config says {entries['command']!r} but {command!r} was requested")
        entries["command"] = command
    if "command" not in entries:
        raise ConfigError("command: missing")
    values = {k: _convert(k, v) for k, v in entries.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def _registry(key: str, fn, *args):
    try:
        return fn(*args)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _on_grid(key: str, t: float, dt: float):
    try:
        step_index(t, dt)
    except OffGrid:
        raise ConfigError(f"{key}: {t!r} is not a multiple of dt={dt!r}") from None


def validate(cfg: ExperimentConfig) -> None:
    """Check every field before any computation starts."""
    _require(cfg.command in COMMANDS, "command", f"must be one of {', '.join(COMMANDS)}")
    _require(cfg.dim in (1, 2), "dim", "must be 1 or 2")
    _require(cfg.n >= 1, "n", "must be >= 1")
    _require(math.isfinite(cfg.T) and cfg.T >= 0, "T", "must be finite and >= 0")
    _require(math.isfinite(cfg.dt) and cfg.dt > 0, "dt", "must be > 0")
    _require(0 <= cfg.r <= cfg.T, "r", "must lie in [0, T]")
    _on_grid("T", cfg.T, cfg.dt)
    _on_grid("r", cfg.r, cfg.dt)
    _require(cfg.p > 1, "p", "must be > 1")
    _require(math.isfinite(cfg.eps) and cfg.eps >= 0, "eps", "must be >= 0")
    _require(not cfg.params.singular, "eps", "p < 2 needs eps > 0 for time stepping")
    _require(cfg.newton_tol > 0, "newton_tol", "must be > 0")
    _require(0 <= cfg.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
    _require(cfg.ensemble >= 2, "ensemble", "must be >= 2")
    _require(bool(cfg.out), "out", "must not be empty")
    _registry("noise", make_noise, cfg.noise)
    _registry("initial", make_initial, cfg.initial, cfg.mesh, cfg.seed)
    _registry("family", make_family, cfg.family)
    _registry("z_family", make_family, cfg.z_family)
    for name in _split(cfg.test_functions):
        _registry("test_functions", make_test_function, name)
    _registry("observable", make_observable, cfg.observable)
    levels = _levels(cfg)
    _require(all(b > a for a, b in zip(levels, levels[1:])), "levels", "must be increasing")
    if cfg.command == "regularizer":
        _require(all(1 / lv >= cfg.mesh.h for lv in levels), "levels", "finest level is not resolved by the mesh")
    if cfg.command in ("verify-renorm", "verify-product"):
        _require(cfg.T > 0, "T", "the refinement ladder needs T > 0")
    if cfg.command == "markov":
        _require(step_index(cfg.T, cfg.dt) - step_index(cfg.r, cfg.dt) >= 2, "T", "markov needs at least two steps after r")
        _require(not make_noise(cfg.noise).time_dependent, "noise", "markov homogeneity needs a time-independent field")


def _split(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _levels(cfg: ExperimentConfig) -> list[int]:
    try:
        levels = [int(s) for s in _split(cfg.levels)]
    except ValueError:
        raise ConfigError(f"levels: expected comma-separated integers, got {cfg.levels!r}") from None
    _require(bool(levels) and min(levels) >= 2, "levels", "need at least one level, each >= 2")
    return levels


# --- campaigns -----------------------------------------------------------------


@dataclass
class RunResult:
    files: list[str]
    checks: list[CampaignRow]

    @property
    def failed(self) -> list[CampaignRow]:
        return [c for c in self.checks if not c.passed]


def _ladder(cfg: ExperimentConfig):
    """Levels (mesh, path) with h halving and dt quartering; paths nest."""
    factor = 4 ** (LADDER_LEVELS - 1)
    fine_dt = cfg.dt / factor
    fine = sample_brownian(sample_seed(cfg.seed, 0), step_index(cfg.T, cfg.dt) * factor, fine_dt)
    out = []
    for j in range(LADDER_LEVELS):
        n = (cfg.n + 1) * 2**j - 1
        out.append((Mesh(cfg.dim, n), fine.coarsen(4 ** (LADDER_LEVELS - 1 - j))))
    return out


def _initial(cfg: ExperimentConfig, mesh: Mesh) -> np.ndarray:
    """The configured datum on ``mesh``; eigenmode/step data are grid independent."""
    return make_initial(cfg.initial, mesh, cfg.seed)


def _decreasing_check(name: str, values: list[float], params: str) -> CampaignRow:
    ok = all(b < a for a, b in zip(values, values[1:]))
    ratio = max((b / a if a > 0 else math.inf) for a, b in zip(values, values[1:])) if len(values) > 1 else 0.0
    return CampaignRow(name, params, float(ratio), 1.0, ok)


def run_simulate(cfg: ExperimentConfig, out: Path) -> RunResult:
    mesh = cfg.mesh
    phi = make_noise(cfg.noise)
    path = sample_brownian(sample_seed(cfg.seed, 0), step_index(cfg.T, cfg.dt), cfg.dt)
    traj = solve_path(mesh, _initial(cfg, mesh), cfg.r, cfg.T, path, phi, cfg.params, cfg.opts)
    write_trajectory(traj, out / "trajectory.csv", {"initial": cfg.initial, "master_seed": cfg.seed})
    finite = bool(np.all(np.isfinite(traj.states)))
    return RunResult(["trajectory.csv", "trajectory.meta.json"], [CampaignRow("finite_states", "", float(finite), 1.0, finite)])


def run_verify_renorm(cfg: ExperimentConfig, out: Path) -> RunResult:
    S = make_family(cfg.family)
    phi = make_noise(cfg.noise)
    psis = [make_test_function(name) for name in _split(cfg.test_functions)]
    reports, extra = [], []
    by_psi: dict[str, list[float]] = {psi.name: [] for psi in psis}
    for level, (mesh, path) in enumerate(_ladder(cfg)):
        traj = solve_path(mesh, _initial(cfg, mesh), 0.0, cfg.T, path, phi, cfg.params, cfg.opts)
        for psi in psis:
            rep = renorm_residual(traj, S, psi, cfg.T)
            reports.append(rep)
            extra.append({"level": level, "psi": psi.name})
            by_psi[psi.name].append(rep.residual)
    write_reports(reports, out / "residuals.csv", extra)
    checks = [_decreasing_check("renorm_ladder_decrease", v, f"S={S.label};psi={k}") for k, v in by_psi.items()]
    return RunResult(["residuals.csv"], checks)


def run_verify_product(cfg: ExperimentConfig, out: Path) -> RunResult:
    H, Z = make_family(cfg.family), make_family(cfg.z_family)
    phi = make_noise(cfg.noise)
    reports, extra, values = [], [], []
    for level, (mesh, path) in enumerate(_ladder(cfg)):
        u0 = _initial(cfg, mesh)
        tu = solve_path(mesh, u0, 0.0, cfg.T, path, phi, cfg.params, cfg.opts)
        tv = solve_path(mesh, 0.5 * u0, 0.0, cfg.T, path, phi, cfg.params, cfg.opts)
        rep = ito_product_residual(tu, tv, H, Z, cfg.T)
        reports.append(rep)
        extra.append({"level": level})
        values.append(rep.residual)
    write_reports(reports, out / "residuals.csv", extra)
    return RunResult(["residuals.csv"], [_decreasing_check("product_ladder_decrease", values, f"H={H.label};Z={Z.label}")])


def energy_checks(rows, sup: float) -> list[CampaignRow]:
    """Nonnegativity, exact zero tail above ``sup`` and decay over the last
    three nonzero bands of a dissipation profile."""
    values = [r.value for r in rows]
    tail = [r.value for r in rows if r.k >= sup]
    nonzero = [v for v in values if v > 0]
    last = nonzero[-3:]
    return [
        CampaignRow("dissipation_nonnegative", "", float(min(values)), 0.0, min(values) >= 0),
        CampaignRow("dissipation_zero_tail", f"sup={sup!r}", float(max(tail, default=0.0)), 0.0, all(v == 0 for v in tail)),
        CampaignRow(
            "dissipation_tail_nonincreasing",
            "last three nonzero bands",
            float(len(last)),
            3.0,
            len(last) == 3 and all(b <= a for a, b in zip(last, last[1:])),
        ),
    ]


def run_verify_energy(cfg: ExperimentConfig, out: Path) -> RunResult:
    mesh, phi = cfg.mesh, make_noise(cfg.noise)
    u0 = _initial(cfg, mesh)
    n_steps = step_index(cfg.T, cfg.dt)
    ensemble = [
        solve_path(mesh, u0, cfg.r, cfg.T, sample_brownian(sample_seed(cfg.seed, i), n_steps, cfg.dt), phi, cfg.params, cfg.opts)
        for i in range(cfg.ensemble)
    ]
    sup = max(float(np.max(np.abs(tr.states))) for tr in ensemble)
    ks = list(range(int(math.floor(sup)) + 2))
    rows = dissipation_profile(ensemble, ks)
    with open(out / "dissipation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "value", "std_error"])
        for row in rows:
            w.writerow([repr(row.k), repr(row.value), repr(row.std_error)])
    with open(out / "truncation_energy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "energy", "std_error", "bound", "identity_rhs", "n_samples"])
        for k in ks[1:]:
            te = truncation_energy(ensemble, k)
            w.writerow([repr(float(k)), repr(te.energy), repr(te.std_error), repr(te.bound), repr(te.identity_rhs), te.n_samples])
    return RunResult(["dissipation.csv", "truncation_energy.csv"], energy_checks(rows, sup))


def run_markov(cfg: ExperimentConfig, out: Path) -> RunResult:
    mesh, phi = cfg.mesh, make_noise(cfg.noise)
    model = Model(mesh, cfg.params, phi, cfg.dt, cfg.opts)
    obs = make_observable(cfg.observable)
    x = _initial(cfg, mesh)
    tol = model.tolerance
    rng = np.random.Generator(np.random.PCG64(sample_seed(cfg.seed, 99)))
    r_step, t_step = step_index(cfg.r, cfg.dt), step_index(cfg.T, cfg.dt)
    s = (r_step + (t_step - r_step) // 2) * cfg.dt
    rows: list[CampaignRow] = []
    tag = f"p={cfg.p!r};n={cfg.n};dim={cfg.dim}"

    path = model.path(sample_seed(cfg.seed, 10), cfg.T)
    for i in range(4):
        u0, v0 = rng.standard_normal((2, mesh.n_nodes))
        val = contraction_check(model, u0, v0, path)
        rows.append(CampaignRow("contraction", f"{tag};pair={i}", val, tol, val <= tol))
    for i in range(4):
        a, b, c = np.sort(rng.integers(r_step, t_step + 1, size=3))
        val = flow_check(model, x, a * cfg.dt, b * cfg.dt, c * cfg.dt, path)
        rows.append(CampaignRow("flow", f"{tag};steps={a},{b},{c}", val, tol, val <= tol))

    m = cfg.ensemble
    ck = chapman_kolmogorov_check(model, obs, x, cfg.r, s, cfg.T, m, m, sample_seed(cfg.seed, 11))
    rows.append(CampaignRow("chapman_kolmogorov", f"{tag};outer={m};inner={m}", ck.gap, 4 * ck.combined_se, ck.within(4)))
    shift = s - cfg.r
    hg = homogeneity_check(model, obs, x, shift, cfg.T, m * m, sample_seed(cfg.seed, 12))
    rows.append(CampaignRow("homogeneity", f"{tag};shift={shift!r};samples={m * m}", hg.gap, 4 * hg.combined_se, hg.within(4)))

    z = x + 0.25 * rng.standard_normal(mesh.n_nodes)
    ex = e_property_check(model, obs, x, z, cfg.r, cfg.T, m, sample_seed(cfg.seed, 13))
    rows.append(CampaignRow("e_property", f"{tag};obs={obs.label}", ex, tol, ex <= tol))
    gaps = feller_check(model, obs, x, rng.standard_normal(mesh.n_nodes), 4, cfg.r, cfg.T, m, sample_seed(cfg.seed, 14))
    ok = all(b <= a + tol for a, b in zip(gaps, gaps[1:]))
    rows.append(CampaignRow("feller", f"{tag};gaps={';'.join(repr(g) for g in gaps)}", gaps[-1], gaps[0], ok))
    write_campaign(rows, out / "campaign.csv")
    return RunResult(["campaign.csv"], rows)


def run_regularizer(cfg: ExperimentConfig, out: Path) -> RunResult:
    mesh = cfg.mesh
    v = _initial(cfg, mesh)
    levels = _levels(cfg)
    report = pi_n_convergence_report(v, mesh, levels, qs=(1, 2))
    write_report(report, out / "regularizer.csv")
    checks = []
    for q in ("1", "2"):
        vals = [row.discrepancy for row in report if row.q == q]
        checks.append(_decreasing_check(f"discrepancy_decrease_L{q}", vals, cfg.initial))
    for n in levels:
        pv = apply_pi_n(v, n, mesh)
        for q in (1, 2):
            lhs, rhs = norm_lq(mesh, pv, q), norm_lq(mesh, v, q)
            checks.append(CampaignRow(f"norm_bound_L{q}", f"n={n}", lhs, rhs, lhs <= rhs * (1 + 1e-12)))
        slope = _cutoff_slope(build_cutoff(n, mesh).values, mesh)
        checks.append(CampaignRow("cutoff_slope", f"n={n}", slope, 2.0 * n, slope <= 2.0 * n))
    return RunResult(["regularizer.csv"], checks)


def _cutoff_slope(values: np.ndarray, mesh: Mesh) -> float:
    return float(np.max(np.abs(discrete_gradient(mesh, values)), initial=0.0))


RUNNERS = {
    "simulate": run_simulate,
    "verify-renorm": run_verify_renorm,
    "verify-product": run_verify_product,
    "verify-energy": run_verify_energy,
    "markov": run_markov,
    "regularizer": run_regularizer,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: ExperimentConfig, out: Path, result: RunResult) -> dict:
    """Config echo, per-file digests and a combined content hash."""
    files = {name: _sha256(out / name) for name in sorted(result.files)}
    digest = hashlib.sha256("".join(f"{h}  {n}\n" for n, h in files.items()).encode()).hexdigest()
    echo = cfg.as_text()
    del echo["out"]
    manifest = {
        "command": cfg.command,
        "seed": cfg.seed,
        "config": echo,
        "files": files,
        "content_hash": digest,
        "checks": [{"check": c.check, "params": c.params, "passed": c.passed} for c in result.checks],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run(cfg: ExperimentConfig) -> tuple[RunResult, dict]:
    """Execute the campaign named by ``cfg.command`` and write its artifacts."""
    validate(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = RUNNERS[cfg.command](cfg, out)
    manifest = write_manifest(cfg, out, result)
    return result, manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="renorm-plap", description="Stochastic p-Laplace experiment runner.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="key = value config file or a manifest.json")
    ap.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    ap.add_argument("--out", default=None, help="output directory (overrides the config)")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(load_config_entries(args.config), args.command, seed=args.seed, out=args.out)
        result, manifest = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    print(f"{cfg.command}: wrote {len(result.files)} file(s) to {cfg.out}, content hash {manifest['content_hash']}")
    if result.failed:
        for row in result.failed:
            print(f"FAILED {row.check} [{row.params}] value={row.value!r} threshold={row.threshold!r}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
