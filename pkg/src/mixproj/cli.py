"""Batch experiment runner.

Verbs:

* ``run <config.yaml> -o <dir>``: execute the requested engines on a shared
  data realization and write one CSV per engine plus ``summary.csv``.
* ``compare <dir>``: tabulate pairwise moment discrepancies from a run
  directory.
* ``metrics --family gaussian --coords canonical|expectation``: print the
  closed-form Gaussian metric matrices next to their quadrature checks.

Scenario files are versioned YAML; all defaults are materialized at parse
time so a parsed scenario serializes back to an equivalent file.  Exit
codes: 0 success, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import geometry, oracles
from .continuous_filter import (
    PathBundle,
    run_continuous_filter,
    simulate_truth_and_observations,
)
from .discrete_filter import (
    PredictionGenerator,
    assemble_prediction_generator,
    run_discrete_filter,
)
from .dynamics import (
    preset_continuous_obs,
    preset_discrete_obs,
    preset_model,
)
from .errors import AlignmentError, DomainError, MixProjError, ValidationError
from .families import MixtureCoords, gaussian_mixture_family, mixture_density
from .geometry import fisher_metric, l2_metric
from .quad import QuadratureSpec, UniformGrid
from .seeding import make_rng

__all__ = ["Scenario", "RunReport", "parse_scenario", "serialize_scenario", "run", "compare", "main"]

ENGINES = ("mpf", "galerkin", "particle", "grid", "kalman")
CSV_COLUMNS = ("t", "engine", "mean", "variance", "l2_residual_drift", "ess", "events")
OUTDIR_ENV = "MIXPROJ_OUTDIR"
SCHEMA_VERSION = 1


@dataclass
class Scenario:
    """Fully-defaulted experiment description (plain data, YAML-equivalent)."""

    name: str = "scenario"
    schema_version: int = SCHEMA_VERSION
    model: dict = field(default_factory=lambda: {"preset": "linear-ou", "alpha": 1.0, "sigma": 1.0})
    observation: dict = field(
        default_factory=lambda: {
            "mode": "discrete",
            "noise_var": 1.0,
            "schedule": {"start": 0.1, "step": 0.1, "count": 10},
            "dt": 1e-3,
            "horizon": 1.0,
        }
    )
    basis: dict = field(
        default_factory=lambda: {"means": [-1.0, 1.0], "variances": [1.0, 1.0]}
    )
    theta0: list = field(default_factory=lambda: [0.5])
    initial_state: dict = field(default_factory=lambda: {"mean": 0.0, "var": 0.25})
    quadrature: dict = field(
        default_factory=lambda: {"kind": "uniform-grid", "nodes": 2001, "atol": 1e-9}
    )
    integrator: dict = field(default_factory=lambda: {"method": "exact", "delta_factor": 1e-3})
    seeds: list = field(default_factory=lambda: [0])
    engines: list = field(default_factory=lambda: ["mpf"])
    particles: int = 2000
    grid: dict = field(
        default_factory=lambda: {"nodes": 1201, "half_width": 10.0, "scheme": "crank-nicolson"}
    )

    # -- derived builders -------------------------------------------------

    def qspec(self) -> QuadratureSpec:
        q = self.quadrature
        return QuadratureSpec(kind=q["kind"], nodes=int(q["nodes"]), atol=float(q["atol"]))

    def build_model(self):
        return preset_model(
            self.model["preset"], alpha=self.model.get("alpha", 1.0), sigma=self.model.get("sigma", 1.0)
        )

    def model_is_linear(self) -> bool:
        return self.model["preset"] in ("linear-ou", "cubic-sensor") or False

    def drift_slope(self) -> float:
        return -float(self.model.get("alpha", 1.0))

    def diffusion_squared(self) -> float:
        return float(self.model.get("sigma", 1.0)) ** 2

    def observation_times(self) -> np.ndarray:
        sched = self.observation.get("schedule")
        if "times" in self.observation:
            return np.asarray(self.observation["times"], dtype=float)
        return sched["start"] + sched["step"] * np.arange(sched["count"])

    def build_family(self):
        return gaussian_mixture_family(self.basis["means"], self.basis["variances"], self.qspec())

    def theta_init(self) -> MixtureCoords:
        return MixtureCoords(np.asarray(self.theta0, dtype=float))

    def initial_sampler(self):
        return oracles.gaussian_sampler(self.initial_state["mean"], self.initial_state["var"])

    def build_grid(self) -> UniformGrid:
        g = self.grid
        return UniformGrid(-float(g["half_width"]), float(g["half_width"]), int(g["nodes"]))


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ValidationError(f"{path}: {message}")


def _validate(s: Scenario) -> Scenario:
    _require(s.schema_version == SCHEMA_VERSION, "schema_version", f"must be {SCHEMA_VERSION}")
    _require(
        s.model.get("preset") in ("linear-ou", "bimodal-drift", "cubic-sensor"),
        "model.preset",
        "unknown preset",
    )
    mode = s.observation.get("mode")
    _require(mode in ("discrete", "continuous"), "observation.mode", "must be discrete|continuous")
    means, variances = s.basis.get("means"), s.basis.get("variances")
    _require(isinstance(means, list) and isinstance(variances, list), "basis", "means/variances lists required")
    _require(len(means) == len(variances), "basis", "means and variances must match in length")
    _require(len(means) >= 2, "basis", "need at least two components")
    _require(all(v > 0 for v in variances), "basis.variances", "must be positive")
    _require(
        len(s.theta0) == len(means) - 1,
        "theta0",
        f"basis of size {len(means)} needs exactly m={len(means) - 1} coordinates",
    )
    theta = np.asarray(s.theta0, dtype=float)
    _require(bool(np.all(theta >= 0) and theta.sum() < 1.0), "theta0", "must lie in the open simplex")
    _require(s.initial_state.get("var", 0) > 0, "initial_state.var", "must be positive")
    stochastic = {"particle"} | ({"mpf", "galerkin", "grid"} if mode == "continuous" else set())
    _require(
        not (stochastic & set(s.engines)) or len(s.seeds) > 0,
        "seeds",
        "stochastic engines need at least one seed",
    )
    for e in s.engines:
        _require(e in ENGINES, "engines", f"unknown engine {e!r}")
    _require(len(s.engines) > 0, "engines", "at least one engine required")
    if mode == "discrete":
        times = s.observation_times()
        _require(times.size > 0, "observation.schedule", "schedule is empty")
        _require(bool(np.all(np.diff(times) > 0)), "observation.times", "must be strictly increasing")
        horizon = s.observation.get("horizon", float(times[-1]))
        _require(times[-1] <= horizon + 1e-12, "observation.schedule", "schedule exceeds the horizon")
    else:
        _require(s.observation.get("dt", 0) > 0, "observation.dt", "must be positive")
        _require(s.observation.get("horizon", 0) > 0, "observation.horizon", "must be positive")
    _require(s.particles >= 100, "particles", "need at least 100")
    return s


def parse_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such scenario file")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: parse error: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: scenario must be a mapping")
    s = Scenario()
    for key, value in raw.items():
        if not hasattr(s, key):
            raise ValidationError(f"{key}: unknown scenario field")
        if isinstance(getattr(s, key), dict) and isinstance(value, dict):
            merged = dict(getattr(s, key))
            merged.update(value)
            setattr(s, key, merged)
        else:
            setattr(s, key, value)
    return _validate(s)


def serialize_scenario(s: Scenario) -> str:
    return yaml.safe_dump(asdict(s), sort_keys=True)


@dataclass
class EngineResult:
    name: str
    status: str = "ok"
    error: str = ""
    times: np.ndarray | None = None
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    residual_drift: np.ndarray | None = None
    ess: np.ndarray | None = None
    event_counts: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    densities: list | None = None          # (x, values) pairs when available


@dataclass
class RunReport:
    scenario: Scenario
    engines: dict[str, EngineResult] = field(default_factory=dict)

    def ok(self, name: str) -> bool:
        return name in self.engines and self.engines[name].status == "ok"


def _simulate_discrete_data(s: Scenario, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Truth states at observation times and noisy observations, shared by engines."""
    model = s.build_model()
    obs = preset_discrete_obs(
        s.model["preset"], times=s.observation_times(), noise_var=s.observation["noise_var"]
    )
    rng0 = make_rng(seed, "path", "init")
    x = float(s.initial_state["mean"] + np.sqrt(s.initial_state["var"]) * rng0.standard_normal())
    t = 0.0
    xs, zs = [], []
    substeps = 20
    for n, tn in enumerate(obs.times):
        if tn > t:
            dt = (tn - t) / substeps
            for j in range(substeps):
                rng = make_rng(seed, "path", n, j)
                state = np.array([x])
                f = float(np.asarray(model.drift(t, state))[0])
                sg = float(np.asarray(model.diffusion(t, state))[0])
                x = x + f * dt + sg * np.sqrt(model.noise_cov(t) * dt) * rng.standard_normal()
                t += dt
        zn = float(np.asarray(obs.h(np.array([x])))[0]) + np.sqrt(obs.noise_var) * make_rng(
            seed, "obs", n
        ).standard_normal()
        xs.append(x)
        zs.append(zn)
        t = tn
    return np.asarray(xs), np.asarray(zs)


def _galerkin_assemble(fam, model, t, spec=None):
    return PredictionGenerator(
        b_matrix=oracles.galerkin_prediction_generator(fam, model, t, spec), time=t
    )


def _run_engine_discrete(s: Scenario, name: str, seed: int, zs: np.ndarray) -> EngineResult:
    model = s.build_model()
    obs = preset_discrete_obs(
        s.model["preset"], times=s.observation_times(), noise_var=s.observation["noise_var"]
    )
    res = EngineResult(name=name)
    start = time.perf_counter()
    if name in ("mpf", "galerkin"):
        assemble = assemble_prediction_generator if name == "mpf" else _galerkin_assemble
        traj = run_discrete_filter(
            s.build_family(),
            s.theta_init(),
            model,
            obs,
            zs,
            method=s.integrator["method"],
            assemble=assemble,
        )
        res.times, res.means, res.variances = traj.times, traj.means, traj.variances
        res.residual_drift = traj.residual_drift
        res.event_counts = traj.event_counts()
        res.densities = [
            (fam, th) for fam, th in zip(traj.families, traj.thetas)
        ]
    elif name == "particle":
        out = oracles.particle_filter_discrete(
            model, obs, zs, s.initial_sampler(), s.particles, seed
        )
        res.times, res.means, res.variances, res.ess = out.times, out.means, out.variances, out.ess
    elif name == "grid":
        grid = s.build_grid()
        p0 = oracles.GridDensity.from_field(
            mixture_density(s.build_family(), s.theta_init()), grid
        )
        times, densities = oracles.grid_discrete_filter(
            model, obs, zs, p0, dt=s.observation.get("dt", 1e-3), scheme=s.grid["scheme"]
        )
        moments = np.array([d.moments() for d in densities])
        res.times, res.means, res.variances = times, moments[:, 0], moments[:, 1]
        res.densities = [(d.grid.nodes, d.values) for d in densities]
    elif name == "kalman":
        if not s.model_is_linear():
            raise ValidationError("kalman: scenario model is not linear-Gaussian")
        out = oracles.kalman_discrete(
            s.drift_slope(),
            s.diffusion_squared(),
            s.initial_state["mean"],
            s.initial_state["var"],
            obs,
            zs,
        )
        res.times, res.means, res.variances = out.times, out.means, out.variances
    else:  # pragma: no cover
        raise ValidationError(f"unknown engine {name}")
    res.wall_clock = time.perf_counter() - start
    return res


def _run_engine_continuous(s: Scenario, name: str, seed: int, path: PathBundle) -> EngineResult:
    model = s.build_model()
    obs = preset_continuous_obs(s.model["preset"])
    res = EngineResult(name=name)
    start = time.perf_counter()
    record_every = max(int(round(0.01 / path.dt)), 1)
    if name == "mpf":
        traj = run_continuous_filter(
            s.build_family(), s.theta_init(), model, obs, path,
            record_every=record_every, record_residuals=True,
        )
        res.times, res.means, res.variances = traj.times, traj.means, traj.variances
        res.residual_drift = traj.residual_drift
        res.event_counts = traj.event_counts()
    elif name == "galerkin":
        out = oracles.run_galerkin_ito_filter(
            s.build_family(), s.theta_init(), model, obs, path, record_every=record_every
        )
        res.times, res.means, res.variances = out.times, out.means, out.variances
    elif name == "particle":
        out = oracles.particle_filter_continuous(
            model, obs, path, s.initial_sampler(), s.particles, seed
        )
        stride = slice(None, None, record_every)
        res.times, res.means = out.times[stride], out.means[stride]
        res.variances, res.ess = out.variances[stride], out.ess[stride]
    elif name == "grid":
        grid = s.build_grid()
        p0 = oracles.GridDensity.from_field(
            mixture_density(s.build_family(), s.theta_init()), grid
        )
        times, densities = oracles.grid_kushner_solve(
            model, obs, p0, path, scheme=s.grid["scheme"]
        )
        moments = np.array([d.moments() for d in densities])
        res.times = times[::record_every]
        res.means = moments[::record_every, 0]
        res.variances = moments[::record_every, 1]
    elif name == "kalman":
        if not s.model_is_linear():
            raise ValidationError("kalman: scenario model is not linear-Gaussian")
        out = oracles.kalman_bucy(
            s.drift_slope(),
            s.diffusion_squared(),
            obs,
            path,
            s.initial_state["mean"],
            s.initial_state["var"],
        )
        res.times, res.means = out.times[::record_every], out.means[::record_every]
        res.variances = out.variances[::record_every]
    else:  # pragma: no cover
        raise ValidationError(f"unknown engine {name}")
    res.wall_clock = time.perf_counter() - start
    return res


def run(scenario: Scenario, outdir: str | Path) -> RunReport:
    """Execute every requested engine on the first-seed realization.

    Per-engine CSVs hold the canonical (first seed) trajectories; engine
    failures are recorded in ``summary.csv`` and do not stop other engines.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    report = RunReport(scenario=scenario)
    seed = int(scenario.seeds[0]) if scenario.seeds else 0
    mode = scenario.observation["mode"]
    if mode == "discrete":
        _, zs = _simulate_discrete_data(scenario, seed)
        shared = zs
        runner = _run_engine_discrete
    else:
        model = scenario.build_model()
        obs = preset_continuous_obs(scenario.model["preset"])
        sampler = scenario.initial_sampler()
        shared = simulate_truth_and_observations(
            model,
            obs,
            scenario.observation["horizon"],
            scenario.observation["dt"],
            seed,
            x0=lambda rng: float(sampler(rng, 1)[0]),
        )
        runner = _run_engine_continuous
    for name in scenario.engines:
        try:
            report.engines[name] = runner(scenario, name, seed, shared)
        except MixProjError as exc:
            report.engines[name] = EngineResult(name=name, status="error", error=str(exc))
        _write_engine_csv(outdir / f"{name}.csv", report.engines[name])
    _write_summary(outdir / "summary.csv", report)
    (outdir / "run_info.json").write_text(
        json.dumps(
            {
                "scenario": scenario.name,
                "wall_clock": {n: e.wall_clock for n, e in report.engines.items()},
            },
            indent=2,
        )
    )
    (outdir / "scenario.yaml").write_text(serialize_scenario(scenario))
    return report


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return ""
    return f"{value:.17g}"


def _write_engine_csv(path: Path, res: EngineResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        if res.status != "ok" or res.times is None:
            return
        n = len(res.times)
        for i in range(n):
            writer.writerow(
                [
                    _fmt(res.times[i]),
                    res.name,
                    _fmt(res.means[i]),
                    _fmt(res.variances[i]),
                    _fmt(res.residual_drift[i]) if res.residual_drift is not None else "",
                    _fmt(res.ess[i]) if res.ess is not None else "",
                    str(sum(res.event_counts.values()) if i == n - 1 else 0),
                ]
            )


def _write_summary(path: Path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["engine", "status", "error", "rows", "final_mean", "final_variance", "events"])
        for name, res in report.engines.items():
            rows = len(res.times) if res.times is not None else 0
            writer.writerow(
                [
                    name,
                    res.status,
                    res.error,
                    rows,
                    _fmt(res.means[-1]) if res.status == "ok" and rows else "",
                    _fmt(res.variances[-1]) if res.status == "ok" and rows else "",
                    str(sum(res.event_counts.values())),
                ]
            )


def compare(report: RunReport, l2_spec: QuadratureSpec | None = None) -> list[dict]:
    """Pairwise discrepancy table over engines sharing time points."""
    names = [n for n in report.engines if report.ok(n)]
    if len(names) < 2:
        raise AlignmentError("need at least two successful engines to compare")
    rows = []
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            ra, rb = report.engines[a], report.engines[b]
            common, ia, ib = np.intersect1d(
                np.round(ra.times, 9), np.round(rb.times, 9), return_indices=True
            )
            if common.size == 0:
                raise AlignmentError(f"{a} and {b} share no time points")
            dmean = np.abs(ra.means[ia] - rb.means[ib])
            dvar = np.abs(ra.variances[ia] - rb.variances[ib])
            row = {
                "pair": f"{a}/{b}",
                "points": int(common.size),
                "max_mean_diff": float(dmean.max()),
                "avg_mean_diff": float(dmean.mean()),
                "max_var_diff": float(dvar.max()),
            }
            row.update(_density_distance(report, a, b, common))
            rows.append(row)
    return rows


def _density_distance(report: RunReport, a: str, b: str, common: np.ndarray) -> dict:
    # L2 density distance where both engines carry densities (mpf vs grid)
    pair = {"mpf", "grid"}
    if {a, b} != pair:
        return {}
    mpf = report.engines["mpf" if a == "mpf" else a]
    grid_res = report.engines["grid"]
    if not (mpf.densities and grid_res.densities):
        return {}
    spec = report.scenario.qspec()
    dists = []
    mpf_times = np.round(mpf.times, 9)
    grid_times = np.round(grid_res.times, 9)
    for t in common:
        i = int(np.flatnonzero(mpf_times == t)[0])
        j = int(np.flatnonzero(grid_times == t)[0])
        fam, theta = mpf.densities[i]
        density = mixture_density(fam, theta)
        x, values = grid_res.densities[j]
        interp = np.interp
        from .quad import ScalarField, SupportHint

        gfield = ScalarField(
            fn=lambda xx, x=x, values=values: interp(xx, x, values, left=0.0, right=0.0),
            hint=density.hint,
        )
        dists.append(geometry.l2_distance(density, gfield, spec))
    return {"max_l2_density": float(np.max(dists)), "avg_l2_density": float(np.mean(dists))}


def _compare_from_dir(rundir: Path) -> list[dict]:
    engines = {}
    for f in sorted(rundir.glob("*.csv")):
        if f.name in ("summary.csv", "compare.csv"):
            continue
        with open(f) as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        if not rows:
            continue
        name = rows[0]["engine"]
        engines[name] = EngineResult(
            name=name,
            times=np.array([float(r["t"]) for r in rows]),
            means=np.array([float(r["mean"]) for r in rows]),
            variances=np.array([float(r["variance"]) for r in rows]),
        )
    report = RunReport(scenario=Scenario(), engines=engines)
    return compare(report)


def _metrics_table(coords: str, spec: QuadratureSpec) -> str:
    lines = []
    if coords == "canonical":
        theta = np.array([0.0, -0.5])
        fam = geometry.gaussian_family_canonical()
        closed_f = geometry.gaussian_fisher_canonical(theta)
        closed_h = geometry.gaussian_l2_canonical(theta)
        point = f"theta = {theta.tolist()}"
    else:
        theta = np.array([0.0, 1.0])
        fam = geometry.gaussian_family_expectation()
        closed_f = geometry.gaussian_fisher_expectation(*theta)
        closed_h = geometry.gaussian_l2_expectation(*theta)
        point = f"(mu, v) = {theta.tolist()}"
    quad_f = fisher_metric(fam, theta, spec)
    quad_h = l2_metric(fam, theta, spec)
    scale_f = np.abs(closed_f.values).max()
    scale_h = np.abs(closed_h.values).max()
    lines.append(f"Gaussian family, {coords} chart at {point}")
    lines.append(f"fisher closed form:\n{closed_f.values}")
    lines.append(f"fisher quadrature check: max deviation {np.abs(quad_f.values - closed_f.values).max() / scale_f:.3e} (relative)")
    lines.append(f"direct-L2 closed form:\n{closed_h.values}")
    lines.append(f"direct-L2 quadrature check: max deviation {np.abs(quad_h.values - closed_h.values).max() / scale_h:.3e} (relative)")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mixproj", description="Mixture projection filter experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run a scenario")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", default=os.environ.get(OUTDIR_ENV, "out"))

    p_cmp = sub.add_parser("compare", help="compare engine outputs in a run directory")
    p_cmp.add_argument("rundir")

    p_met = sub.add_parser("metrics", help="print closed-form Gaussian metrics and checks")
    p_met.add_argument("--family", default="gaussian", choices=["gaussian"])
    p_met.add_argument("--coords", default="canonical", choices=["canonical", "expectation"])

    args = parser.parse_args(argv)
    try:
        if args.verb == "run":
            scenario = parse_scenario(args.config)
            report = run(scenario, args.output)
            failed = [n for n, e in report.engines.items() if e.status != "ok"]
            for name, res in report.engines.items():
                status = res.status if res.status == "ok" else f"error: {res.error}"
                print(f"{name}: {status} ({res.wall_clock:.2f}s)")
            if failed:
                print(f"engines failed: {', '.join(failed)}", file=sys.stderr)
                return 3
            return 0
        if args.verb == "compare":
            rows = _compare_from_dir(Path(args.rundir))
            if rows:
                cols = sorted({k for r in rows for k in r})
                print(",".join(cols))
                for r in rows:
                    print(",".join(str(r.get(c, "")) for c in cols))
            out = Path(args.rundir) / "compare.csv"
            with open(out, "w", newline="") as fh:
                cols = sorted({k for r in rows for k in r})
                writer = csv.DictWriter(fh, fieldnames=cols)
                writer.writeheader()
                writer.writerows(rows)
            return 0
        if args.verb == "metrics":
            print(_metrics_table(args.coords, QuadratureSpec()))
            return 0
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except MixProjError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
