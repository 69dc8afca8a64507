"""Configuration-driven experiment runner.

An experiment spec is a small YAML file::

    kind: diffusion-constant        # one of KINDS
    model: model.yaml               # path (relative to this file) or inline mapping
    seed: 1
    out: runs/diffusion
    caps: {threads: 1, memory_mb: 2048}
    options: {n_traj: 100000}

``run`` executes the pipeline, writes CSVs that carry the config hash and
seed in their header, and a ``manifest.json`` with the checks it evaluated.
``report`` re-reads manifests and renders the acceptance table.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import click
import numpy as np
import scipy
import yaml

from . import __version__
from .errors import ConfigError, MissingArtifact, QDiffusionError, ResourceCap
from .model import _merge, build_model, load_config, spectral_measures

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2

CRITERIA = {
    "C1": "Gibbs stationarity",
    "C2": "three-way diffusion agreement",
    "C3": "Markov asymptotics of the RG seed",
    "C4": "Gaussian limit surrogate",
    "C5": "Dyson-vs-exact scaling",
    "C6": "Ward identity from unitarity",
    "C7": "cumulant recursion identity",
    "C8": "kernel-algebra property suite",
    "C9": "spectral perturbation bounds",
    "C10": "cluster expansion",
    "C11": "fiber spectral structure",
}

_RELATIONS: dict[str, Callable[[float, float], bool]] = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b,
}


# ---------------------------------------------------------------------------
# specs, checks and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    """One measured quantity compared with a threshold."""

    name: str
    measured: float
    threshold: float
    relation: str = "<"
    description: str = ""

    @property
    def criterion(self) -> str:
        return self.name.split(".")[0]

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured)) and _RELATIONS[self.relation](self.measured, self.threshold)

    def with_threshold(self, value: float) -> "Check":
        return Check(self.name, self.measured, value, self.relation, self.description)


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    model: dict
    out: Path
    seed: int = 0
    threads: int = 1
    memory_mb: float = 2048.0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {sorted(KINDS)}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.memory_mb <= 0:
            raise ConfigError("memory_mb must be positive")
        unknown = set(self.options) - set(KINDS[self.kind].defaults)
        if unknown:
            raise ConfigError(f"unknown options for {self.kind}: {sorted(unknown)}")

    @property
    def resolved_options(self) -> dict:
        return _merge(KINDS[self.kind].defaults, self.options)

    def config_hash(self) -> str:
        payload = {"kind": self.kind, "model": self.model, "options": self.resolved_options,
                   "seed": self.seed, "schema": SCHEMA_VERSION}
        blob = json.dumps(payload, sort_keys=True, default=_jsonable).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_spec(path, seed: int | None = None, out=None, threads: int | None = None) -> ExperimentSpec:
    """Read an experiment spec; command-line values override the file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed spec {path}: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError("spec root must be a mapping")
    return spec_from_mapping(raw, base=path.parent, seed=seed, out=out, threads=threads)


def spec_from_mapping(raw: Mapping, base=".", seed: int | None = None, out=None,
                      threads: int | None = None) -> ExperimentSpec:
    allowed = {"kind", "model", "seed", "out", "caps", "options"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
    if "kind" not in raw:
        raise ConfigError("spec needs a 'kind'")
    base = Path(base)
    model = raw.get("model") or {}
    if isinstance(model, (str, Path)):
        model_path = Path(model)
        model = load_config(model_path if model_path.is_absolute() else base / model_path)
    elif isinstance(model, Mapping):
        model = load_config(model)
    else:
        raise ConfigError("model must be a path or a mapping")
    caps = raw.get("caps") or {}
    if not isinstance(caps, Mapping) or set(caps) - {"threads", "memory_mb"}:
        raise ConfigError("caps accepts only 'threads' and 'memory_mb'")
    out_dir = out if out is not None else raw.get("out")
    if out_dir is None:
        raise ConfigError("no output directory: set 'out' or pass --out")
    out_dir = Path(out_dir)
    if out is None and not out_dir.is_absolute():
        out_dir = base / out_dir
    options = raw.get("options") or {}
    if not isinstance(options, Mapping):
        raise ConfigError("options must be a mapping")
    try:
        return ExperimentSpec(
            kind=str(raw["kind"]),
            model=model,
            out=out_dir,
            seed=int(raw.get("seed", 0) if seed is None else seed),
            threads=int(caps.get("threads", 1) if threads is None else threads),
            memory_mb=float(caps.get("memory_mb", 2048.0)),
            options=dict(options),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid spec value: {exc}") from exc


class _Writer:
    """Writes CSVs into the run directory with a fixed provenance header."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.hash = spec.config_hash()
        self.files: list[str] = []

    def csv(self, name: str, columns, rows) -> None:
        buf = io.StringIO()
        buf.write(f"# schema: {Path(name).stem}/{SCHEMA_VERSION}\n")
        buf.write(f"# config_hash: {self.hash}\n")
        buf.write(f"# seed: {self.spec.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        (self.spec.out / name).write_text(buf.getvalue())
        self.files.append(name)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12e}"
    return str(v)


def _need_memory(spec: ExperimentSpec, n_bytes: float, what: str) -> None:
    if n_bytes > spec.memory_mb * 2**20:
        raise ResourceCap(f"{what} needs {n_bytes / 2**20:.0f} MB, over the {spec.memory_mb:.0f} MB budget")


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pipeline:
    run: Callable[[ExperimentSpec, _Writer], list]
    defaults: dict


def _rates(model_cfg: dict):
    from .markov import jump_rates

    model = build_model(model_cfg)
    return model, jump_rates(model.spin, spectral_measures(model), model.params.m_p)


def _diffusion_constant(spec: ExperimentSpec, out: _Writer) -> list:
    from .lindblad_spectral import diffusion_from_curvature
    from .markov import diffusion_green_kubo, msd_diffusion, simulate_ensemble, stationary_density

    opt = spec.resolved_options
    rows, checks = [], []
    for case in opt["cases"]:
        model, rates = _rates(_merge(spec.model, {"lattice": dict(case)}))
        d = rates.d
        _need_memory(spec, 8.0 * opt["n_traj"] * opt["n_samples"] * (d + 1), "MSD ensemble")
        mu = stationary_density(rates)
        beta1, beta2 = model.bath.betas
        gibbs_err = np.nan
        if beta1 == beta2:
            w = np.exp(-beta1 * (model.spin.levels - model.spin.levels.min()))
            exact = np.repeat(w / w.sum(), rates.n_cells) / (2 * np.pi) ** d
            gibbs_err = float(np.max(np.abs(mu.density - exact) / exact))
            checks.append(Check(f"C1.d{d}", gibbs_err, opt["gibbs_tol"], "<",
                                "max relative error of the stationary density"))
        D_gk = diffusion_green_kubo(rates, mu).D
        D_curv = diffusion_from_curvature(rates).D
        t_max = opt["t_max_factor"] / float(np.mean(rates.escape))
        ens = simulate_ensemble(rates, opt["n_traj"], t_max, spec.seed, n_samples=opt["n_samples"],
                                mu=mu, threads=spec.threads)
        msd = msd_diffusion(ens, seed=spec.seed)
        est = {"gk": (D_gk, 0.0), "curvature": (D_curv, 0.0), "msd": (msd.D, msd.stderr)}
        worst = 0.0
        for (_, (a, sa)), (_, (b, sb)) in itertools.combinations(est.items(), 2):
            tol = max(opt["rel_tol"] * max(abs(a), abs(b)), opt["n_stderr"] * float(np.hypot(sa, sb)))
            worst = max(worst, abs(a - b) / tol)
        checks.append(Check(f"C2.d{d}", worst, 1.0, "<=",
                            "largest pairwise |D_a - D_b| / max(1%, 3 combined stderr)"))
        rows.append((d, model.bath.L, rates.n_k, D_gk, msd.D, msd.stderr, D_curv, gibbs_err))
    out.csv("summary.csv", ("d", "L", "grid", "D_gk", "D_msd", "D_msd_stderr", "D_curvature",
                            "gibbs_rel_error"), rows)
    return checks


def _fiber_scan(spec: ExperimentSpec, out: _Writer) -> list:
    from .lindblad_spectral import fiber_scan, spectral_constants

    opt = spec.resolved_options
    _, rates = _rates(spec.model)
    consts = spectral_constants(rates)
    scan = fiber_scan(rates, consts, n_points=opt["n_points"])
    out.csv("constants.csv", ("a_q", "b_q", "p_q", "gamma0"),
            [(consts.a_q, consts.b_q, consts.p_q, consts.gamma0)])
    out.csv("fiber.csv", ("p", "leading", "gap", "max_re"),
            zip(scan.p, scan.leading, scan.gap, scan.max_re))
    return [Check("C11", scan.violations, 0, "==", "gap and decay violations on the p-grid")]


def _rg_flow(spec: ExperimentSpec, out: _Writer) -> list:
    from . import rg_flow as rg

    opt = spec.resolved_options
    _, rates = _rates(spec.model)
    checks = []
    if opt["flow"]:
        checks += _rg_seed_and_flow(spec, out, rates)
    if opt["suites"]:
        rows = []
        for tag, results in (("C8", rg.kernel_algebra_suite(opt["n_kernels"], spec.seed)),
                             ("C9", rg.persistence_suite(opt["n_instances"], spec.seed))):
            rows += [(tag, r.name, r.n_cases, r.n_violations, r.worst) for r in results.values()]
            checks.append(Check(tag, sum(r.n_violations for r in results.values()), 0, "==",
                                "violations over all randomized properties"))
        out.csv("suites.csv", ("criterion", "property", "cases", "violations", "worst"), rows)
    if not checks:
        raise ConfigError("rg-flow needs at least one of 'flow' and 'suites'")
    return checks


def _rg_seed_and_flow(spec: ExperimentSpec, out: _Writer, rates) -> list:
    from . import rg_flow as rg
    from .markov import diffusion_green_kubo, stationary_density

    opt = spec.resolved_options
    D_Q = diffusion_green_kubo(rates, stationary_density(rates)).D
    checks = []

    seed_rows = []
    for lam in opt["seed_lambdas"]:
        t0 = rg.choose_t0(rates, lam)
        D0 = rg.make_state(rg.seed_kernel(rates, t0, lam)).D
        seed_rows.append((lam, t0, D0, D_Q, D0 / (t0 * D_Q)))
    out.csv("seed_ratio.csv", ("lambda", "t0", "D_0", "D_Q", "ratio"), seed_rows)
    smallest = min(seed_rows, key=lambda r: r[0])
    checks.append(Check("C3", abs(smallest[4] - 1.0), opt["seed_tol"], "<",
                        "|D_0 / (t0 D_Q) - 1| at the smallest coupling"))

    lam = opt["flow_lambda"]
    t0 = rg.choose_t0(rates, lam)
    config = rg.FlowConfig(ell=opt["ell"])
    reports = []
    records, _ = rg.run_flow(rg.seed_kernel(rates, t0, lam, ell=opt["ell"]), opt["n_steps"], config,
                             t0=t0, D_star=D_Q, rho0=rg.gibbs_density(rates, 1.0),
                             on_state=lambda s: reports.append(rg.verify_induction(s)))
    rg.write_flow_table(spec.out / "flow.csv", records,
                        {"schema": f"flow/{SCHEMA_VERSION}", "config_hash": out.hash, "seed": spec.seed})
    out.files.append("flow.csv")
    out.csv("induction.csv", ("n", "check", "measured", "bound", "passed"),
            [(rep.n, name, c.measured, c.bound, c.passed) for rep in reports for name, c in rep.checks.items()])
    errs = np.array([r.surrogate_error for r in records])
    checks.append(Check("C4.monotone", int(np.sum(np.diff(errs) >= 0)), 0, "==",
                        "steps where the surrogate error does not decrease"))
    checks.append(Check("C4.final", float(errs[-1]), opt["surrogate_tol"], "<",
                        f"surrogate error at n = {opt['n_steps']}"))
    return checks


def _dyson_convergence(spec: ExperimentSpec, out: _Writer) -> list:
    from . import dyson_cumulants as dc

    opt = spec.resolved_options
    base = dc.build_toy(lam=opt["lambdas"][0], L=opt["L"], n_fock=opt["n_fock"])
    rows, checks, fits = [], [], []
    for m in opt["orders"]:
        errs = []
        for lam in opt["lambdas"]:
            toy = base.with_lambda(lam)
            err = float(np.abs(dc.exact_reduced_dynamics(toy, opt["t"])
                               - dc.dyson_expansion(toy, opt["t"], m, n_nodes=opt["n_nodes"])).max())
            errs.append(err)
            rows.append((lam, m, err))
        slope = dc.fit_exponent(opt["lambdas"], errs)
        fits.append((m, 2 * m + 2, slope))
        checks.append(Check(f"C5.m{m}", abs(slope - (2 * m + 2)), opt["exponent_tol"], "<=",
                            f"|fitted exponent - {2 * m + 2}|"))
    out.csv("dyson.csv", ("lambda", "order", "error"), rows)
    out.csv("exponents.csv", ("order", "expected", "fitted"), fits)
    return checks


def _ward_suite(spec: ExperimentSpec, out: _Writer) -> list:
    from . import dyson_cumulants as dc

    opt = spec.resolved_options
    toy = dc.build_toy(lam=opt["lambda"])
    t0 = opt["t0"]
    times = range(1, opt["max_time"] + 1)
    sizes = set(opt["sizes"])
    Gc = dc.cumulants(dc.correlation_table(toy, times, t0, max_size=max(sizes)))
    lossy = dc.lossy_propagator(toy, t0, opt["control_rate"])
    Gc_bad = dc.cumulants(dc.correlation_table(toy, times, t0, max_size=max(sizes), propagator=lossy))
    sets = sorted((A for A in Gc if len(A) in sizes), key=lambda A: (len(A), sorted(A)))
    rows = [("-".join(map(str, sorted(A))), len(A), dc.ward_unitarity(Gc[A]), dc.ward_unitarity(Gc_bad[A]))
            for A in sets]
    out.csv("ward.csv", ("set", "size", "residual", "control_residual"), rows)
    rec = [("-".join(map(str, A)), opt["ell2"], dc.cumulant_recursion_check(toy, A, opt["ell2"], t0))
           for A in opt["recursion_sets"]]
    out.csv("recursion.csv", ("A_prime", "ell2", "deviation"), rec)
    return [
        Check("C6.ward", max(r[2] for r in rows), opt["ward_tol"], "<", "largest Ward residual"),
        Check("C6.control", min(r[3] for r in rows), opt["control_min"], ">",
              "smallest Ward residual of the trace-breaking control"),
        Check("C7", max(r[2] for r in rec), opt["recursion_tol"], "<", "largest recursion deviation"),
    ]


def _cluster_suite(spec: ExperimentSpec, out: _Writer) -> list:
    from . import dyson_cumulants as dc

    opt = spec.resolved_options
    n, kappa = opt["n_sites"], opt["kappa"]
    eps = dc.tune_interval_eps(kappa, opt["slack"], n - 1, opt["max_len"])
    w = dc.interval_weights(eps, n - 1, opt["max_len"])
    rows, bad = [], 0
    for k in range(1, n + 1):
        for S in itertools.combinations(range(n), k):
            r = dc.kotecky_preiss_check(w, kappa, S, n - 1)
            bad += int(not (r.hypothesis_holds and r.conclusion_holds))
            rows.append((" ".join(map(str, S)), r.conclusion_sum, r.conclusion_bound, r.n_collections,
                         r.hypothesis_holds, r.conclusion_holds))
    out.csv("cluster.csv", ("S_prime", "connected_sum", "bound", "collections", "hypothesis", "conclusion"), rows)
    out.csv("weights.csv", ("eps", "kappa", "hypothesis_ratio"),
            [(eps, kappa, dc.hypothesis_ratio(w, kappa, n - 1))])
    return [Check("C10", bad, 0, "==", "subsets S' violating the polymer bound")]


KINDS: dict[str, Pipeline] = {
    "diffusion-constant": Pipeline(_diffusion_constant, {
        "cases": [{"d": 1, "L": 64}, {"d": 2, "L": 32}],
        "n_traj": 100_000, "n_samples": 64, "t_max_factor": 200.0,
        "rel_tol": 0.01, "n_stderr": 3.0, "gibbs_tol": 1e-8,
    }),
    "fiber-scan": Pipeline(_fiber_scan, {"n_points": 64}),
    "rg-flow": Pipeline(_rg_flow, {
        "seed_lambdas": [0.2, 0.1, 0.05], "seed_tol": 0.05,
        "flow_lambda": 0.1, "ell": 4, "n_steps": 6, "surrogate_tol": 1e-3,
        "flow": True, "suites": True, "n_kernels": 500, "n_instances": 200,
    }),
    "dyson-convergence": Pipeline(_dyson_convergence, {
        "lambdas": [0.2, 0.1, 0.05], "orders": [1, 2], "t": 2.0, "L": 1, "n_fock": 3,
        "n_nodes": 12, "exponent_tol": 0.3,
    }),
    "ward-suite": Pipeline(_ward_suite, {
        "lambda": 0.3, "t0": 4.0, "max_time": 3, "sizes": [2, 3], "control_rate": 0.5,
        "recursion_sets": [[1], [1, 2]], "ell2": 2,
        "ward_tol": 1e-10, "control_min": 1e-3, "recursion_tol": 1e-8,
    }),
    "cluster-suite": Pipeline(_cluster_suite, {
        "n_sites": 7, "kappa": 1.0, "slack": 0.5, "max_len": 3,
    }),
}


# ---------------------------------------------------------------------------
# run and report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunResult:
    out: Path
    checks: list
    manifest: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.passed else EXIT_FAILED


def run(spec: ExperimentSpec) -> RunResult:
    """Execute the pipeline and write its CSVs plus manifest.json."""
    spec.out.mkdir(parents=True, exist_ok=True)
    writer = _Writer(spec)
    start = time.perf_counter()
    checks = KINDS[spec.kind].run(spec, writer)
    wall = time.perf_counter() - start
    manifest = {
        "schema": SCHEMA_VERSION,
        "kind": spec.kind,
        "config_hash": writer.hash,
        "seed": spec.seed,
        "threads": spec.threads,
        "memory_mb": spec.memory_mb,
        "wall_time_s": round(wall, 3),
        "versions": {"qdiffusion": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "model": spec.model,
        "options": spec.resolved_options,
        "files": writer.files,
        "checks": [{**asdict(c), "passed": c.passed} for c in checks],
    }
    (spec.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))
    return RunResult(spec.out, checks, manifest)


def parse_tolerances(items) -> dict[str, float]:
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"tolerance override {item!r} is not NAME=VALUE")
        try:
            out[name.strip()] = float(value)
        except ValueError as exc:
            raise ConfigError(f"tolerance override {item!r} has a non-numeric value") from exc
    return out


def _manifests(directory: Path) -> list[Path]:
    own = directory / "manifest.json"
    if own.is_file():
        return [own]
    found = sorted(directory.glob("*/manifest.json"))
    if not found:
        raise MissingArtifact(f"no manifest.json in {directory} or its subdirectories")
    return found


def collect_checks(directory, tolerances: Mapping[str, float] | None = None) -> list[Check]:
    """Checks from every manifest under ``directory``, with threshold overrides.

    An override keyed by a criterion id (``C2``) applies to all of its checks;
    a full check name (``C2.d1``) wins over the criterion-level value.
    """
    tolerances = dict(tolerances or {})
    checks = []
    for path in _manifests(Path(directory)):
        try:
            manifest = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MissingArtifact(f"unreadable manifest {path}: {exc}") from exc
        for name in manifest.get("files", []):
            if not (path.parent / name).is_file():
                raise MissingArtifact(f"{path.parent / name} listed in the manifest is missing")
        for raw in manifest.get("checks", []):
            c = Check(raw["name"], float(raw["measured"]), float(raw["threshold"]), raw["relation"],
                      raw.get("description", ""))
            for key in (c.criterion, c.name):
                if key in tolerances:
                    c = c.with_threshold(tolerances[key])
            checks.append(c)
    return checks


def render_report(checks: list[Check]) -> str:
    lines = [f"{'check':<14}{'criterion':<36}{'measured':>14}  {'rel':<3}{'threshold':>12}  status"]
    by_crit = {}
    for c in checks:
        by_crit.setdefault(c.criterion, []).append(c)
    for cid, title in CRITERIA.items():
        if cid not in by_crit:
            lines.append(f"{cid:<14}{title:<36}{'':>14}  {'':<3}{'':>12}  not run")
            continue
        for c in by_crit[cid]:
            mark = "✓" if c.passed else "✗"
            lines.append(f"{c.name:<14}{title:<36}{c.measured:>14.4e}  {c.relation:<3}{c.threshold:>12.4e}  {mark}")
    return "\n".join(lines)


@click.group()
@click.version_option(__version__)
def main():
    """Run diffusion experiments and report acceptance checks."""


@main.command("run")
@click.argument("spec_path", type=click.Path(dir_okay=False))
@click.option("--threads", type=int, default=None, help="Thread budget (overrides caps.threads).")
@click.option("--seed", type=int, default=None, help="Seed (overrides the experiment file).")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
def run_command(spec_path, threads, seed, out):
    """Execute the experiment described by SPEC_PATH."""
    try:
        result = run(load_spec(spec_path, seed=seed, out=out, threads=threads))
    except QDiffusionError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    click.echo(render_report(result.checks))
    sys.exit(result.exit_code)


@main.command("report")
@click.argument("directory", type=click.Path(file_okay=False))
@click.option("--tol", "tols", multiple=True, metavar="NAME=VALUE",
              help="Override a threshold, by criterion (C5) or check name (C5.m1).")
def report_command(directory, tols):
    """Render the acceptance table for the runs under DIRECTORY."""
    try:
        checks = collect_checks(directory, parse_tolerances(tols))
    except QDiffusionError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    click.echo(render_report(checks))
    sys.exit(EXIT_OK if all(c.passed for c in checks) else EXIT_FAILED)


if __name__ == "__main__":
    main()
