"""Experiment configuration, execution and trace files.

A run is described by one YAML file with the sections ``problem``,
``metric``, ``solver``, ``stage_switch`` (optional), ``initial``, ``output``
and ``seed``.  Unknown keys anywhere are rejected.  See ``configs/`` for the
bundled experiments and README.md for the schema.

Absolute shifts in metric parameters (``eps``, ``margin``, ``shift``) are in
operator units: they are multiplied by the problem's mass weight, which is
``h^2`` for the integral-scaled Allen-Cahn energy and 1 elsewhere.
"""
import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .dynamics import MetricStage, SolverConfig, StageSwitch, Status, optimal_step_size, solve
from .errors import ConfigError
from .metric import IdentityMetric
from .preconditioners import (
    IcParams,
    InertialMetricBuilder,
    block_jacobi_metric,
    frozen_spectral_metric,
    jacobi_metric,
    shifted_ic_metric,
    shifted_operator_metric,
    spectral_metric,
)
from .problems import (
    GridSpec,
    allen_cahn_problem,
    bistable_chain_problem,
    butterfly_problem,
    finite_difference_check,
    paper_quadratic_spectrum,
    quadratic_problem,
)

ERROR_EXIT = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# -- problems ----------------------------------------------------------------


class QuadraticSpec(_Strict):
    name: Literal["quadratic"]
    spectrum: Union[Literal["paper"], List[float]] = "paper"
    n: int = Field(100, ge=2)

    def build(self):
        lam = paper_quadratic_spectrum(self.n) if self.spectrum == "paper" else self.spectrum
        return quadratic_problem(lam)


class ButterflySpec(_Strict):
    name: Literal["butterfly"]
    c: float = 1.0

    def build(self):
        return butterfly_problem(self.c)


class ChainSpec(_Strict):
    name: Literal["bistable_chain"]
    N: int = Field(50, ge=2)
    K: float = Field(1e4, gt=0)
    delta: float = Field(1.0, gt=0)
    noise_std: float = Field(0.1, ge=0)

    def build(self):
        return bistable_chain_problem(self.N, self.K, self.delta, self.noise_std)


class AllenCahnSpec(_Strict):
    name: Literal["allen_cahn"]
    N: int = Field(80, ge=3)
    xi: float = Field(0.07, gt=0)
    scaling: Literal["integral", "nodal"] = "integral"

    def build(self):
        return allen_cahn_problem(GridSpec(self.N, self.xi), self.scaling)


ProblemSpec = Annotated[
    Union[QuadraticSpec, ButterflySpec, ChainSpec, AllenCahnSpec], Field(discriminator="name")
]


# -- metrics -----------------------------------------------------------------


class _MetricBase(_Strict):
    update: Literal["frozen", "every_step"] = "frozen"


class IdentitySpec(_MetricBase):
    type: Literal["identity"]


class SpectralSpec(_MetricBase):
    type: Literal["spectral", "frozen_spectral"]
    eps: Optional[float] = Field(None, gt=0)
    target_kappa: Optional[float] = Field(None, gt=1)

    @model_validator(mode="after")
    def _one_of(self):
        if (self.eps is None) == (self.target_kappa is None):
            raise ValueError("give exactly one of eps and target_kappa")
        if self.type == "frozen_spectral" and self.update != "frozen":
            raise ValueError("frozen_spectral cannot be rebuilt every step")
        return self


class InertialSpec(_MetricBase):
    type: Literal["subspace_inertial"]
    alpha: float = Field(ge=0, lt=1)
    weights: List[float]
    eps: float = Field(gt=0)
    beta: float = Field(1.0, gt=0)


class JacobiSpec(_MetricBase):
    type: Literal["jacobi", "block_jacobi"]
    eps: float = Field(gt=0)


class ShiftedIcSpec(_MetricBase):
    type: Literal["shifted_ic"]
    margin: float = Field(1.0, gt=0)
    safety: float = Field(1.1, ge=1)
    drop_tol: float = Field(0.0, ge=0)
    exact: bool = False


class ShiftedOperatorSpec(_MetricBase):
    type: Literal["shifted_operator"]
    operator: str
    shift: float = Field(ge=0)


MetricSpec = Annotated[
    Union[IdentitySpec, SpectralSpec, InertialSpec, JacobiSpec, ShiftedIcSpec, ShiftedOperatorSpec],
    Field(discriminator="type"),
]


class MetricSection(_Strict):
    stages: List[MetricSpec] = Field(min_length=1, max_length=2)


# -- remaining sections --------------------------------------------------------


class SolverSection(_Strict):
    k: int = Field(ge=0)
    eta: Union[float, Literal["auto"]]
    tau: float = Field(gt=0)
    inner_iters: int = Field(1, ge=1)
    grad_tol: float = Field(1e-8, gt=0)
    max_iters: int = Field(10_000, ge=0)
    divergence_norm_cap: float = Field(1e6, gt=0)
    frame_init: Literal["eigen", "random"] = "eigen"


class StageSwitchSection(_Strict):
    eta: float = Field(gt=0)
    window: int = Field(10, ge=1)
    rel_decrease_threshold: float = Field(0.1, gt=0, lt=1)


class InitialSection(_Strict):
    point: Optional[str] = None
    file: Optional[str] = None
    perturbation_std: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.point is None) == (self.file is None):
            raise ValueError("give exactly one of point and file")
        return self


class OutputSection(_Strict):
    dir: str = "runs"
    trace: str = "trace.csv"
    summary: str = "summary.json"


class ExperimentConfig(_Strict):
    name: str
    description: str = ""
    seed: int = Field(0, ge=0, lt=2**64)
    problem: ProblemSpec
    metric: MetricSection = MetricSection(stages=[IdentitySpec(type="identity")])
    solver: SolverSection
    stage_switch: Optional[StageSwitchSection] = None
    initial: InitialSection
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _stages_match_switch(self):
        two = len(self.metric.stages) == 2
        if two != (self.stage_switch is not None):
            raise ValueError("a second metric stage requires a stage_switch section and vice versa")
        return self


class SuiteManifest(_Strict):
    name: str
    description: str = ""
    members: List[str] = Field(min_length=1)
    jobs: int = Field(1, ge=1)
    output: OutputSection = OutputSection()


# -- loading -----------------------------------------------------------------


def bundled_configs():
    """Names of the configs shipped with the package."""
    root = resources.files("phisd") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_config_path(ref):
    """A filesystem path, or the name of a bundled config."""
    path = Path(ref)
    if path.exists():
        return path
    bundled = resources.files("phisd") / "configs" / f"{ref}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"no config file or bundled config named {ref!r}")


def _format_errors(exc, source):
    lines = [f"invalid config {source}:"]
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
        lines.append(f"  {loc}: {msg}")
    return "\n".join(lines)


def _read_yaml(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse {path}{where}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_config(data, source="<dict>"):
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, source)) from None


def load_config(ref):
    path = resolve_config_path(ref)
    cfg = parse_config(_read_yaml(path), str(path))
    if cfg.initial.file is not None and not Path(cfg.initial.file).is_absolute():
        cfg.initial.file = str((path.parent / cfg.initial.file).resolve())
    return cfg


def load_manifest(ref):
    path = resolve_config_path(ref)
    try:
        return SuiteManifest.model_validate(_read_yaml(path)), path
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, str(path))) from None


def with_overrides(cfg, seed=None, out=None, max_iters=None):
    """Copy of ``cfg`` with the command-line overrides applied."""
    cfg = cfg.model_copy(deep=True)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output.dir = str(out)
    if max_iters is not None:
        cfg.solver.max_iters = max_iters
    return cfg


# -- building solver inputs ------------------------------------------------------


def mass_weight(problem):
    return float(problem.operators.get("weight", 1.0))


def metric_source(spec, problem):
    """``MetricStage`` for one metric spec."""
    w = mass_weight(problem)
    t = spec.type
    if t == "identity":
        return MetricStage(IdentityMetric(problem.n), name="identity")
    if t in ("spectral", "frozen_spectral"):
        eps = None if spec.eps is None else spec.eps * w
        build = frozen_spectral_metric if t == "frozen_spectral" else spectral_metric
        return MetricStage(lambda x, H: build(H, eps, spec.target_kappa), spec.update, t)
    if t == "subspace_inertial":
        builder = InertialMetricBuilder(spec.alpha, spec.weights, spec.eps * w, spec.beta)
        return MetricStage(builder, spec.update, t)
    if t == "jacobi":
        return MetricStage(lambda x, H: jacobi_metric(H, spec.eps * w), spec.update, t)
    if t == "block_jacobi":
        if problem.block_sizes is None:
            raise ConfigError(f"problem {problem.name} has no block structure for block_jacobi")
        sizes = problem.block_sizes
        return MetricStage(lambda x, H: block_jacobi_metric(H, sizes, spec.eps * w), spec.update, t)
    if t == "shifted_ic":
        params = IcParams(margin=spec.margin * w, safety=spec.safety, drop_tol=spec.drop_tol, exact=spec.exact)
        return MetricStage(lambda x, H: shifted_ic_metric(H, params), spec.update, t)
    if t == "shifted_operator":
        if spec.operator not in problem.operators or spec.operator == "weight":
            raise ConfigError(f"problem {problem.name} has no operator {spec.operator!r}")
        A = w * problem.operators[spec.operator]
        return MetricStage(shifted_operator_metric(A, spec.shift * w), name=t)
    raise ConfigError(f"unknown metric type {t!r}")


def initial_state(cfg, problem, rng):
    ini = cfg.initial
    if ini.file is not None:
        x0 = np.load(ini.file) if ini.file.endswith(".npy") else np.loadtxt(ini.file)
        x0 = np.asarray(x0, dtype=float).ravel()
    else:
        try:
            x0 = problem.point(ini.point, rng)
        except KeyError:
            names = sorted(problem.named_points) + [r.label for r in problem.reference_points]
            raise ConfigError(f"{problem.name} has no point {ini.point!r}; known: {names}") from None
    if x0.shape != (problem.n,):
        raise ConfigError(f"initial state has {x0.size} entries, problem has n = {problem.n}")
    if ini.perturbation_std > 0:
        x0 = x0 + ini.perturbation_std * rng.standard_normal(problem.n)
    return x0


@dataclass
class PreparedRun:
    problem: object
    x0: np.ndarray
    stages: list
    solver: SolverConfig


def prepare(cfg):
    """Problem, initial state, metric schedule and solver settings for ``cfg``."""
    try:
        problem = cfg.problem.build()
        rng = np.random.default_rng(cfg.seed)
        x0 = initial_state(cfg, problem, rng)
        stages = [metric_source(s, problem) for s in cfg.metric.stages]
        s = cfg.solver
        eta = s.eta
        if eta == "auto":
            H0 = problem.hessian(x0)
            eta = optimal_step_size(H0, stages[0].build(x0, H0))
        switch = None
        if cfg.stage_switch is not None:
            sw = cfg.stage_switch
            switch = StageSwitch(sw.eta, sw.window, sw.rel_decrease_threshold)
        solver = SolverConfig(
            k=s.k,
            eta=float(eta),
            tau=s.tau,
            inner_iters=s.inner_iters,
            grad_tol=s.grad_tol,
            max_iters=s.max_iters,
            divergence_norm_cap=s.divergence_norm_cap,
            stage_switch=switch,
            frame_init=s.frame_init,
            seed=cfg.seed % 2**63,
        )
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{cfg.name}: {exc}") from None
    return PreparedRun(problem, x0, stages, solver)


# -- trace files -------------------------------------------------------------

COLUMNS = ("iter", "grad_norm", "energy", "eta", "stage")


@dataclass
class TraceFile:
    config: dict
    version: str
    seed: int
    rows: np.ndarray  # (m, 5): iter, grad_norm, energy, eta, stage
    status: str
    morse_index: Optional[int] = None
    rate: Optional[float] = None
    switch_iteration: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, TraceFile):
            return NotImplemented
        same_rows = self.rows.shape == other.rows.shape and np.array_equal(self.rows, other.rows, equal_nan=True)
        meta = ("config", "version", "seed", "status", "morse_index", "rate", "switch_iteration")
        return same_rows and all(getattr(self, a) == getattr(other, a) for a in meta)


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else "%.16e" % v


def format_trace(tf):
    buf = io.StringIO()
    buf.write("# phisd trace\n")
    buf.write(f"# version: {tf.version}\n")
    buf.write(f"# seed: {tf.seed}\n")
    buf.write(f"# config: {json.dumps(tf.config, sort_keys=True)}\n")
    buf.write(",".join(COLUMNS) + "\n")
    for it, gn, en, eta, st in tf.rows:
        buf.write(f"{int(it)},{_fmt(gn)},{_fmt(en)},{_fmt(eta)},{int(st)}\n")
    buf.write(f"# status: {tf.status}\n")
    buf.write(f"# morse_index: {'none' if tf.morse_index is None else tf.morse_index}\n")
    buf.write(f"# rate: {_fmt(tf.rate)}\n")
    buf.write(f"# switch_iteration: {'none' if tf.switch_iteration is None else tf.switch_iteration}\n")
    return buf.getvalue()


def write_trace(tf, path):
    Path(path).write_text(format_trace(tf))


def parse_trace(text):
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# ") and ": " in line:
            key, value = line[2:].split(": ", 1)
            meta[key] = value
        elif line and not line.startswith("#"):
            body.append(line)
    if not body or tuple(body[0].split(",")) != COLUMNS:
        raise ValueError("trace file lacks the column header")
    rows = np.array([[float(v) for v in r] for r in csv.reader(body[1:])], dtype=float).reshape(-1, len(COLUMNS))

    def opt_int(v):
        return None if v in (None, "none") else int(v)

    rate = float(meta["rate"]) if meta.get("rate", "nan") != "nan" else None
    return TraceFile(
        config=json.loads(meta["config"]),
        version=meta["version"],
        seed=int(meta["seed"]),
        rows=rows,
        status=meta["status"],
        morse_index=opt_int(meta.get("morse_index")),
        rate=rate,
        switch_iteration=opt_int(meta.get("switch_iteration")),
    )


def read_trace(path):
    return parse_trace(Path(path).read_text())


def trace_file(cfg, trace):
    rows = np.array([[r.m, r.grad_norm, r.energy, r.eta, r.stage] for r in trace.records], dtype=float)
    rate = trace.rate.q if trace.rate is not None and trace.rate.ok else None
    return TraceFile(
        config=cfg.model_dump(mode="json"),
        version=__version__,
        seed=cfg.seed,
        rows=rows,
        status=trace.status.value,
        morse_index=trace.morse_index,
        rate=rate,
        switch_iteration=trace.switch_iteration,
    )


# -- running -----------------------------------------------------------------


@dataclass
class RunResult:
    config: ExperimentConfig
    trace: object  # RunTrace, None on error
    summary: dict
    exit_code: int
    trace_path: Optional[Path] = None


def _summary(cfg, prepared, trace, wall):
    metric_names = "+".join(s.type for s in cfg.metric.stages)
    rate = trace.rate.q if trace.rate is not None and trace.rate.ok else None
    return {
        "name": cfg.name,
        "problem": cfg.problem.name,
        "n": prepared.problem.n,
        "metric": metric_names,
        "status": trace.status.value,
        "exit_code": trace.status.exit_code,
        "iterations": trace.iterations,
        "final_grad_norm": float(trace.grad_norms[-1]),
        "initial_grad_norm": float(trace.grad_norms[0]),
        "morse_index": trace.morse_index,
        "rate": rate,
        "switch_iteration": trace.switch_iteration,
        "eta": prepared.solver.eta,
        "max_frame_error": float(max(trace.frame_errors, default=0.0)),
        "message": trace.message,
        "wall_time": wall,
        "seed": cfg.seed,
        "version": __version__,
    }


def run_experiment(cfg, write=True, log=None):
    """Execute one experiment; returns a :class:`RunResult`.

    With ``write`` the trace and the JSON summary go to
    ``cfg.output.dir/cfg.name/``.  Wall time is recorded only in the summary,
    so repeated runs produce identical trace files.
    """
    prepared = prepare(cfg)
    t0 = time.perf_counter()
    callback = None
    if log is not None:
        every = max(1, cfg.solver.max_iters // 20)

        def callback(state, record):
            if record.m % every == 0:
                log(f"  m={record.m:6d}  |g|={record.grad_norm:.3e}  stage={record.stage}")

    trace = solve(prepared.problem, prepared.x0, prepared.stages, prepared.solver, callback=callback)
    wall = time.perf_counter() - t0
    summary = _summary(cfg, prepared, trace, wall)
    result = RunResult(cfg, trace, summary, trace.status.exit_code)
    if write:
        out = Path(cfg.output.dir) / cfg.name
        out.mkdir(parents=True, exist_ok=True)
        result.trace_path = out / cfg.output.trace
        write_trace(trace_file(cfg, trace), result.trace_path)
        (out / cfg.output.summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


SUITE_COLUMNS = ("name", "problem", "n", "metric", "iterations", "status", "exit_code", "rate", "wall_time")


def _run_member(args):
    ref, seed, out, max_iters = args
    try:
        cfg = with_overrides(load_config(ref), seed, out, max_iters)
        summary = run_experiment(cfg).summary
    except Exception as exc:  # one bad member must not sink the suite
        summary = {"name": str(ref), "status": "Error", "exit_code": ERROR_EXIT, "message": str(exc)}
    return summary


def run_suite(manifest, base_dir=None, seed=None, out=None, max_iters=None):
    """Run every member config; returns ``(rows, exit_code)``.

    Members are paths relative to ``base_dir`` or bundled config names.  The
    comparison table is written to ``<out>/<manifest name>/comparison.csv``;
    the suite exit code is the largest member exit code.
    """
    out = Path(out if out is not None else manifest.output.dir)
    refs = []
    for m in manifest.members:
        p = Path(base_dir) / m if base_dir is not None else Path(m)
        refs.append(str(p) if p.exists() else m)
    jobs = [(ref, seed, str(out), max_iters) for ref in refs]
    if manifest.jobs > 1:
        with ProcessPoolExecutor(max_workers=manifest.jobs) as pool:
            rows = list(pool.map(_run_member, jobs))
    else:
        rows = [_run_member(j) for j in jobs]
    code = max(r["exit_code"] for r in rows)
    dest = out / manifest.name
    dest.mkdir(parents=True, exist_ok=True)
    write_comparison(rows, dest / "comparison.csv")
    return rows, code


def write_comparison(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUITE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r.get(c, "") for c in SUITE_COLUMNS})


# -- verification ------------------------------------------------------------


def verify(cfg, n_points=3):
    """Derivative checks at the initial state and nearby points, plus SPD probes.

    Returns ``(ok, lines)``.
    """
    prepared = prepare(cfg)
    problem, x0 = prepared.problem, prepared.x0
    rng = np.random.default_rng(cfg.seed)
    lines = []
    ok = True
    scale = max(1e-3, 0.05 * np.abs(x0).max())
    points = [x0] + [x0 + scale * rng.standard_normal(problem.n) for _ in range(n_points - 1)]
    for i, x in enumerate(points):
        rep = finite_difference_check(problem, x, rng=rng)
        ok &= rep.passed
        worst = max(rep.hessian_errors, default=float("nan"))
        lines.append(
            f"fd point {i}: gradient {rep.gradient_error:.2e}, hessian-vector {worst:.2e} "
            f"{'ok' if rep.passed else 'FAIL'}{'' if rep.failure is None else ' ' + rep.failure}"
        )
    H0 = problem.hessian(x0)
    for j, stage in enumerate(prepared.stages):
        try:
            stage.build(x0, H0).probe(rng)
            lines.append(f"metric stage {j} ({stage.name}): SPD probe ok")
        except Exception as exc:
            ok = False
            lines.append(f"metric stage {j} ({stage.name}): FAIL {exc}")
    return ok, lines
