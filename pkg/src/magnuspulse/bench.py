"""Benchmark pipeline: seed optimization, step-size scans, and races.

The three stages mirror a fixed protocol. First a batch of random seeds is
optimized with the most accurate scheme on a fine grid and archived
together with scheme-independent reference infidelities. Second, every
scheme's simulation error |F(dt) - F_true| is scanned over a step-size
range, its convergence slope fitted, and the step size dt* meeting a
target error interpolated. Third, the same seeds are re-optimized under
each scheme at its own dt*, recording per-iteration infidelity, wall time
and exponentiation counts.

Numerical outputs (archives, scan errors, race trajectories keyed by
exponentiation counts) are deterministic under a fixed RNG seed and are
written separately from wall-time measurements, which never are.

One detail deserves a note: the pulse envelope is only C1 at the ramp
edges, so step counts are snapped to multiples of round(1 / ramp_fraction)
whenever that is an integer. The edges then land on step boundaries and
the node-based schemes keep their clean convergence order; exact-integral
schemes are indifferent because their quadrature splits at the edges.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coefficients import SchemeKind, TimeGrid, precompute_basis_integrals
from .controls import basis_matrix
from .grape import ControlProblem, gradient, infidelity
from .optimizer import (
    OptimizationConfig,
    OptimizationError,
    minimize,
    random_seed_pulse,
)
from .spinchain import SpinChainParams, build_model, chain_ansatz, transfer_problem


class ConfigError(ValueError):
    """Invalid benchmark configuration (CLI exit code 1)."""


class BenchError(RuntimeError):
    """Numerical failure inside a benchmark stage (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


def _section(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section {where!r}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad section {where!r}: {exc}") from exc


@dataclass(frozen=True)
class ChainSection:
    n_spins: int = 5
    coupling: float = 1.0
    next_coupling: float | None = None
    frequency: float = 20.0
    rwa: bool = True


@dataclass(frozen=True)
class PulseSection:
    n_basis: int = 8
    duration: float = 2.9
    ramp_fraction: float = 0.1
    amplitude_bound: float = 1.0


@dataclass(frozen=True)
class SeedSection:
    count: int = 20
    rng_seed: int = 2024


@dataclass(frozen=True)
class OptimizerSection:
    max_iterations: int = 300
    gradient_tolerance: float = 1e-8
    constraint_tolerance: float = 1e-9
    initial_coefficient_scale: float = 0.1
    constraint_samples_per_step: int = 4


@dataclass(frozen=True)
class SeedStageSection:
    n_steps: int = 290
    true_tolerance: float = 1e-8


@dataclass(frozen=True)
class ScanSection:
    min_steps: int = 10
    max_steps: int = 2900
    points: int = 12


@dataclass(frozen=True)
class RaceSection:
    target_error: float = 1e-6


@dataclass(frozen=True)
class OutputSection:
    """Presentation and execution knobs with no effect on the numbers.

    workers widens the seed and scan-point pools; results are aggregated
    in sorted order, so any width yields identical numerical artifacts.
    """

    include_initialization: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


_SECTIONS = {
    "chain": ChainSection,
    "pulse": PulseSection,
    "seeds": SeedSection,
    "optimizer": OptimizerSection,
    "seed_stage": SeedStageSection,
    "scan": ScanSection,
    "race": RaceSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class BenchConfig:
    chain: ChainSection = field(default_factory=ChainSection)
    pulse: PulseSection = field(default_factory=PulseSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    seed_stage: SeedStageSection = field(default_factory=SeedStageSection)
    scan: ScanSection = field(default_factory=ScanSection)
    race: RaceSection = field(default_factory=RaceSection)
    output: OutputSection = field(default_factory=OutputSection)
    schemes: tuple = ("m2exact", "m2approx", "m4exact", "m4approx")

    @staticmethod
    def from_dict(data: dict) -> "BenchConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        allowed = set(_SECTIONS) | {"schemes"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {unknown}")
        kwargs = {
            name: _section(cls, data.get(name), name)
            for name, cls in _SECTIONS.items()
        }
        schemes = data.get("schemes", BenchConfig.schemes)
        if not schemes:
            raise ConfigError("schemes must not be empty")
        for name in schemes:
            try:
                SchemeKind(name)
            except ValueError as exc:
                raise ConfigError(f"unknown scheme {name!r}") from exc
        config = BenchConfig(schemes=tuple(schemes), **kwargs)
        config.validate()
        return config

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out["schemes"] = list(self.schemes)
        return out

    def validate(self):
        if self.seeds.count < 1:
            raise ConfigError("seeds.count must be positive")
        if self.race.target_error <= 0.0:
            raise ConfigError("race.target_error must be positive")
        if self.seed_stage.true_tolerance <= 0.0:
            raise ConfigError("seed_stage.true_tolerance must be positive")
        if self.scan.points < 6:
            raise ConfigError("scan.points must be at least 6")
        if self.scan.max_steps < 10 * self.scan.min_steps:
            raise ConfigError("scan range must span at least one decade")
        m = self.alignment_multiple()
        if m > 1 and self.seed_stage.n_steps % m != 0:
            raise ConfigError(
                f"seed_stage.n_steps must be a multiple of {m} so the ramp "
                "edges fall on step boundaries"
            )
        counts = self.scan_step_counts()
        if len(counts) < 6:
            raise ConfigError("scan range yields fewer than 6 distinct step counts")

    def alignment_multiple(self) -> int:
        """Steps per ramp so the envelope's edges sit on step boundaries."""
        inverse = 1.0 / self.pulse.ramp_fraction
        m = round(inverse)
        return m if abs(inverse - m) < 1e-9 and m > 1 else 1

    def scan_step_counts(self) -> list:
        m = self.alignment_multiple()
        raw = np.geomspace(self.scan.min_steps, self.scan.max_steps, self.scan.points)
        counts = sorted({max(m, int(round(x / m)) * m) for x in raw})
        return counts

    def chain_params(self) -> SpinChainParams:
        return SpinChainParams(
            n_spins=self.chain.n_spins,
            coupling=self.chain.coupling,
            next_coupling=self.chain.next_coupling,
            frequency=self.chain.frequency,
            rwa=self.chain.rwa,
        )

    def ansatz(self):
        return chain_ansatz(
            self.chain_params(),
            total_duration=self.pulse.duration,
            n_basis=self.pulse.n_basis,
            ramp_fraction=self.pulse.ramp_fraction,
            amplitude_bound=self.pulse.amplitude_bound,
        )

    def optimizer_config(self, seed: int) -> OptimizationConfig:
        return OptimizationConfig(
            max_iterations=self.optimizer.max_iterations,
            gradient_tolerance=self.optimizer.gradient_tolerance,
            constraint_tolerance=self.optimizer.constraint_tolerance,
            seed=seed,
            initial_coefficient_scale=self.optimizer.initial_coefficient_scale,
            constraint_samples_per_step=self.optimizer.constraint_samples_per_step,
        )


def load_config(path, rng_seed: int | None = None) -> BenchConfig:
    """Parse a JSON config file; rng_seed overrides seeds.rng_seed."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if rng_seed is not None:
        data = dict(data)
        seeds = dict(data.get("seeds") or {})
        seeds["rng_seed"] = int(rng_seed)
        data["seeds"] = seeds
    return BenchConfig.from_dict(data)


def numeric_config_dict(config: BenchConfig) -> dict:
    """Config fields that determine the numbers, as a plain dict.

    The output section only shapes presentation and execution (timing
    columns, pool width), so it is left out: toggling it must neither move
    the run directory nor change any numerical artifact.
    """
    payload = config.to_dict()
    del payload["output"]
    return payload


def config_hash(config: BenchConfig) -> str:
    """Short digest identifying a run by its numerical inputs."""
    payload = json.dumps(numeric_config_dict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def run_directory(config: BenchConfig, out_dir) -> Path:
    path = Path(out_dir) / f"run_{config_hash(config)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# output helpers


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_format_cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# worker pool plumbing

# Per-process context memo: (run hash, scheme, n_steps) -> (model, ansatz,
# cache). Sequential runs share caches across seeds through it, and each
# pool worker fills its own copy once and reuses it for later tasks.
_CONTEXTS: dict = {}


def _context(config: BenchConfig, scheme: SchemeKind, n_steps: int):
    key = (config_hash(config), scheme.value, n_steps)
    if key not in _CONTEXTS:
        ansatz = config.ansatz()
        cache = None
        if scheme.exact_integrals:
            cache = precompute_basis_integrals(
                ansatz,
                TimeGrid(config.pulse.duration, n_steps),
                fourth_order=scheme.fourth_order,
                validate=False,
            )
        _CONTEXTS[key] = (build_model(config.chain_params()), ansatz, cache)
    return _CONTEXTS[key]


def _pool_map(task, payloads, workers: int) -> list:
    """Map preserving payload order, optionally through a process pool.

    Results are returned in input order however the pool schedules them,
    so aggregation downstream is deterministic for any worker count.
    """
    if workers <= 1 or len(payloads) <= 1:
        return [task(p) for p in payloads]
    import multiprocessing
    from concurrent.futures import ProcessPoolExecutor

    # fork instead of spawn: workers inherit the parent without re-running
    # __main__, so pooling also works from scripts piped through stdin
    context = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(
        max_workers=min(workers, len(payloads)), mp_context=context
    ) as pool:
        return list(pool.map(task, payloads))


# ---------------------------------------------------------------------------
# stage 1: seed optimization


def _build_problem(config: BenchConfig, scheme: SchemeKind, n_steps: int,
                   model=None, cache=None) -> ControlProblem:
    problem = transfer_problem(
        config.chain_params(),
        config.ansatz(),
        TimeGrid(config.pulse.duration, n_steps),
        scheme,
        model=model,
    )
    problem.cache = cache
    return problem


def _optimize_seed_task(payload: dict) -> dict:
    """Optimize one seed; runs in the parent or in a pool worker."""
    config = BenchConfig.from_dict(payload["config"])
    scheme = SchemeKind(payload["scheme"])
    n_steps = payload["n_steps"]
    seed = payload["seed"]
    model, ansatz, cache = _context(config, scheme, n_steps)
    opt_config = config.optimizer_config(seed)
    if payload.get("initial_coefficients") is None:
        b0 = random_seed_pulse(ansatz, opt_config)
    else:
        b0 = np.array(payload["initial_coefficients"])
    problem = _build_problem(config, scheme, n_steps, model, cache)
    try:
        b_opt, record = minimize(problem, b0, opt_config)
    except OptimizationError as exc:
        return {"seed": seed, "error": str(exc)}
    return {
        "seed": seed,
        "initial_coefficients": b0.tolist(),
        "optimized_coefficients": b_opt.tolist(),
        "final_infidelity": record.final_infidelity,
        "converged": record.converged,
        "termination_reason": record.termination_reason.value,
        "n_iterations": len(record.iterations),
        "trajectory": [
            (point.index, point.infidelity, point.exponentiations)
            for point in record.iterations
        ],
        "wall_times": [point.wall_time for point in record.iterations],
        "optimize_seconds": record.total_time,
        "initialization_seconds": record.initialization_time,
    }


def _true_infidelities(config: BenchConfig, model, pulses, start_steps):
    """Reference infidelity per pulse by shared step-doubling.

    All pulses are evaluated on one grid ladder (exact 4th order, doubled
    until each pulse's value moves by less than true_tolerance / 10), so
    the expensive integral tables are built once per level, not per pulse.
    """
    tolerance = config.seed_stage.true_tolerance
    ansatz = config.ansatz()
    n = start_steps
    values = {}
    previous = None
    for attempt in range(12):
        grid = TimeGrid(config.pulse.duration, n)
        cache = precompute_basis_integrals(
            ansatz, grid, fourth_order=True, validate=attempt == 0
        )
        problem = _build_problem(config, SchemeKind.M4EXACT, n, model, cache)
        current = np.array([infidelity(problem, b) for b in pulses])
        if previous is not None:
            settled = np.abs(current - previous) < tolerance / 10.0
            for idx in np.nonzero(settled)[0]:
                values.setdefault(int(idx), float(current[idx]))
            if len(values) == len(pulses):
                return [values[i] for i in range(len(pulses))]
        previous = current
        n *= 2
    raise BenchError(
        f"true-infidelity step doubling did not settle within tolerance "
        f"{tolerance:.0e}"
    )


def run_seed_stage(config: BenchConfig, out_dir) -> dict:
    """Optimize every seed with exact 4th order on the fine grid; archive.

    Returns the archive dict and writes archive.json (deterministic) plus
    seed_stage_timing.json (wall times, never deterministic) into the run
    directory. The coarsest integral cache is validated against adaptive
    quadrature once, up front, before any worker uses its unvalidated twin.
    """
    run_dir = run_directory(config, out_dir)
    n_steps = config.seed_stage.n_steps
    grid = TimeGrid(config.pulse.duration, n_steps)

    init_start = time.perf_counter()
    model = build_model(config.chain_params())
    ansatz = config.ansatz()
    cache = precompute_basis_integrals(ansatz, grid, fourth_order=True)
    init_seconds = time.perf_counter() - init_start
    key = (config_hash(config), SchemeKind.M4EXACT.value, n_steps)
    _CONTEXTS[key] = (model, ansatz, cache)

    payloads = [
        {
            "config": config.to_dict(),
            "scheme": SchemeKind.M4EXACT.value,
            "n_steps": n_steps,
            "seed": config.seeds.rng_seed + index,
        }
        for index in range(config.seeds.count)
    ]
    results = _pool_map(_optimize_seed_task, payloads, config.output.workers)

    entries = []
    timings = []
    for result in results:
        if "error" in result:
            entries.append(result)
            continue
        entries.append(
            {
                key: result[key]
                for key in (
                    "seed",
                    "initial_coefficients",
                    "optimized_coefficients",
                    "final_infidelity",
                    "converged",
                    "termination_reason",
                    "n_iterations",
                )
            }
        )
        timings.append(
            {
                "seed": result["seed"],
                "optimize_seconds": result["optimize_seconds"],
                "initialization_seconds": result["initialization_seconds"],
            }
        )

    good = [e for e in entries if "error" not in e]
    if good:
        pulses = [np.array(e["optimized_coefficients"]) for e in good]
        references = _true_infidelities(config, model, pulses, n_steps)
        for entry, value in zip(good, references):
            entry["true_infidelity"] = value

    archive = {
        "config": numeric_config_dict(config),
        "n_steps": n_steps,
        "entries": entries,
    }
    _dump_json(run_dir / "archive.json", archive)
    _dump_json(
        run_dir / "seed_stage_timing.json",
        {"initialization_seconds": init_seconds, "seeds": timings},
    )
    return archive


# ---------------------------------------------------------------------------
# stage 2: step-size scan


@dataclass(frozen=True)
class ScanRow:
    scheme: str
    n_steps: int
    dt: float
    error_mean: float
    error_min: float
    error_max: float


@dataclass(frozen=True)
class SchemeScan:
    slope: float | None
    dt_star: float | None
    n_star: int | None
    note: str = ""


@dataclass
class ScanResult:
    rows: list
    per_scheme: dict
    target_error: float

    def rows_for(self, scheme: str):
        return [r for r in self.rows if r.scheme == scheme]


# slope fits use scan points inside this error window: above the reference
# noise floor, below order-two saturation
_FIT_WINDOW = (1e-9, 5e-2)


def _fit_slope(rows):
    dts, errs = [], []
    for row in rows:
        if _FIT_WINDOW[0] <= row.error_mean <= _FIT_WINDOW[1]:
            dts.append(row.dt)
            errs.append(row.error_mean)
    if len(dts) < 3 or max(dts) / min(dts) < 3.0:
        return None, "too few clean points for a slope fit"
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    return slope, ""


def _interpolate_dt_star(rows, target):
    """Largest dt at which the mean error meets the target, log-interpolated."""
    ordered = sorted(rows, key=lambda r: r.dt)
    if ordered[-1].error_mean <= target:
        return ordered[-1].dt, "target met across the whole range"
    crossing = None
    for low, high in zip(ordered, ordered[1:]):
        if low.error_mean <= target < high.error_mean:
            crossing = (low, high)
    if crossing is None:
        return None, "target error unreachable in the scan range"
    low, high = crossing
    # guard: interpolate in log space between the bracketing points
    x0, x1 = np.log(low.dt), np.log(high.dt)
    y0, y1 = np.log(low.error_mean), np.log(high.error_mean)
    t = (np.log(target) - y0) / (y1 - y0)
    return float(np.exp(x0 + t * (x1 - x0))), ""


def _scan_point_task(payload: dict) -> list:
    """Error rows for one step count across all schemes."""
    config = BenchConfig.from_dict(payload["config"])
    n_steps = payload["n_steps"]
    pulses = [np.array(b) for b in payload["pulses"]]
    references = payload["references"]
    dt = TimeGrid(config.pulse.duration, n_steps).dt
    rows = []
    for name in config.schemes:
        scheme = SchemeKind(name)
        model, _, cache = _context(config, scheme, n_steps)
        problem = _build_problem(config, scheme, n_steps, model, cache)
        defects = [
            abs(infidelity(problem, b) - ref)
            for b, ref in zip(pulses, references)
        ]
        rows.append(
            ScanRow(
                scheme=name,
                n_steps=n_steps,
                dt=dt,
                error_mean=float(np.mean(defects)),
                error_min=float(np.min(defects)),
                error_max=float(np.max(defects)),
            )
        )
    return rows


def run_dt_scan(config: BenchConfig, archive: dict, out_dir) -> ScanResult:
    """Simulation error and cost of every scheme over the step-count scan.

    Numeric error rows may be computed in a worker pool; the per-evaluation
    wall times come from a dedicated sequential pass afterwards so pool
    contention cannot skew them.
    """
    entries = [e for e in archive.get("entries", []) if "error" not in e]
    if not entries:
        raise BenchError("archive holds no successfully optimized pulses")
    run_dir = run_directory(config, out_dir)
    pulses = [np.array(e["optimized_coefficients"]) for e in entries]
    references = [e["true_infidelity"] for e in entries]

    counts = config.scan_step_counts()
    payloads = [
        {
            "config": config.to_dict(),
            "n_steps": n_steps,
            "pulses": [b.tolist() for b in pulses],
            "references": references,
        }
        for n_steps in counts
    ]
    rows = [
        row
        for point_rows in _pool_map(_scan_point_task, payloads, config.output.workers)
        for row in point_rows
    ]

    timing_rows = []
    samples = pulses[: min(3, len(pulses))]
    for n_steps in counts:
        for name in config.schemes:
            scheme = SchemeKind(name)
            model, _, cache = _context(config, scheme, n_steps)
            problem = _build_problem(config, scheme, n_steps, model, cache)
            start = time.perf_counter()
            for b in samples:
                infidelity(problem, b)
            timing_rows.append(
                (name, n_steps, (time.perf_counter() - start) / len(samples))
            )

    per_scheme = {}
    for name in config.schemes:
        scheme_rows = [r for r in rows if r.scheme == name]
        slope, slope_note = _fit_slope(scheme_rows)
        dt_star, star_note = _interpolate_dt_star(scheme_rows, config.race.target_error)
        n_star = None
        if dt_star is not None:
            m = config.alignment_multiple()
            needed = int(np.ceil(config.pulse.duration / dt_star))
            n_star = int(np.ceil(needed / m) * m) if m > 1 else needed
        per_scheme[name] = SchemeScan(
            slope=slope,
            dt_star=dt_star,
            n_star=n_star,
            note="; ".join(s for s in (slope_note, star_note) if s),
        )

    result = ScanResult(rows=rows, per_scheme=per_scheme,
                        target_error=config.race.target_error)
    _write_csv(
        run_dir / "scan.csv",
        ["scheme", "n_steps", "dt", "error_mean", "error_min", "error_max"],
        [(r.scheme, r.n_steps, r.dt, r.error_mean, r.error_min, r.error_max)
         for r in rows],
    )
    _write_csv(
        run_dir / "scan_timing.csv",
        ["scheme", "n_steps", "wall_seconds_per_infidelity"],
        timing_rows,
    )
    _dump_json(
        run_dir / "scan.json",
        {
            "target_error": config.race.target_error,
            "per_scheme": {
                name: dataclasses.asdict(summary)
                for name, summary in per_scheme.items()
            },
        },
    )
    return result


# ---------------------------------------------------------------------------
# stage 3: equal-accuracy race


def run_race(config: BenchConfig, archive: dict, scan: ScanResult, out_dir) -> dict:
    """Re-optimize every archived seed under each scheme at its own dt*.

    Every scheme restarts from the archived initial coefficients, not the
    optimized pulses, so the trajectories compare full optimization runs at
    matched simulation accuracy.
    """
    entries = [e for e in archive.get("entries", []) if "error" not in e]
    if not entries:
        raise BenchError("archive holds no successfully optimized pulses")
    for name in config.schemes:
        if scan.per_scheme[name].n_star is None:
            raise BenchError(
                f"no dt* for scheme {name}: {scan.per_scheme[name].note}"
            )
    run_dir = run_directory(config, out_dir)

    # dedicated sequential pass for setup timings (model + integral tables)
    init_seconds = {}
    for name in config.schemes:
        n_star = scan.per_scheme[name].n_star
        start = time.perf_counter()
        _context(config, SchemeKind(name), n_star)
        init_seconds[name] = time.perf_counter() - start

    payloads = [
        {
            "config": config.to_dict(),
            "scheme": name,
            "n_steps": scan.per_scheme[name].n_star,
            "seed": entry["seed"],
            "initial_coefficients": entry["initial_coefficients"],
        }
        for name in config.schemes
        for entry in entries
    ]
    outcomes = _pool_map(_optimize_seed_task, payloads, config.output.workers)

    results = {}
    trajectory_rows = []
    timing_rows = []
    for index, name in enumerate(config.schemes):
        scheme_outcomes = outcomes[index * len(entries):(index + 1) * len(entries)]
        offset = init_seconds[name] if config.output.include_initialization else 0.0
        per_seed = []
        for outcome in scheme_outcomes:
            if "error" in outcome:
                per_seed.append(outcome)
                continue
            seed = outcome["seed"]
            per_seed.append(
                {
                    "seed": seed,
                    "final_infidelity": outcome["final_infidelity"],
                    "converged": outcome["converged"],
                    "termination_reason": outcome["termination_reason"],
                    "total_exponentiations": outcome["trajectory"][-1][2],
                }
            )
            for (point, infid, cost), wall in zip(
                outcome["trajectory"], outcome["wall_times"]
            ):
                trajectory_rows.append((name, seed, point, infid, cost))
                timing_rows.append((name, seed, point, wall + offset))
        results[name] = {
            "n_star": scan.per_scheme[name].n_star,
            "dt_star": scan.per_scheme[name].dt_star,
            "initialization_seconds_included": config.output.include_initialization,
            "seeds": per_seed,
        }

    agreement = _cross_scheme_agreement(results)
    summary = {
        "target_error": config.race.target_error,
        "schemes": results,
        "cross_scheme_agreement": agreement,
    }
    # wall times go to the timing file only, so the summary and the
    # trajectory table stay deterministic
    _write_csv(
        run_dir / "race.csv",
        ["scheme", "seed", "iteration", "infidelity", "exponentiations"],
        trajectory_rows,
    )
    _write_csv(
        run_dir / "race_timing.csv",
        ["scheme", "seed", "iteration", "wall_seconds"],
        timing_rows,
    )
    _write_csv(
        run_dir / "race_envelope.csv",
        ["scheme", "exponentiations", "best_infidelity"],
        _pooled_envelope(trajectory_rows),
    )
    _dump_json(run_dir / "race.json", summary)
    return {"summary": summary}


def _pooled_envelope(trajectory_rows):
    """Best infidelity reached by any seed, as a function of spent cost."""
    out = []
    schemes = sorted({row[0] for row in trajectory_rows})
    for name in schemes:
        points = sorted(
            (row[4], row[3]) for row in trajectory_rows if row[0] == name
        )
        best = np.inf
        for cost, value in points:
            if value < best:
                best = value
                out.append((name, cost, value))
    return out


def _cross_scheme_agreement(results: dict) -> dict:
    """Max |F_a - F_b| over seeds converged under both schemes.

    Only seeds that hit the gradient tolerance count: their landing point
    is pinned to a stationary point of the shared continuous problem, so
    any scheme should reproduce it to discretization accuracy. Stalled
    seeds sit in flat basins where different schemes drift apart by orders
    of magnitude more than the discretization error, which would make the
    spread a statement about SLSQP's stall detection, not about the
    propagation schemes.
    """
    finished = {
        name: {
            s["seed"]: s["final_infidelity"]
            for s in info["seeds"]
            if "error" not in s and s["converged"]
        }
        for name, info in results.items()
    }
    names = sorted(finished)
    pairs = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = sorted(set(finished[a]) & set(finished[b]))
            spread = (
                max(abs(finished[a][s] - finished[b][s]) for s in common)
                if common
                else None
            )
            pairs[f"{a}/{b}"] = {
                "common_seeds": len(common),
                "max_infidelity_difference": spread,
            }
    return pairs


# ---------------------------------------------------------------------------
# initialization report


def report_initialization(config: BenchConfig, out_dir) -> dict:
    """Wall time of the b-independent setup work per scheme and step count.

    Exact schemes pay for basis-integral tables; node schemes only for
    basis evaluations at their quadrature nodes. The adaptive-quadrature
    validation pass is a constant-time diagnostic and is excluded here so
    the numbers reflect how the cost grows with the step count.
    """
    run_dir = run_directory(config, out_dir)
    params = config.chain_params()
    ansatz = config.ansatz()

    start = time.perf_counter()
    build_model(params)
    model_seconds = time.perf_counter() - start

    per_scheme: dict = {name: [] for name in config.schemes}
    for n_steps in config.scan_step_counts():
        grid = TimeGrid(config.pulse.duration, n_steps)
        times = grid.times()
        for name in config.schemes:
            scheme = SchemeKind(name)
            start = time.perf_counter()
            if scheme.exact_integrals:
                precompute_basis_integrals(
                    ansatz, grid, fourth_order=scheme.fourth_order, validate=False
                )
            elif scheme is SchemeKind.M2APPROX:
                basis_matrix(ansatz, times[:-1] + 0.5 * grid.dt)
            else:
                shift = np.sqrt(3.0) / 6.0
                basis_matrix(ansatz, times[:-1] + (0.5 - shift) * grid.dt)
                basis_matrix(ansatz, times[:-1] + (0.5 + shift) * grid.dt)
            per_scheme[name].append(
                {"n_steps": n_steps, "seconds": time.perf_counter() - start}
            )

    report = {"model_seconds": model_seconds, "per_scheme": per_scheme}
    _dump_json(run_dir / "init.json", report)
    return report


# ---------------------------------------------------------------------------
# gradient check


def run_gradcheck(config: BenchConfig, out_dir, n_instances: int = 10) -> dict:
    """Analytic-vs-finite-difference gradient audit on random instances.

    Each component must satisfy |g_an - g_fd| <= 1e-6 * max(|g_fd|_inf,
    |g_fd,i|); the margin reported is the worst ratio over all components.
    """
    run_dir = run_directory(config, out_dir)
    params = config.chain_params()
    ansatz = config.ansatz()
    model = build_model(params)
    rng = np.random.default_rng(config.seeds.rng_seed)
    eps = 1e-6
    worst = {name: 0.0 for name in config.schemes}
    for _ in range(n_instances):
        n_steps = int(rng.choice([16, 64]))
        b = rng.uniform(-1.0, 1.0, (ansatz.n_controls, ansatz.n_basis))
        grid = TimeGrid(config.pulse.duration, n_steps)
        caches = {}
        for name in config.schemes:
            scheme = SchemeKind(name)
            cache = None
            if scheme.exact_integrals:
                if scheme.fourth_order not in caches:
                    caches[scheme.fourth_order] = precompute_basis_integrals(
                        ansatz, grid, fourth_order=scheme.fourth_order,
                        validate=False,
                    )
                cache = caches[scheme.fourth_order]
            problem = _build_problem(config, scheme, n_steps, model, cache)
            analytic = gradient(problem, b).gradient
            fd = np.zeros_like(b)
            for k in range(b.shape[0]):
                for n in range(b.shape[1]):
                    up = b.copy()
                    up[k, n] += eps
                    down = b.copy()
                    down[k, n] -= eps
                    fd[k, n] = (
                        infidelity(problem, up) - infidelity(problem, down)
                    ) / (2 * eps)
            scale = 1e-6 * np.maximum(np.max(np.abs(fd)), np.abs(fd))
            margin = float(np.max(np.abs(analytic - fd) / scale))
            worst[name] = max(worst[name], margin)
    passed = all(margin <= 1.0 for margin in worst.values())
    report = {"worst_margin": worst, "passed": passed, "epsilon": eps}
    _dump_json(run_dir / "gradcheck.json", report)
    if not passed:
        raise BenchError(f"gradient check failed: {worst}")
    return report


# ---------------------------------------------------------------------------
# artifact loading for chained CLI stages


def load_archive(config: BenchConfig, out_dir) -> dict:
    path = run_directory(config, out_dir) / "archive.json"
    if not path.exists():
        raise ConfigError(
            f"no archive at {path}; run the seed-stage command first"
        )
    return json.loads(path.read_text())


def load_scan(config: BenchConfig, archive: dict, out_dir) -> ScanResult:
    """Rebuild a ScanResult from scan.csv and scan.json on disk."""
    run_dir = run_directory(config, out_dir)
    csv_path = run_dir / "scan.csv"
    json_path = run_dir / "scan.json"
    if not csv_path.exists() or not json_path.exists():
        raise ConfigError(
            f"no scan results in {run_dir}; run the dt-scan command first"
        )
    rows = []
    lines = csv_path.read_text().strip().splitlines()
    for line in lines[1:]:
        scheme, n_steps, dt, e_mean, e_min, e_max = line.split(",")
        rows.append(
            ScanRow(scheme, int(n_steps), float(dt), float(e_mean),
                    float(e_min), float(e_max))
        )
    summary = json.loads(json_path.read_text())
    per_scheme = {
        name: SchemeScan(**info) for name, info in summary["per_scheme"].items()
    }
    return ScanResult(rows=rows, per_scheme=per_scheme,
                      target_error=summary["target_error"])
