"""
End-to-end runs: build the bundle from a RunConfig, integrate the flow,
persist the trace, manifest and summary, and map the outcome to an exit code.
"""
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

from joblib import Parallel, delayed

from app.config import RunConfig, settings
from app.services.bundle import MetricField, ModelBundle, make_bundle, random_metric
from app.services.filtration import chern_weil_degree
from app.services.flow import FlowTrace, functional_gap, run_flow, terminal_summary
from app.services.geometry import make_geometry
from app.services import trace_store

logger = logging.getLogger(__name__)

EXIT_SUCCESS = 0
EXIT_CHECK_FAILED = 1
EXIT_NOT_CONVERGED = 2
EXIT_ABORTED = 3
EXIT_CONFIG_ERROR = 4

STATUS_EXIT_CODES = {
    "converged": EXIT_SUCCESS,
    "not_converged": EXIT_NOT_CONVERGED,
    "aborted": EXIT_ABORTED,
}


@dataclass
class RunResult:
    directory: str
    status: str
    exit_code: int
    trace: FlowTrace
    manifest: Dict


def build_bundle(config: RunConfig, n_grid: Optional[int] = None) -> ModelBundle:
    geometry = make_geometry(config.geometry.tau_complex, n_grid or config.geometry.n_grid)
    return make_bundle(geometry, config.bundle.degrees, config.bundle.cocycle, config.bundle.amplitude)


def initial_metric(bundle: ModelBundle, config: RunConfig) -> MetricField:
    """Seeded starting metric H0 exp(s); the background itself when magnitude is 0."""
    return random_metric(bundle, config.perturbation.seed, config.perturbation.magnitude)


def _manifest(config: RunConfig, bundle: ModelBundle, trace: FlowTrace, started: str, elapsed: float) -> Dict:
    manifest = {
        "artifact": settings.artifact_name,
        "version": settings.version,
        "config": config.model_dump(mode="json"),
        "calibration": {
            "background_exponent": bundle.background_exponent,
            "lambda_f0": list(bundle.lambda_f0),
        },
        "declared_hn_type": list(trace.hn.mu_vec),
        "wall_clock_seconds": elapsed,
        "started_utc": started,
        "status": trace.status,
        "terminal": terminal_summary(trace).to_dict() if trace.records else None,
    }
    if trace.status != "aborted" and trace.final_state is not None:
        manifest["functional_gap"] = functional_gap(trace.final_state)
    if trace.message:
        manifest["message"] = trace.message
    if trace.diagnostics:
        manifest["diagnostics"] = {
            key: float(value) if isinstance(value, (int, float)) else str(value)
            for key, value in trace.diagnostics.items()
        }
    return manifest


def _summary_lines(config: RunConfig, trace: FlowTrace) -> List[str]:
    lines = [
        f"{settings.artifact_name} {settings.version}",
        f"degrees={tuple(config.bundle.degrees)} cocycle={config.bundle.cocycle} "
        f"amplitude={config.bundle.amplitude} n_grid={config.geometry.n_grid} "
        f"tau={config.geometry.tau_complex}",
        f"status: {trace.status}" + (f" ({trace.message})" if trace.message else ""),
    ]
    if not trace.records:
        lines.append("no samples recorded")
        return lines

    summary = terminal_summary(trace)
    lines += [
        f"t_final = {summary.t:.6g}",
        f"Y(t_final) = {summary.Y:.6e}",
        f"||Lambda F||^2(t_final) = {summary.hym_energy:.10f}",
        f"Atiyah-Bott: inf ||Lambda F||^2 = {summary.inf_hym_energy:.10f} vs sup Phi(F)^2 = "
        f"{summary.phi_squared:.10f} (gap {summary.atiyah_bott_gap:.3e})",
        f"spectrum = {[round(value, 8) for value in summary.spectrum]} "
        f"HN type = {list(trace.hn.mu_vec)} (max gap {summary.spectrum_gap:.3e})",
        f"dominance: {'PASS' if summary.dominance else 'FAIL'}",
        f"inf P along the run = {summary.p_min:.10g}",
    ]
    return lines


def run(config: RunConfig, directory: Optional[str] = None) -> RunResult:
    """
    Run one flow and write its artifacts. The partial trace is written even
    when the flow aborts.
    """
    directory = directory or config.output.directory
    events = trace_store.EventLog(directory, config.perturbation.seed)
    started = trace_store.utc_now()
    clock = time.perf_counter()

    events.begin("build_bundle")
    bundle = build_bundle(config)
    metric = initial_metric(bundle, config)
    events.end("build_bundle", {"background_exponent": bundle.background_exponent})

    events.begin("flow")
    trace = run_flow(bundle, config.flow, metric)
    stage_extra = {"status": trace.status, "samples": len(trace.records)}
    if trace.status == "aborted":
        events.fail("flow", dict(stage_extra, message=trace.message))
    else:
        events.end("flow", stage_extra)

    events.begin("persist")
    trace_store.write_trace_csv(directory, trace)
    elapsed = time.perf_counter() - clock
    manifest = _manifest(config, bundle, trace, started, elapsed)
    trace_store.write_manifest(directory, manifest)
    trace_store.write_summary(directory, _summary_lines(config, trace))
    events.end("persist")

    exit_code = STATUS_EXIT_CODES[trace.status]
    logger.info(f"[RUN] {directory}: status={trace.status} exit={exit_code} ({elapsed:.1f}s)")
    return RunResult(directory, trace.status, exit_code, trace, manifest)


def _amplitude_dir(index: int, amplitude: float) -> str:
    return f"amp_{index:02d}_{amplitude:g}"


def _sweep_run(config: RunConfig, root: str, index: int, amplitude: float) -> RunResult:
    run_config = config.model_copy(
        update={"bundle": config.bundle.model_copy(update={"amplitude": float(amplitude)})}
    )
    return run(run_config, os.path.join(root, _amplitude_dir(index, amplitude)))


def sweep(config: RunConfig, n_jobs: Optional[int] = None) -> List[RunResult]:
    """
    One run per amplitude of ``sweep.amplitudes`` under the output directory.

    Runs execute in a process pool and each owns its directory; index.json
    is written once after all of them finished.
    """
    amplitudes = config.sweep.amplitudes
    if not amplitudes:
        raise ValueError("sweep needs sweep.amplitudes")

    root = config.output.directory
    n_jobs = settings.sweep_jobs if n_jobs is None else n_jobs
    logger.info(f"[RUN] sweep of {len(amplitudes)} amplitudes with n_jobs={n_jobs}")
    results = Parallel(n_jobs=n_jobs)(
        delayed(_sweep_run)(config, root, index, amplitude) for index, amplitude in enumerate(amplitudes)
    )

    entries = []
    for index, (amplitude, result) in enumerate(zip(amplitudes, results)):
        name = _amplitude_dir(index, amplitude)
        entries.append({
            "run": name,
            "amplitude": float(amplitude),
            "directory": name,
            "status": result.status,
            "exit_code": result.exit_code,
            "terminal": result.manifest.get("terminal"),
        })
    trace_store.write_index(root, entries)
    return list(results)


def combined_exit_code(results: List[RunResult]) -> int:
    return max((result.exit_code for result in results), default=EXIT_SUCCESS)


@dataclass(frozen=True)
class DiscretizationStudy:
    n_coarse: int
    n_fine: int
    error_coarse: float
    error_fine: float

    @property
    def ratio(self) -> float:
        return self.error_coarse / self.error_fine if self.error_fine > 0 else math.inf


def flag_degree_error(bundle: ModelBundle, metric: MetricField) -> float:
    """Largest |Chern-Weil deg(S^s) - (d_1 + ... + d_s)| over the proper standard flags."""
    worst = 0.0
    running = 0
    for size in range(1, bundle.rank):
        running += bundle.degrees[size - 1]
        worst = max(worst, abs(chern_weil_degree(metric, size) - running))
    return worst


def discretization_study(config: RunConfig, magnitude: Optional[float] = None) -> DiscretizationStudy:
    """
    Chern-Weil flag degree error at n_grid and 2 n_grid for the same seeded
    metric. The random modes are capped at n_grid / 8 so both grids sample
    one smooth field.
    """
    n = config.geometry.n_grid
    if magnitude is None:
        magnitude = config.perturbation.magnitude or 0.5
    errors = []
    for n_grid in (n, 2 * n):
        bundle = build_bundle(config, n_grid)
        metric = random_metric(bundle, config.perturbation.seed, magnitude, max_mode=n // 8)
        errors.append(flag_degree_error(bundle, metric))
        logger.info(f"[RUN] discretization n_grid={n_grid} flag degree error={errors[-1]:.3e}")
    return DiscretizationStudy(n, 2 * n, errors[0], errors[1])
