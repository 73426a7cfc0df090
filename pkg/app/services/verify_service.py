"""
Invariant battery for one configuration.

Every check measures a worst-case value over seeded random metrics and
compares it with a tolerance from ``settings``. Fault injection replaces
a check's tolerance with -1 so that it must fail.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from app.config import RunConfig, settings
from app.exceptions import ConfigError
from app.services.bundle import MetricField, ModelBundle, degree, random_metric
from app.services.filtration import (
    FiltrationSpec,
    best_phi_squared,
    declared_filtration,
    dominance_leq,
    hn_type_bruteforce,
    phi_squared,
    projection,
    psi,
    psi_squared_identity,
    trace_residual,
)
from app.services.flow import path_independence_check
from app.services.run_service import build_bundle, flag_degree_error
from app.utils.hermitian import dagger, trace

logger = logging.getLogger(__name__)

# Perturbation size of the random metrics used by the battery
VERIFY_MAGNITUDE = 1.0
PATH_MAGNITUDE = 0.5


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.value <= self.tolerance

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        text = f"[{verdict}] {self.name}: {self.value:.3e} (tolerance {self.tolerance:.1e})"
        return text + (f" {self.detail}" if self.detail else "")


@dataclass
class VerifyContext:
    bundle: ModelBundle
    hn: FiltrationSpec
    metrics: List[MetricField]
    seed: int


def _projection_axioms(ctx: VerifyContext) -> float:
    worst = 0.0
    for metric in ctx.metrics:
        H = metric.H
        for size in range(1, ctx.bundle.rank + 1):
            pi = projection(metric, size).data
            h_pi = H @ pi
            worst = max(
                worst,
                float(np.max(np.abs(pi @ pi - pi))),
                float(np.max(np.abs(h_pi - dagger(h_pi)))),
                float(np.max(np.abs(trace(pi) - size))),
            )
    return worst


def _psi_squared(ctx: VerifyContext) -> float:
    return max(psi_squared_identity(metric, ctx.hn) for metric in ctx.metrics)


def _trace_psi(ctx: VerifyContext) -> float:
    return max(trace_residual(psi(metric, ctx.hn), ctx.bundle.total_degree) for metric in ctx.metrics)


def _psi_norm(ctx: VerifyContext) -> float:
    geo = ctx.bundle.geometry
    expected = phi_squared(ctx.hn)
    worst = 0.0
    for metric in ctx.metrics:
        data = psi(metric, ctx.hn).data
        value = float(geo.quadrature(trace(data @ data)).real)
        worst = max(worst, abs(value - expected))
    return worst


def _degree(ctx: VerifyContext) -> float:
    return max(abs(degree(ctx.bundle, metric) - ctx.bundle.total_degree) for metric in ctx.metrics)


def _chern_weil(ctx: VerifyContext) -> float:
    return max(flag_degree_error(ctx.bundle, metric) for metric in ctx.metrics)


def _path_independence(ctx: VerifyContext) -> float:
    worst = 0.0
    for k in range(settings.verify_paths):
        target = random_metric(ctx.bundle, ctx.seed + 100 + k, PATH_MAGNITUDE)
        check = path_independence_check(target, ctx.hn, nodes=settings.path_nodes, detour_seed=ctx.seed + 200 + k)
        worst = max(worst, check.residual)
    return worst


def _random_fixed_sum(rng: np.random.Generator, length: int) -> List[Fraction]:
    values = [Fraction(int(v), 4) for v in rng.integers(-12, 13, size=length - 1)]
    values.append(-sum(values, Fraction(0)))
    return sorted(values, reverse=True)


def _dominance_properties(ctx: VerifyContext) -> float:
    """Number of reflexivity, antisymmetry or transitivity violations."""
    rng = np.random.default_rng(ctx.seed)
    length = max(ctx.bundle.rank, 2)
    violations = 0
    for _ in range(settings.dominance_samples):
        a, b, c = (_random_fixed_sum(rng, length) for _ in range(3))
        fa, fb, fc = ([float(v) for v in vec] for vec in (a, b, c))
        ab = dominance_leq(fa, fb)
        ba = dominance_leq(fb, fa)
        if not dominance_leq(fa, fa):
            violations += 1
        if ab and ba and a != b:
            violations += 1
        if ab and dominance_leq(fb, fc) and not dominance_leq(fa, fc):
            violations += 1
    return float(violations)


def _hn_agreement(ctx: VerifyContext) -> float:
    """Metrics where the brute-force HN type or the best Phi^2 flag disagrees with the declared data."""
    mismatches = 0
    declared = np.asarray(ctx.bundle.hn_type)
    rank = ctx.bundle.rank
    flag_degrees = {0: 0}
    running = 0
    for size, d in enumerate(ctx.bundle.degrees, start=1):
        running += d
        flag_degrees[size] = running
    _, best = best_phi_squared(flag_degrees, rank)
    if abs(best - phi_squared(ctx.hn)) > settings.slope_tolerance:
        mismatches += 1
    for metric in ctx.metrics:
        found = np.asarray(hn_type_bruteforce(ctx.bundle, metric).mu_vec)
        if np.max(np.abs(found - declared)) > settings.slope_tolerance:
            mismatches += 1
    return float(mismatches)


CHECKS: Dict[str, Callable[[VerifyContext], float]] = {
    "projection_axioms": _projection_axioms,
    "psi_squared_identity": _psi_squared,
    "trace_psi": _trace_psi,
    "psi_norm_metric_independence": _psi_norm,
    "degree_metric_independence": _degree,
    "chern_weil_flag_degrees": _chern_weil,
    "path_independence": _path_independence,
    "dominance_order_properties": _dominance_properties,
    "hn_type_agreement": _hn_agreement,
}


def check_tolerances() -> Dict[str, float]:
    return {
        "projection_axioms": settings.projection_tolerance,
        "psi_squared_identity": settings.psi_identity_tolerance,
        "trace_psi": settings.psi_identity_tolerance,
        "psi_norm_metric_independence": settings.psi_norm_tolerance,
        "degree_metric_independence": settings.degree_tolerance,
        "chern_weil_flag_degrees": settings.chern_weil_tolerance,
        "path_independence": settings.path_tolerance,
        "dominance_order_properties": 0.0,
        "hn_type_agreement": 0.0,
    }


def verify(config: RunConfig, inject_fault: Sequence[str] = (), only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """
    Run the invariant battery.

    Args:
        config: Run configuration; geometry, bundle and perturbation seed are used
        inject_fault: Check names whose tolerance is forced to -1
        only: Restrict the battery to these check names

    Returns:
        One CheckResult per executed check, in battery order
    """
    unknown = [name for name in list(inject_fault) + list(only or []) if name not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown verify check(s): {', '.join(unknown)} (expected one of {', '.join(CHECKS)})")

    bundle = build_bundle(config)
    seed = config.perturbation.seed
    ctx = VerifyContext(
        bundle=bundle,
        hn=declared_filtration(bundle),
        metrics=[MetricField.background(bundle)] + [
            random_metric(bundle, seed + k, VERIFY_MAGNITUDE) for k in range(settings.verify_metrics)
        ],
        seed=seed,
    )

    tolerances = check_tolerances()
    results = []
    for name, check in CHECKS.items():
        if only and name not in only:
            continue
        tolerance = -1.0 if name in inject_fault else tolerances[name]
        value = check(ctx)
        result = CheckResult(name, value, tolerance, "(fault injected)" if name in inject_fault else "")
        logger.info(f"[VERIFY] {result.line()}")
        results.append(result)
    return results


def all_passed(results: Sequence[CheckResult]) -> bool:
    return all(result.passed for result in results)
