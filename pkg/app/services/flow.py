"""
Donaldson heat flow, the gauge-equivalent Yang-Mills flow, and the
functionals and monitors evaluated along them.

Donaldson picture: fixed holomorphic structure d-bar_0, evolving metric
H = H0 h with h^-1 dh/dt = -(Lambda F - mu I).

Yang-Mills picture: fixed metric H0, evolving structure
A'' = w A0'' w^-1 - (d-bar w) w^-1 with w = h^(1/2).

Time stepping is exponential Euler in the fiber. With K = Lambda F - mu I
(self-adjoint for H) the update is written in the H0-unitary frame as

    h_hat' = h_hat^(1/2) exp(-dt M) h_hat^(1/2),   M = h_hat^(1/2) K_hat h_hat^(-1/2)

which keeps h_hat Hermitian positive-definite for any dt. Along that
exponential segment h^-1 dh/ds = -K exactly, so the P and M integrands
are evaluated at the segment midpoint.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import roots_legendre

from app.config import FlowConfig
from app.exceptions import MetricDegenerateError, NumericalAbort, StepRejectedError
from app.services.bundle import (
    CurvaturePack,
    MetricField,
    ModelBundle,
    curvature,
    random_metric,
    structure_curvature,
)
from app.services.filtration import (
    FiltrationSpec,
    declared_filtration,
    dominance_leq,
    phi_squared,
    projections,
    psi,
    psi_potential,
    second_fundamental_form_norm,
)
from app.services.geometry import ZERO_ONE, GridField, grid_integral, l2_norm_sq
from app.utils.hermitian import expm_h, hermitian_part, logm_h, real_spectrum, trace

logger = logging.getLogger(__name__)

MAX_HALVINGS = 10
JUMP_FACTOR = 10.0
STABILITY_FACTOR = 0.5

# Below this scale both sides of the energy identity count as zero
ENERGY_FLOOR = 1e-12


def _integral(values: np.ndarray, bundle: ModelBundle) -> float:
    return float(grid_integral(values, bundle.geometry).real)


def _mu_identity(bundle: ModelBundle) -> np.ndarray:
    return bundle.slope * bundle.identity()


def _sup_spectral(a: np.ndarray) -> float:
    """Largest pointwise |eigenvalue| of a field that is self-adjoint for some metric."""
    return float(np.max(np.abs(np.linalg.eigvals(a))))


@dataclass(frozen=True, eq=False)
class _Snapshot:
    lam: np.ndarray
    pis: Dict[int, GridField]
    psi: np.ndarray
    velocity: np.ndarray
    hym_energy: float
    y_value: float


@dataclass(frozen=True, eq=False)
class FlowState:
    """One point of the Donaldson flow with its accumulated functionals."""

    metric: MetricField
    hn: FiltrationSpec
    t: float = 0.0
    p_acc: float = 0.0
    m_acc: float = 0.0
    steps: int = 0
    previous_hym: Optional[float] = None
    last_dt: Optional[float] = None
    mid_dissipation: Optional[float] = None

    @classmethod
    def initial(cls, metric: MetricField, hn: Optional[FiltrationSpec] = None) -> "FlowState":
        return cls(metric, hn or declared_filtration(metric.bundle))

    @property
    def bundle(self) -> ModelBundle:
        return self.metric.bundle

    @cached_property
    def curvature(self) -> CurvaturePack:
        return curvature(self.metric)

    @cached_property
    def w_hat(self) -> np.ndarray:
        return expm_h(0.5 * self.metric.log_h)

    @cached_property
    def w(self) -> np.ndarray:
        """h^(1/2) in the holomorphic frame."""
        return self.bundle.from_unitary(self.w_hat)

    @cached_property
    def w_inv(self) -> np.ndarray:
        return self.bundle.from_unitary(expm_h(-0.5 * self.metric.log_h))

    @cached_property
    def snapshot(self) -> _Snapshot:
        bundle = self.bundle
        lam = self.curvature.LambdaF.data
        pis = projections(self.metric, self.hn.flags)
        psi_data = psi(self.metric, self.hn, pis).data
        residual = lam - psi_data
        return _Snapshot(
            lam=lam,
            pis=pis,
            psi=psi_data,
            velocity=lam - _mu_identity(bundle),
            hym_energy=_integral(trace(lam @ lam).real, bundle),
            y_value=_integral(trace(residual @ residual).real, bundle),
        )

    @property
    def hym_energy(self) -> float:
        return self.snapshot.hym_energy

    @property
    def y_value(self) -> float:
        return self.snapshot.y_value


@dataclass(frozen=True, eq=False)
class YMConnection:
    """
    Structure d-bar + v dz-bar paired with the fixed background metric H0.

    A connection reached from the Donaldson flow keeps its complex gauge
    ``gauge`` = w, with v = w u w^-1 - (d-bar w) w^-1. Its curvature is
    then w F(H0 w^*0 w) w^-1, the pull-back through the same stencils the
    Donaldson side uses. ``curvature`` is always the form built from v
    alone; direct Yang-Mills steps work with that one and carry no gauge.
    """

    bundle: ModelBundle
    dbar_form: np.ndarray
    t: float = 0.0
    gauge: Optional[np.ndarray] = None

    @cached_property
    def curvature(self) -> CurvaturePack:
        bundle = self.bundle
        return structure_curvature(bundle, bundle.identity(), self.dbar_form, bundle.background_metric)

    @cached_property
    def lambda_f(self) -> np.ndarray:
        if self.gauge is None:
            return self.curvature.LambdaF.data
        bundle = self.bundle
        w = self.gauge
        h = bundle.h0_adjoint(w) @ w
        pulled = structure_curvature(bundle, h, bundle.cocycle.data, bundle.background_metric @ h)
        return w @ pulled.LambdaF.data @ np.linalg.inv(w)

    @property
    def ym_energy(self) -> float:
        lam = self.lambda_f
        return _integral(trace(lam @ lam).real, self.bundle)

    def without_gauge(self) -> "YMConnection":
        return YMConnection(self.bundle, self.dbar_form, self.t)


@dataclass
class TraceRecord:
    t: float
    dt: float
    ym_energy: float
    hym_energy: float
    Y: float
    P: float
    M: float
    sff: Dict[int, float]
    spectrum: Tuple[float, ...]
    keyineq_slack: float
    sff_slack: Dict[int, float]
    lower_bound_slack: float
    energy_decay_residual: float
    gauge_residual: float
    ym_psi_residual: float

    def to_row(self) -> Dict[str, float]:
        row = {
            "t": self.t,
            "dt": self.dt,
            "ym_energy": self.ym_energy,
            "hym_energy": self.hym_energy,
            "Y": self.Y,
            "P": self.P,
            "M": self.M,
        }
        for size, value in sorted(self.sff.items()):
            row[f"sff_{size}"] = value
        for k, value in enumerate(self.spectrum, start=1):
            row[f"spec_{k}"] = value
        row["keyineq_slack"] = self.keyineq_slack
        for size, value in sorted(self.sff_slack.items()):
            row[f"sff_slack_{size}"] = value
        row["lower_bound_slack"] = self.lower_bound_slack
        row["energy_decay_residual"] = self.energy_decay_residual
        row["gauge_residual"] = self.gauge_residual
        row["ym_psi_residual"] = self.ym_psi_residual
        return row


def trace_columns(hn: FiltrationSpec) -> List[str]:
    """Fixed column order of a trace for the given HN filtration."""
    columns = ["t", "dt", "ym_energy", "hym_energy", "Y", "P", "M"]
    columns += [f"sff_{s}" for s in hn.proper_flags]
    columns += [f"spec_{k}" for k in range(1, hn.rank + 1)]
    columns += ["keyineq_slack"]
    columns += [f"sff_slack_{s}" for s in hn.proper_flags]
    columns += ["lower_bound_slack", "energy_decay_residual", "gauge_residual", "ym_psi_residual"]
    return columns


@dataclass
class FlowTrace:
    """Samples of one flow run, in strictly increasing time."""

    hn: FiltrationSpec
    epsilon: float
    records: List[TraceRecord] = field(default_factory=list)
    status: str = "running"
    message: str = ""
    diagnostics: Dict[str, float] = field(default_factory=dict)
    final_state: Optional[FlowState] = None

    @property
    def columns(self) -> List[str]:
        return trace_columns(self.hn)

    @property
    def last(self) -> Optional[TraceRecord]:
        return self.records[-1] if self.records else None

    def append(self, record: TraceRecord) -> None:
        if self.records and record.t <= self.records[-1].t:
            raise ValueError(f"trace times must increase strictly: {record.t} after {self.records[-1].t}")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([record.to_row()[name] for record in self.records])


# ---------------------------------------------------------------------------
# Donaldson heat flow
# ---------------------------------------------------------------------------

def _advance(metric: MetricField, velocity: np.ndarray, step: float) -> MetricField:
    """Exponential-Euler move h -> h exp(-step K) done in the unitary frame."""
    bundle = metric.bundle
    root = expm_h(0.5 * metric.log_h)
    inv_root = expm_h(-0.5 * metric.log_h)
    generator = hermitian_part(root @ bundle.to_unitary(velocity) @ inv_root)
    h_hat = root @ expm_h(-step * generator) @ root
    return MetricField(bundle, logm_h(h_hat))


@dataclass(frozen=True)
class StepIncrement:
    p: float
    m: float
    dissipation: float
    lambda_sup: float


def _midpoint_increment(state: FlowState, dt: float) -> StepIncrement:
    bundle = state.bundle
    velocity = state.snapshot.velocity
    mid = _advance(state.metric, velocity, 0.5 * dt)
    curv = curvature(mid)
    lam = curv.LambdaF.data
    psi_mid = psi(mid, state.hn).data

    p = -dt * _integral(trace((lam - psi_mid) @ velocity).real, bundle)
    m = -dt * _integral(trace((lam - _mu_identity(bundle)) @ velocity).real, bundle)
    gradient = GridField(curv.d_bar_end(lam), bundle.weights, ZERO_ONE)
    dissipation = l2_norm_sq(gradient, bundle.geometry, mid.H)
    return StepIncrement(p=p, m=m, dissipation=dissipation, lambda_sup=_sup_spectral(lam))


def p_increment(state: FlowState, dt: float) -> float:
    """Midpoint-rule increment of P(H0, H) over one Donaldson step."""
    return _midpoint_increment(state, dt).p


def donaldson_functional_increment(state: FlowState, dt: float) -> float:
    """Midpoint-rule increment of the Donaldson functional M over one step."""
    return _midpoint_increment(state, dt).m


def stable_dt(state: FlowState, dt: float) -> float:
    """dt capped by 0.5 / ||Lambda F - mu I||_inf."""
    sup = _sup_spectral(state.snapshot.velocity)
    if sup > 0:
        return min(dt, STABILITY_FACTOR / sup)
    return dt


def donaldson_step(state: FlowState, dt: float) -> FlowState:
    """
    One exponential-Euler step of h^-1 dh/dt = -(Lambda F - mu I).

    The step is halved (at most 10 times) when the midpoint curvature jumps
    by more than 10x in sup-norm or the midpoint metric degenerates.

    Raises:
        StepRejectedError: no acceptable step after the last halving
    """
    if dt <= 0:
        raise ValueError("dt must be positive")

    dt = stable_dt(state, dt)
    base = max(_sup_spectral(state.snapshot.lam), ENERGY_FLOOR)

    for attempt in range(MAX_HALVINGS + 1):
        try:
            increment = _midpoint_increment(state, dt)
        except MetricDegenerateError as exc:
            logger.warning(f"[WARN] degenerate midpoint metric at t={state.t:.6g} dt={dt:.3g}: {exc}")
            dt *= 0.5
            continue

        if increment.lambda_sup > JUMP_FACTOR * base:
            logger.warning(
                f"[WARN] step rejected at t={state.t:.6g} dt={dt:.3g}: "
                f"|Lambda F| {base:.3g} -> {increment.lambda_sup:.3g}"
            )
            dt *= 0.5
            continue

        metric = _advance(state.metric, state.snapshot.velocity, dt)
        logger.debug(f"[FLOW] step {state.steps + 1} t={state.t + dt:.6g} dt={dt:.3g} attempts={attempt + 1}")
        return FlowState(
            metric=metric,
            hn=state.hn,
            t=state.t + dt,
            p_acc=state.p_acc + increment.p,
            m_acc=state.m_acc + increment.m,
            steps=state.steps + 1,
            previous_hym=state.hym_energy,
            last_dt=dt,
            mid_dissipation=increment.dissipation,
        )

    raise StepRejectedError(
        f"time step rejected after {MAX_HALVINGS} halvings",
        {"t": state.t, "dt": dt, "lambda_sup": base},
    )


# ---------------------------------------------------------------------------
# Yang-Mills side
# ---------------------------------------------------------------------------

def _gauge_act(bundle: ModelBundle, w: np.ndarray, w_inv: np.ndarray, v: np.ndarray) -> np.ndarray:
    """w v w^-1 - (d-bar w) w^-1."""
    return w @ v @ w_inv - bundle.d_bar(w) @ w_inv


def ym_gauge_update(state: FlowState) -> YMConnection:
    """Yang-Mills connection obtained from the Donaldson solution through w = h^(1/2)."""
    bundle = state.bundle
    v = _gauge_act(bundle, state.w, state.w_inv, bundle.cocycle.data)
    return YMConnection(bundle, v, state.t, gauge=state.w)


def _h0_norm(bundle: ModelBundle, data: np.ndarray, form: str) -> float:
    value = l2_norm_sq(GridField(data, bundle.weights, form), bundle.geometry, bundle.background_metric)
    return math.sqrt(max(value, 0.0))


def gauge_residual(state: FlowState, connection: Optional[YMConnection] = None) -> float:
    """||F_A - w F w^-1|| in L2 with the background metric."""
    bundle = state.bundle
    connection = connection or ym_gauge_update(state)
    ym_lam = connection.lambda_f
    conjugated = state.w @ state.snapshot.lam @ state.w_inv
    # ||F||^2 = ||Lambda F||^2 on a curve
    return _h0_norm(bundle, ym_lam - conjugated, "0")


def ym_psi(state: FlowState) -> Tuple[GridField, float]:
    """Psi in the Yang-Mills picture, w Psi w^-1, and its H0-self-adjointness residual."""
    bundle = state.bundle
    data = state.w @ state.snapshot.psi @ state.w_inv
    residual = float(np.max(np.abs(data - bundle.h0_adjoint(data))))
    return bundle.end_field(data), residual


def _ym_euler(connection: YMConnection, dt: float) -> np.ndarray:
    # d/dt A'' = (1/2) d-bar_A Lambda F_A in this normalization
    lam = connection.curvature.LambdaF.data
    return connection.dbar_form + 0.5 * dt * connection.curvature.d_bar_end(lam)


def ym_direct_step(connection: YMConnection, dt: float) -> YMConnection:
    """
    Explicit Euler step of the Yang-Mills flow at fixed H0.

    Only the (0,1) part is stored; the (1,0) part follows from metric
    compatibility with H0.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")

    bundle = connection.bundle
    base = max(_sup_spectral(connection.curvature.LambdaF.data), ENERGY_FLOOR)
    for _ in range(MAX_HALVINGS + 1):
        candidate = YMConnection(bundle, _ym_euler(connection, dt), connection.t + dt)
        jump = _sup_spectral(candidate.curvature.LambdaF.data)
        if jump <= JUMP_FACTOR * base:
            return candidate
        logger.warning(f"[WARN] Yang-Mills step rejected at dt={dt:.3g}: |Lambda F| {base:.3g} -> {jump:.3g}")
        dt *= 0.5

    raise StepRejectedError(
        f"Yang-Mills step rejected after {MAX_HALVINGS} halvings",
        {"t": connection.t, "dt": dt},
    )


def _ym_gauge_route(connection: YMConnection, dt: float) -> np.ndarray:
    bundle = connection.bundle
    velocity_hat = bundle.to_unitary(connection.curvature.LambdaF.data - _mu_identity(bundle))
    w = bundle.from_unitary(expm_h(-0.5 * dt * velocity_hat))
    w_inv = bundle.from_unitary(expm_h(0.5 * dt * velocity_hat))
    return _gauge_act(bundle, w, w_inv, connection.dbar_form)


@dataclass(frozen=True)
class YMCrossCheck:
    dt: float
    error_full: float
    error_half: float

    @property
    def ratio(self) -> float:
        return self.error_full / self.error_half if self.error_half > 0 else math.inf


def ym_cross_check(state: FlowState, dt: float) -> YMCrossCheck:
    """
    Compare the direct Yang-Mills step with the gauge route from the same
    connection at dt and dt/2. The gap is O(dt^2), so the ratio is near 4.
    """
    connection = ym_gauge_update(state)
    bundle = state.bundle

    def gap(step: float) -> float:
        difference = _ym_euler(connection, step) - _ym_gauge_route(connection, step)
        return _h0_norm(bundle, difference, ZERO_ONE)

    return YMCrossCheck(dt=dt, error_full=gap(dt), error_half=gap(0.5 * dt))


# ---------------------------------------------------------------------------
# P-functional along separately parameterized paths
# ---------------------------------------------------------------------------

def _segment_p(start: MetricField, end: MetricField, hn: FiltrationSpec, nodes: int) -> float:
    """P along h_hat(s) = R exp(s G) R, R = h_a^(1/2), which ends at h_b."""
    bundle = start.bundle
    root = expm_h(0.5 * start.log_h)
    inv_root = expm_h(-0.5 * start.log_h)
    generator = logm_h(hermitian_part(inv_root @ end.h_hat @ inv_root))
    # h^-1 dh/ds is constant along the segment
    velocity = bundle.from_unitary(inv_root @ generator @ root)

    points, weights = roots_legendre(nodes)
    total = 0.0
    for point, weight in zip(points, weights):
        s = 0.5 * (point + 1.0)
        metric = MetricField(bundle, logm_h(root @ expm_h(s * generator) @ root))
        lam = curvature(metric).LambdaF.data
        psi_data = psi(metric, hn).data
        total += 0.5 * weight * _integral(trace((lam - psi_data) @ velocity).real, bundle)
    return total


@dataclass(frozen=True)
class PathCheck:
    direct: float
    detour: float

    @property
    def residual(self) -> float:
        return abs(self.direct - self.detour)


def path_independence_check(
    target: MetricField,
    hn: Optional[FiltrationSpec] = None,
    nodes: int = 64,
    detour_seed: int = 1,
    detour_magnitude: float = 0.25,
) -> PathCheck:
    """
    P(H0, H_target) along the geodesic from H0 and along a two-segment
    path through a perturbed midpoint H0 exp(L/2 + s).
    """
    bundle = target.bundle
    hn = hn or declared_filtration(bundle)
    start = MetricField.background(bundle)

    perturbation = random_metric(bundle, detour_seed, detour_magnitude)
    waypoint = MetricField(bundle, 0.5 * target.log_h + perturbation.log_h)

    direct = _segment_p(start, target, hn, nodes)
    detour = _segment_p(start, waypoint, hn, nodes) + _segment_p(waypoint, target, hn, nodes)
    logger.debug(f"[PATH] direct={direct:.12g} detour={detour:.12g}")
    return PathCheck(direct=direct, detour=detour)


def functional_gap(state: FlowState) -> float:
    """
    P - M in closed form, mu * integral log det h - psi_potential, compared
    with the accumulated values. Returns the absolute mismatch.
    """
    bundle = state.bundle
    _, logdet = np.linalg.slogdet(state.metric.h_hat)
    closed = bundle.slope * _integral(logdet, bundle) - psi_potential(state.metric, state.hn)
    return abs((state.p_acc - state.m_acc) - closed)


# ---------------------------------------------------------------------------
# Monitors
# ---------------------------------------------------------------------------

def key_inequality_monitor(state: FlowState) -> float:
    """2 * integral Tr((Lambda F - Psi)(Lambda F - mu I)) - ||Lambda F - Psi||^2."""
    snap = state.snapshot
    cross = _integral(trace((snap.lam - snap.psi) @ snap.velocity).real, state.bundle)
    return 2.0 * cross - snap.y_value


def _pointwise_abs_integral(state: FlowState) -> float:
    residual = state.snapshot.lam - state.snapshot.psi
    pointwise = np.sqrt(np.maximum(trace(residual @ residual).real, 0.0))
    return _integral(pointwise, state.bundle)


def sff_norms(state: FlowState) -> Dict[int, float]:
    snap = state.snapshot
    return {s: second_fundamental_form_norm(state.metric, s, snap.pis[s]) for s in state.hn.proper_flags}


def sff_bound_monitor(state: FlowState, norms: Optional[Dict[int, float]] = None) -> Dict[int, float]:
    """Per HN flag: integral of |Lambda F - Psi| minus ||d-bar pi||^2."""
    norms = norms if norms is not None else sff_norms(state)
    bound = _pointwise_abs_integral(state)
    return {s: bound - value for s, value in norms.items()}


def sff_l2_monitor(state: FlowState, norms: Optional[Dict[int, float]] = None) -> Dict[int, float]:
    """Per HN flag: s * Y - ||d-bar pi||^4."""
    norms = norms if norms is not None else sff_norms(state)
    return {s: s * state.y_value - value ** 2 for s, value in norms.items()}


def lower_bound_monitor(state: FlowState) -> float:
    """||Lambda F||^2 - ||Psi||^2."""
    snap = state.snapshot
    psi_norm = _integral(trace(snap.psi @ snap.psi).real, state.bundle)
    return snap.hym_energy - psi_norm


def energy_decay_monitor(state: FlowState) -> float:
    """
    Relative mismatch between the finite-difference rate of ||Lambda F||^2
    over the last step and -2 ||d-bar_A Lambda F||^2 at its midpoint.
    NaN before the first step.
    """
    if state.previous_hym is None or not state.last_dt:
        return math.nan
    rate = (state.hym_energy - state.previous_hym) / state.last_dt
    expected = -2.0 * state.mid_dissipation
    scale = max(abs(rate), abs(expected))
    if scale < ENERGY_FLOOR:
        return 0.0
    return abs(rate - expected) / scale


def averaged_spectrum(state: FlowState) -> Tuple[float, ...]:
    """Sorted pointwise eigenvalues of Lambda F, averaged over the torus."""
    bundle = state.bundle
    eigenvalues = real_spectrum(bundle.to_unitary(state.snapshot.lam), state.metric.h_hat)
    averaged = bundle.geometry.quadrature(eigenvalues)
    return tuple(float(value) for value in averaged)


def sample_record(state: FlowState, dt: float) -> TraceRecord:
    """Evaluate every monitor at the current state."""
    snap = state.snapshot
    connection = ym_gauge_update(state)
    norms = sff_norms(state)
    return TraceRecord(
        t=state.t,
        dt=dt,
        ym_energy=connection.ym_energy,
        hym_energy=snap.hym_energy,
        Y=snap.y_value,
        P=state.p_acc,
        M=state.m_acc,
        sff=norms,
        spectrum=averaged_spectrum(state),
        keyineq_slack=key_inequality_monitor(state),
        sff_slack=sff_bound_monitor(state, norms),
        lower_bound_slack=lower_bound_monitor(state),
        energy_decay_residual=energy_decay_monitor(state),
        gauge_residual=gauge_residual(state, connection),
        ym_psi_residual=ym_psi(state)[1],
    )


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def run_flow(
    bundle: ModelBundle,
    config: FlowConfig,
    initial: Optional[MetricField] = None,
    on_sample: Optional[Callable[[TraceRecord], None]] = None,
) -> FlowTrace:
    """
    Integrate the Donaldson flow to t_end or until Y(t) < epsilon.

    Numerical aborts are caught: the trace keeps what was sampled, with
    status "aborted" and the diagnostics of the failure.
    """
    state = FlowState.initial(initial or MetricField.background(bundle))
    trace_out = FlowTrace(hn=state.hn, epsilon=config.epsilon)
    last_sampled = -1
    dt_used = config.dt

    logger.info(
        f"[FLOW] start degrees={bundle.degrees} dt={config.dt} t_end={config.t_end} epsilon={config.epsilon}"
    )

    def sample(current: FlowState) -> None:
        nonlocal last_sampled
        if current.steps == last_sampled:
            return
        record = sample_record(current, dt_used)
        trace_out.append(record)
        last_sampled = current.steps
        if on_sample is not None:
            on_sample(record)
        logger.debug(f"[FLOW] t={record.t:.6g} Y={record.Y:.6g} |LF|^2={record.hym_energy:.10g} P={record.P:.6g}")

    try:
        while True:
            converged = state.y_value < config.epsilon
            finished = state.t >= config.t_end - 1e-12
            if state.steps % config.sample_every == 0 or converged or finished:
                sample(state)
            if converged:
                trace_out.status = "converged"
                break
            if finished:
                trace_out.status = "not_converged"
                break
            state = donaldson_step(state, min(config.dt, config.t_end - state.t))
            dt_used = state.last_dt
    except NumericalAbort as exc:
        trace_out.status = "aborted"
        trace_out.message = str(exc)
        trace_out.diagnostics = dict(exc.diagnostics, t=state.t)
        logger.error(f"[ERROR] flow aborted at t={state.t:.6g}: {exc}")

    trace_out.final_state = state
    if trace_out.status == "converged":
        logger.info(f"[OK] converged at t={state.t:.6g} with Y={state.y_value:.3g}")
    elif trace_out.status == "not_converged":
        trace_out.message = f"Y(t_end) = {state.y_value:.6g} >= epsilon = {config.epsilon:g}"
        logger.warning(f"[WARN] not converged by t_end={config.t_end}: {trace_out.message}")
    return trace_out


@dataclass(frozen=True)
class TerminalSummary:
    t: float
    Y: float
    hym_energy: float
    inf_hym_energy: float
    spectrum: Tuple[float, ...]
    dominance: bool
    spectrum_gap: float
    spectrum_matches: bool
    phi_squared: float
    atiyah_bott_gap: float
    p_min: float

    def to_dict(self) -> Dict:
        return {
            "t": self.t,
            "Y": self.Y,
            "hym_energy": self.hym_energy,
            "inf_hym_energy": self.inf_hym_energy,
            "spectrum": list(self.spectrum),
            "dominance": "PASS" if self.dominance else "FAIL",
            "spectrum_gap": self.spectrum_gap,
            "spectrum_matches": self.spectrum_matches,
            "phi_squared": self.phi_squared,
            "atiyah_bott_gap": self.atiyah_bott_gap,
            "p_min": self.p_min,
        }


def terminal_summary(trace_in: FlowTrace) -> TerminalSummary:
    """
    Terminal comparison with the HN data. The averaged spectrum sits within
    sqrt(Y) of the HN type, so it is matched with tolerance
    max(10 epsilon, sqrt(epsilon)).
    """
    if not trace_in.records:
        raise ValueError("trace has no samples")
    last = trace_in.last
    mu = np.asarray(trace_in.hn.mu_vec)
    lam = np.asarray(last.spectrum)
    tol = max(1e-9, 10.0 * trace_in.epsilon)
    target = phi_squared(trace_in.hn)

    # an aborted run may end on a blown-up sample; report it, never raise
    if np.all(np.isfinite(lam)):
        gap = float(np.max(np.abs(lam - mu)))
        try:
            dominance = dominance_leq(mu, lam, tol)
        except ValueError:
            dominance = False
    else:
        gap = math.inf
        dominance = False
    energies = [record.hym_energy for record in trace_in.records if math.isfinite(record.hym_energy)]
    inf_energy = float(min(energies)) if energies else math.nan
    p_values = [record.P for record in trace_in.records if math.isfinite(record.P)]

    return TerminalSummary(
        t=last.t,
        Y=last.Y,
        hym_energy=last.hym_energy,
        inf_hym_energy=inf_energy,
        spectrum=last.spectrum,
        dominance=dominance,
        spectrum_gap=gap,
        spectrum_matches=gap <= max(tol, math.sqrt(trace_in.epsilon)),
        phi_squared=target,
        atiyah_bott_gap=abs(inf_energy - target),
        p_min=float(min(p_values)) if p_values else math.nan,
    )


@dataclass(frozen=True)
class TimeStepStudy:
    dts: Tuple[float, ...]
    terminal_y: Tuple[float, ...]

    @property
    def ratio(self) -> float:
        """(Y_dt - Y_dt/2) / (Y_dt/2 - Y_dt/4); about 2 for a first-order scheme."""
        y1, y2, y3 = self.terminal_y[:3]
        denominator = y2 - y3
        return (y1 - y2) / denominator if denominator != 0 else math.inf


def time_step_study(
    bundle: ModelBundle,
    config: FlowConfig,
    initial: Optional[MetricField] = None,
    dts: Optional[Sequence[float]] = None,
) -> TimeStepStudy:
    """Terminal Y at t_end for a dt triple, with the convergence stop disabled."""
    dts = tuple(dts) if dts is not None else (config.dt, config.dt / 2, config.dt / 4)
    if len(dts) != 3:
        raise ValueError("time step study needs exactly three step sizes")
    values = []
    for dt in dts:
        # model_copy skips validation, so epsilon = 0 is allowed here
        study_config = config.model_copy(update={"dt": dt, "epsilon": 0.0, "sample_every": 10 ** 9})
        result = run_flow(bundle, study_config, initial)
        values.append(result.final_state.y_value)
        logger.info(f"[FLOW] time step study dt={dt:g} Y(t_end)={values[-1]:.10g}")
    return TimeStepStudy(dts=dts, terminal_y=tuple(values))
