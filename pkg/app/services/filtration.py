"""
Standard-flag filtrations, metric projections and Harder-Narasimhan data.

Only standard flags S^s = span(e_1, ..., e_s) are considered; model bundles
are built so that their HN filtration is one of them.
"""
import itertools
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import MetricDegenerateError, NumericalAbort
from app.services.bundle import CurvaturePack, MetricField, ModelBundle, curvature
from app.services.geometry import FUNCTION, ZERO_ONE, GridField, grid_integral
from app.utils.hermitian import commutator, h_adjoint, identity_field, trace

logger = logging.getLogger(__name__)

# Absolute tolerance for slope and partial-sum comparisons
SLOPE_TOLERANCE = 1e-9

MAX_BRUTEFORCE_RANK = 4


@dataclass(frozen=True)
class FiltrationSpec:
    """Nested standard flags with the slopes and ranks of their quotients."""

    flags: Tuple[int, ...]
    quotient_slopes: Tuple[Fraction, ...]
    quotient_ranks: Tuple[int, ...]
    is_hn: bool = False

    def __post_init__(self):
        if not self.flags or list(self.flags) != sorted(set(self.flags)) or self.flags[0] < 1:
            raise ValueError("flags must be a strictly increasing list of positive block sizes")
        ranks = tuple(b - a for a, b in zip((0,) + self.flags[:-1], self.flags))
        if ranks != tuple(self.quotient_ranks):
            raise ValueError("quotient ranks must equal the differences of the flag sizes")
        if len(self.quotient_slopes) != len(self.flags):
            raise ValueError("one slope per quotient is required")
        if self.is_hn and any(a <= b for a, b in zip(self.quotient_slopes, self.quotient_slopes[1:])):
            raise ValueError("HN quotient slopes must be strictly decreasing")

    @property
    def rank(self) -> int:
        return self.flags[-1]

    @property
    def degree(self) -> Fraction:
        return sum((mu * rk for mu, rk in zip(self.quotient_slopes, self.quotient_ranks)), Fraction(0))

    @property
    def mu_vec(self) -> Tuple[float, ...]:
        return tuple(float(mu) for mu, rk in zip(self.quotient_slopes, self.quotient_ranks) for _ in range(rk))

    @property
    def proper_flags(self) -> Tuple[int, ...]:
        return self.flags[:-1]

    @classmethod
    def from_flag_degrees(cls, flags: Sequence[int], flag_degrees: Dict[int, int], is_hn: bool = False) -> "FiltrationSpec":
        """Build a filtration from the degrees deg(S^s) of each flag in the sequence."""
        slopes = []
        ranks = []
        prev_size, prev_deg = 0, 0
        for size in flags:
            deg = flag_degrees[size]
            slopes.append(Fraction(deg - prev_deg, size - prev_size))
            ranks.append(size - prev_size)
            prev_size, prev_deg = size, deg
        return cls(tuple(flags), tuple(slopes), tuple(ranks), is_hn)


@dataclass(frozen=True)
class HNType:
    """Non-increasing slope vector with multiplicities."""

    mu_vec: Tuple[float, ...]

    def __post_init__(self):
        if any(a < b - SLOPE_TOLERANCE for a, b in zip(self.mu_vec, self.mu_vec[1:])):
            raise ValueError("HN type must be non-increasing")

    @property
    def total(self) -> float:
        return float(sum(self.mu_vec))


@dataclass(frozen=True, eq=False)
class BlockCurvature:
    """Induced curvature of S and Q for one flag, with the second fundamental form."""

    lambda_f_sub: GridField
    lambda_f_quotient: GridField
    second_fundamental_form: GridField
    degree_sub: float
    degree_quotient: float


def declared_filtration(bundle: ModelBundle) -> FiltrationSpec:
    """HN filtration implied by the degree blocks of a model bundle."""
    flags = []
    flag_degrees = {}
    running = 0
    for index, d in enumerate(bundle.degrees):
        running += d
        last = index == bundle.rank - 1
        if last or bundle.degrees[index + 1] != d:
            flags.append(index + 1)
            flag_degrees[index + 1] = running
    return FiltrationSpec.from_flag_degrees(flags, flag_degrees, is_hn=True)


def standard_flags(rank: int) -> List[Tuple[int, ...]]:
    """Every chain 0 < s^1 < ... < s^p = rank."""
    flags = []
    inner = range(1, rank)
    for count in range(rank):
        for combo in itertools.combinations(inner, count):
            flags.append(tuple(combo) + (rank,))
    return flags


def projection(H: MetricField, flag_size: int) -> GridField:
    """
    H-orthogonal projection onto span(e_1, ..., e_s).

    With V the first s basis vectors, pi = V (V^dagger H V)^-1 V^dagger H,
    so only the first s rows are non-zero: (H_ss)^-1 H[:s, :].
    """
    bundle = H.bundle
    rank = bundle.rank
    if not 1 <= flag_size <= rank:
        raise ValueError(f"flag size must be between 1 and {rank}, got {flag_size}")

    n = bundle.geometry.n_grid
    if flag_size == rank:
        return bundle.end_field(identity_field((n, n), rank))

    metric = H.H
    try:
        rows = np.linalg.solve(metric[..., :flag_size, :flag_size], metric[..., :flag_size, :])
    except np.linalg.LinAlgError as exc:
        raise MetricDegenerateError("Gram block is singular", {"flag_size": flag_size}) from exc

    data = np.zeros((n, n, rank, rank), dtype=complex)
    data[..., :flag_size, :] = rows
    return bundle.end_field(data)


def projections(H: MetricField, flags: Iterable[int]) -> Dict[int, GridField]:
    return {s: projection(H, s) for s in flags}


def psi(H: MetricField, hn: FiltrationSpec, pis: Optional[Dict[int, GridField]] = None) -> GridField:
    """Psi_H = sum_i mu(Q^i) (pi^i - pi^(i-1))."""
    pis = pis or projections(H, hn.flags)
    slopes = [float(mu) for mu in hn.quotient_slopes] + [0.0]
    data = np.zeros_like(pis[hn.flags[0]].data)
    for i, size in enumerate(hn.flags):
        data = data + (slopes[i] - slopes[i + 1]) * pis[size].data
    return H.bundle.end_field(data)


def psi_squared_identity(H: MetricField, hn: FiltrationSpec) -> float:
    """Sup-norm of Psi^2 - sum_i mu(Q^i)^2 (pi^i - pi^(i-1))."""
    pis = projections(H, hn.flags)
    p = psi(H, hn, pis).data
    expected = np.zeros_like(p)
    previous = np.zeros_like(p)
    for mu, size in zip(hn.quotient_slopes, hn.flags):
        expected = expected + float(mu) ** 2 * (pis[size].data - previous)
        previous = pis[size].data
    return float(np.max(np.abs(p @ p - expected)))


def second_fundamental_form(H: MetricField, flag_size: int, pi: Optional[GridField] = None) -> GridField:
    """gamma = d-bar pi with the full twisted operator, [A0'', pi] included."""
    bundle = H.bundle
    pi = pi if pi is not None else projection(H, flag_size)
    u = bundle.cocycle.data
    data = bundle.d_bar(pi.data) + commutator(u, pi.data)
    return GridField(data, bundle.weights, ZERO_ONE)


def _form_norm_sq(gamma: np.ndarray, H: MetricField) -> float:
    geo = H.bundle.geometry
    values = trace(gamma @ h_adjoint(gamma, H.H))
    return float(grid_integral(values, geo).real) * geo.one_form_weight


def second_fundamental_form_norm(H: MetricField, flag_size: int, pi: Optional[GridField] = None) -> float:
    """||d-bar pi||^2 in L2, measured with H."""
    gamma = second_fundamental_form(H, flag_size, pi)
    return _form_norm_sq(gamma.data, H)


def chern_weil_degree(
    H: MetricField,
    flag_size: int,
    curv: Optional[CurvaturePack] = None,
    pi: Optional[GridField] = None,
) -> float:
    """deg(S) = integral of Tr(Lambda F pi) minus ||d-bar pi||^2."""
    curv = curv or curvature(H)
    pi = pi if pi is not None else projection(H, flag_size)
    geo = H.bundle.geometry
    lf_pi = grid_integral(trace(curv.LambdaF.data @ pi.data), geo).real
    return float(lf_pi) - second_fundamental_form_norm(H, flag_size, pi)


def curvature_blocks(H: MetricField, flag_size: int, curv: Optional[CurvaturePack] = None) -> BlockCurvature:
    """
    Lambda F of S and Q through the second fundamental form gamma:

        Lambda F_S = pi Lambda F pi - w gamma gamma*
        Lambda F_Q = (1 - pi) Lambda F (1 - pi) + w gamma* gamma

    where w is the (0,1)-form quadrature weight of the geometry.
    """
    curv = curv or curvature(H)
    bundle = H.bundle
    geo = bundle.geometry
    pi = projection(H, flag_size)
    gamma = second_fundamental_form(H, flag_size, pi)
    gamma_star = h_adjoint(gamma.data, H.H)
    complement = bundle.identity() - pi.data
    lam = curv.LambdaF.data

    sub = pi.data @ lam @ pi.data - geo.one_form_weight * (gamma.data @ gamma_star)
    quotient = complement @ lam @ complement + geo.one_form_weight * (gamma_star @ gamma.data)
    return BlockCurvature(
        lambda_f_sub=bundle.end_field(sub),
        lambda_f_quotient=bundle.end_field(quotient),
        second_fundamental_form=gamma,
        degree_sub=float(grid_integral(trace(sub), geo).real),
        degree_quotient=float(grid_integral(trace(quotient), geo).real),
    )


def flag_degree_table(H: MetricField, curv: Optional[CurvaturePack] = None) -> Dict[int, float]:
    """Chern-Weil degree of every standard subbundle S^1, ..., S^r."""
    curv = curv or curvature(H)
    return {s: chern_weil_degree(H, s, curv) for s in range(1, H.bundle.rank + 1)}


# Largest distance from an integer a Chern-Weil flag degree may have
QUANTIZATION_TOLERANCE = 0.25


def _quantize(table: Dict[int, float]) -> Dict[int, int]:
    degrees = {}
    for size, value in table.items():
        nearest = int(round(value))
        if abs(value - nearest) > QUANTIZATION_TOLERANCE:
            raise NumericalAbort(
                f"flag {size} degree {value:.6f} is not resolved to an integer",
                {"flag": size, "degree": value},
            )
        degrees[size] = nearest
    degrees[0] = 0
    return degrees


def greedy_hn_flags(flag_degrees: Dict[int, int], rank: int) -> List[Tuple[int, Fraction]]:
    """
    Pick the maximal-slope standard subbundle at each step.

    Ties go to the smaller rank. Returns (flag size, quotient slope) pairs.
    """
    chosen = []
    prev = 0
    while prev < rank:
        best_size, best_slope = None, None
        for size in range(prev + 1, rank + 1):
            value = Fraction(flag_degrees[size] - flag_degrees[prev], size - prev)
            if best_slope is None or value > best_slope:
                best_size, best_slope = size, value
        chosen.append((best_size, best_slope))
        prev = best_size
    return chosen


def hn_filtration_bruteforce(bundle: ModelBundle, H: MetricField, curv: Optional[CurvaturePack] = None) -> FiltrationSpec:
    """HN filtration found by searching standard flags, equal-slope steps merged."""
    if bundle.rank > MAX_BRUTEFORCE_RANK:
        raise ValueError(f"brute-force HN search supports rank <= {MAX_BRUTEFORCE_RANK}")

    degrees = _quantize(flag_degree_table(H, curv))
    steps = greedy_hn_flags(degrees, bundle.rank)

    merged: List[Tuple[int, Fraction]] = []
    for size, value in steps:
        if merged and merged[-1][1] == value:
            merged[-1] = (size, value)
        else:
            merged.append((size, value))
    return FiltrationSpec.from_flag_degrees([size for size, _ in merged], degrees, is_hn=True)


def hn_type_bruteforce(bundle: ModelBundle, H: MetricField, curv: Optional[CurvaturePack] = None) -> HNType:
    """HN type from the standard-flag search."""
    return HNType(hn_filtration_bruteforce(bundle, H, curv).mu_vec)


def dominance_leq(mu: Union[HNType, Sequence[float]], lam: Union[HNType, Sequence[float]],
                  tol: float = SLOPE_TOLERANCE) -> bool:
    """True iff every partial sum of mu is at most the matching partial sum of lam."""
    mu = np.asarray(mu.mu_vec if isinstance(mu, HNType) else mu, dtype=float)
    lam = np.asarray(lam.mu_vec if isinstance(lam, HNType) else lam, dtype=float)
    if mu.shape != lam.shape:
        raise ValueError("dominance needs vectors of equal length")
    if abs(mu.sum() - lam.sum()) > tol:
        raise ValueError("dominance needs vectors with equal total sums")
    return bool(np.all(np.cumsum(mu) <= np.cumsum(lam) + tol))


def phi_squared(spec: FiltrationSpec) -> float:
    """Sum of mu(Q^i)^2 rk(Q^i)."""
    return float(sum(float(mu) ** 2 * rk for mu, rk in zip(spec.quotient_slopes, spec.quotient_ranks)))


def best_phi_squared(flag_degrees: Dict[int, int], rank: int) -> Tuple[FiltrationSpec, float]:
    """Largest Phi^2 over all slope-decreasing standard flags."""
    best_spec, best_value = None, None
    for flags in standard_flags(rank):
        spec = FiltrationSpec.from_flag_degrees(flags, flag_degrees)
        slopes = spec.quotient_slopes
        if any(a <= b for a, b in zip(slopes, slopes[1:])):
            continue
        value = phi_squared(spec)
        if best_value is None or value > best_value + SLOPE_TOLERANCE:
            best_spec, best_value = spec, value
    return best_spec, best_value


def induced_log_det(H: MetricField, flag_size: int) -> float:
    """Integral of log det of the metric induced on S^s (the leading s x s block of H)."""
    bundle = H.bundle
    _, logdet = np.linalg.slogdet(H.h_hat[..., :flag_size, :flag_size])
    background = np.sum(bundle.phi[..., :flag_size], axis=-1)
    return float(grid_integral(logdet - background, bundle.geometry).real)


def psi_potential(H: MetricField, hn: FiltrationSpec) -> float:
    """
    Closed form of the Psi part of the P-functional, measured from H0:

        sum_i (mu_i - mu_(i+1)) * integral of log det h^(s_i)

    with h^(s) the leading s x s block of h and mu_(p+1) = 0.
    """
    background = MetricField.background(H.bundle)
    slopes = [float(mu) for mu in hn.quotient_slopes] + [0.0]
    total = 0.0
    for i, size in enumerate(hn.flags):
        increment = induced_log_det(H, size) - induced_log_det(background, size)
        total += (slopes[i] - slopes[i + 1]) * increment
    return total


def trace_residual(field: GridField, target: float) -> float:
    """Largest pointwise |Tr(field) - target|."""
    if field.form != FUNCTION:
        raise ValueError("trace residual expects an endomorphism field")
    return float(np.max(np.abs(trace(field.data) - target)))
