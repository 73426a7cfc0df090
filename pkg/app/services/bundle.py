"""
Model holomorphic bundles E = (L_{d_1} + ... + L_{d_r}, d-bar_0) over the torus.

The holomorphic structure is d-bar_0 = d-bar + A0'' with A0'' = u dz-bar and
u strictly upper-triangular, so every standard flag span(e_1..e_s) is a
holomorphic subbundle. The background metric is diagonal,

    H0 = diag(exp(-phi_a)),   phi_a = c * d_a * Im(tau) * y^2,

and the exponent c is calibrated once so that Lambda F(H0) = diag(d).

The evolving metric is H = H0 h. It is stored through the Hermitian
logarithm of h_hat = H0^(1/2) h H0^(-1/2) (the H0-unitary frame), so
positivity survives any update done in exponential coordinates.
Entry (a, b) of an endomorphism has automorphy weight d_a - d_b. Chern
connections and curvatures are evaluated in the unitary frame with the
covariant stencils of the geometry module, then returned in the
holomorphic frame.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import MetricDegenerateError
from app.services.geometry import (
    FUNCTION,
    ONE_ZERO,
    TWO_FORM,
    ZERO_ONE,
    GridField,
    TorusGeometry,
    d_bar_raw,
    d_z_raw,
    end_weights,
    grid_integral,
    nabla_bar_raw,
    nabla_raw,
)
from app.utils.hermitian import (
    POSITIVITY_FLOOR,
    commutator,
    dagger,
    expm_h,
    identity_field,
    logm_h,
    min_eigenvalue,
    trace,
)
from app.utils.theta import band_limited_field, bump, theta_section

logger = logging.getLogger(__name__)

COCYCLE_GENERATORS = ("none", "theta")

# Relative spread allowed in the calibrated background curvature
CALIBRATION_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Extension-twisted sum of line bundles with its background metric."""

    geometry: TorusGeometry
    degrees: Tuple[int, ...]
    cocycle: GridField
    cocycle_name: str
    amplitude: float
    background_exponent: float
    lambda_f0: Tuple[float, ...]

    @property
    def rank(self) -> int:
        return len(self.degrees)

    @property
    def total_degree(self) -> int:
        return int(sum(self.degrees))

    @property
    def slope(self) -> float:
        return self.total_degree / self.rank

    @property
    def hn_type(self) -> Tuple[float, ...]:
        """Declared HN type: the sorted degrees (equal degrees form one semistable block)."""
        return tuple(float(d) for d in self.degrees)

    @cached_property
    def weights(self) -> np.ndarray:
        return end_weights(self.degrees)

    @cached_property
    def phi(self) -> np.ndarray:
        """Background log-weights phi_a on the grid, shape (n, n, r)."""
        geo = self.geometry
        d = np.asarray(self.degrees, dtype=float)
        return self.background_exponent * geo.tau_im * (geo.y ** 2)[..., None] * d

    @cached_property
    def background_connection(self) -> np.ndarray:
        """Diagonal of H0^-1 dH0/dz = i c d_a y."""
        d = np.asarray(self.degrees, dtype=float)
        return 1j * self.background_exponent * self.geometry.y[..., None] * d

    @cached_property
    def background_curvature(self) -> np.ndarray:
        """dz-bar ^ dz component of F(H0) for the split structure."""
        return np.diag(np.asarray(self.lambda_f0) / self.geometry.lambda_factor).astype(complex)

    @cached_property
    def unitary_scale(self) -> np.ndarray:
        return np.exp(-0.5 * self.phi)

    @cached_property
    def background_metric(self) -> np.ndarray:
        """H0 as a pointwise Hermitian matrix field."""
        diag = np.exp(-self.phi)
        return diag[..., :, None] * np.eye(self.rank)

    def to_unitary(self, x: np.ndarray) -> np.ndarray:
        scale = self.unitary_scale
        return scale[..., :, None] * x / scale[..., None, :]

    def from_unitary(self, x: np.ndarray) -> np.ndarray:
        scale = self.unitary_scale
        return x * scale[..., None, :] / scale[..., :, None]

    def h0_adjoint(self, x: np.ndarray) -> np.ndarray:
        """H0^-1 x^dagger H0, done entrywise since H0 is diagonal."""
        ratio = np.exp(self.phi[..., :, None] - self.phi[..., None, :])
        return ratio * dagger(x)

    def d_bar(self, x: np.ndarray) -> np.ndarray:
        """dX/dz-bar of a holomorphic-frame field, through the unitary-frame stencils."""
        return self.from_unitary(nabla_bar_raw(self.to_unitary(x), self.weights, self.geometry))

    def d_one_zero(self, x: np.ndarray) -> np.ndarray:
        """H0 Chern (1,0) derivative dX/dz + [B, X]; the exact H0-adjoint of -d_bar."""
        return self.from_unitary(nabla_raw(self.to_unitary(x), self.weights, self.geometry))

    def identity(self) -> np.ndarray:
        n = self.geometry.n_grid
        return identity_field((n, n), self.rank)

    def end_field(self, data: np.ndarray, form: str = FUNCTION) -> GridField:
        return GridField(data, self.weights, form)


@dataclass(frozen=True, eq=False)
class MetricField:
    """Hermitian metric H = H0 h, stored as log of h in the H0-unitary frame."""

    bundle: ModelBundle
    log_h: np.ndarray

    @classmethod
    def background(cls, bundle: ModelBundle) -> "MetricField":
        return cls(bundle, np.zeros_like(bundle.identity()))

    @classmethod
    def from_unitary(cls, bundle: ModelBundle, h_hat: np.ndarray) -> "MetricField":
        return cls(bundle, logm_h(h_hat))

    @cached_property
    def h_hat(self) -> np.ndarray:
        return expm_h(self.log_h)

    @cached_property
    def h(self) -> np.ndarray:
        """h = H0^-1 H in the holomorphic frame."""
        return self.bundle.from_unitary(self.h_hat)

    @cached_property
    def H(self) -> np.ndarray:
        scale = self.bundle.unitary_scale
        return scale[..., :, None] * self.h_hat * scale[..., None, :]

    @cached_property
    def min_eigenvalue(self) -> float:
        return min_eigenvalue(self.h_hat)

    def scaled(self, factor: float) -> "MetricField":
        """The metric factor * H."""
        if factor <= 0:
            raise ValueError("metric scale factor must be positive")
        return MetricField(self.bundle, self.log_h + math.log(factor) * self.bundle.identity())


@dataclass(frozen=True, eq=False)
class CurvaturePack:
    """Chern connection and curvature of (d-bar_0 + u, H)."""

    F: GridField
    LambdaF: GridField
    connection_form: GridField
    tensorial_connection: np.ndarray
    dbar_form: np.ndarray
    metric: np.ndarray
    bundle: ModelBundle
    raw_asymmetry: float = 0.0

    def d_bar_end(self, x: np.ndarray) -> np.ndarray:
        """d-bar on End(E): dX/dz-bar + [u, X]."""
        return self.bundle.d_bar(x) + commutator(self.dbar_form, x)

    def d_end(self, x: np.ndarray) -> np.ndarray:
        """Chern (1,0) derivative on End(E): dX/dz + [B, X] + [a_T, X]."""
        return self.bundle.d_one_zero(x) + commutator(self.tensorial_connection, x)


def calibrate_background(geometry: TorusGeometry, degrees: Sequence[int]) -> Tuple[float, Tuple[float, ...]]:
    """
    Fit the quadratic exponent of H0 so that Lambda F(H0) = diag(d).

    The unit profile q = Im(tau) y^2 is differentiated with the same
    stencils as every other field, on interior rows where 4th-order
    central differences are exact for quadratics. Returns the exponent and
    the pinned Lambda F0 diagonal.
    """
    n = geometry.n_grid
    q = (geometry.tau_im * geometry.y ** 2)[..., None, None].astype(complex)
    zero = np.zeros((1, 1), dtype=int)
    ddq = d_bar_raw(d_z_raw(q, zero, geometry), zero, geometry)[:, 4:n - 4, 0, 0]

    spread = float(np.max(np.abs(ddq - ddq.mean())))
    if spread > CALIBRATION_TOLERANCE * abs(ddq.mean()):
        raise RuntimeError(f"background curvature is not constant (spread {spread:.3e})")

    # Lambda F for exponent 1 and unit degree
    unit_curvature = float((-geometry.lambda_factor * ddq.mean()).real)
    exponent = 1.0 / unit_curvature
    lambda_f0 = tuple(exponent * d * unit_curvature for d in degrees)

    for d, value in zip(degrees, lambda_f0):
        if abs(value - d) > CALIBRATION_TOLERANCE * max(1.0, abs(d)):
            raise RuntimeError(f"calibrated Lambda F0 {value} does not match degree {d}")

    logger.info(f"[CALIBRATE] background exponent={exponent:.15f} (2 pi = {2 * math.pi:.15f})")
    return exponent, lambda_f0


def _theta_cocycle(geometry: TorusGeometry, degrees: Sequence[int], amplitude: float) -> np.ndarray:
    rank = len(degrees)
    n = geometry.n_grid
    data = np.zeros((n, n, rank, rank), dtype=complex)
    profile = bump(geometry.x, geometry.y)
    for a in range(rank):
        for b in range(a + 1, rank):
            weight = degrees[a] - degrees[b]
            data[..., a, b] = amplitude * theta_section(geometry.z, geometry.tau, weight) * profile
    return data


def make_bundle(
    geometry: TorusGeometry,
    degrees: Sequence[int],
    cocycle: Union[str, GridField] = "none",
    amplitude: float = 1.0,
) -> ModelBundle:
    """
    Build a model bundle.

    Args:
        geometry: Torus the bundle lives on
        degrees: Degrees d_1 >= d_2 >= ... >= d_r of the line bundle summands
        cocycle: Generator name ("none" or "theta") or an explicit (0,1)
            GridField with weights d_a - d_b, strictly upper-triangular
        amplitude: Scale applied to a named generator

    Returns:
        ModelBundle with calibrated background metric
    """
    degrees = tuple(int(d) for d in degrees)
    if not degrees:
        raise ValueError("degrees must not be empty")
    if any(degrees[i] < degrees[i + 1] for i in range(len(degrees) - 1)):
        raise ValueError("degrees must be block-sorted non-increasing")

    weights = end_weights(degrees)
    rank = len(degrees)

    if isinstance(cocycle, GridField):
        if not np.array_equal(cocycle.weights, weights):
            raise ValueError("cocycle weights must equal the degree differences d_a - d_b")
        if cocycle.form != ZERO_ONE:
            raise ValueError("cocycle must be a (0,1)-form component field")
        lower = np.tril(np.ones((rank, rank), dtype=bool))
        if np.any(np.abs(cocycle.data[..., lower]) > 0):
            raise ValueError("cocycle must be strictly upper-triangular")
        cocycle_field = cocycle
        name = "custom"
    elif cocycle == "none":
        n = geometry.n_grid
        cocycle_field = GridField(np.zeros((n, n, rank, rank), dtype=complex), weights, ZERO_ONE)
        name = "none"
    elif cocycle == "theta":
        cocycle_field = GridField(_theta_cocycle(geometry, degrees, amplitude), weights, ZERO_ONE)
        name = "theta"
    else:
        raise ValueError(f"unknown cocycle generator: {cocycle} (expected one of {COCYCLE_GENERATORS})")

    exponent, lambda_f0 = calibrate_background(geometry, degrees)
    bundle = ModelBundle(
        geometry=geometry,
        degrees=degrees,
        cocycle=cocycle_field,
        cocycle_name=name,
        amplitude=float(amplitude),
        background_exponent=exponent,
        lambda_f0=lambda_f0,
    )
    logger.info(f"[BUNDLE] degrees={degrees} cocycle={name} amplitude={amplitude} hn_type={bundle.hn_type}")
    return bundle


def structure_curvature(bundle: ModelBundle, h: np.ndarray, u: np.ndarray, metric: np.ndarray) -> CurvaturePack:
    """
    Chern connection and curvature of d-bar + u dz-bar with metric H0 h.

    Everything is evaluated in the H0-unitary frame, where the background
    Chern connection is nabla and the H0-adjoint is the plain dagger:

        a_T = h^-1 (nabla h - u^dagger h),
        F   = F0 + nabla-bar a_T - nabla u + [u, a_T].

    Results are handed back in the holomorphic frame. nabla is the exact
    negative adjoint of nabla-bar on the grid, so the linearized flow damps
    every grid mode, including those near the Nyquist frequency.
    """
    geo = bundle.geometry
    weights = bundle.weights

    h_u = bundle.to_unitary(h)
    u_u = bundle.to_unitary(u)
    try:
        h_inv = np.linalg.inv(h_u)
    except np.linalg.LinAlgError as exc:
        raise MetricDegenerateError("metric is not invertible", {"where": "chern_connection"}) from exc

    a_t = h_inv @ (nabla_raw(h_u, weights, geo) - dagger(u_u) @ h_u)
    f = (bundle.background_curvature + nabla_bar_raw(a_t, weights, geo)
         - nabla_raw(u_u, weights, geo) + commutator(u_u, a_t))

    # keep the h-self-adjoint part; the stencils break Leibniz at O(h^4)
    raw = f * geo.lambda_factor
    lam = 0.5 * (raw + h_inv @ dagger(raw) @ h_u)
    asymmetry = float(np.max(np.abs(raw - lam)))

    a_t = bundle.from_unitary(a_t)
    lam = bundle.from_unitary(lam)
    connection = a_t + bundle.background_connection[..., :, None] * np.eye(bundle.rank)
    return CurvaturePack(
        F=GridField(lam / geo.lambda_factor, weights, TWO_FORM),
        LambdaF=GridField(lam, weights, FUNCTION, hermitian=True),
        connection_form=GridField(connection, weights, ONE_ZERO),
        tensorial_connection=a_t,
        dbar_form=u,
        metric=metric,
        bundle=bundle,
        raw_asymmetry=asymmetry,
    )


def _check_positive(H: MetricField) -> None:
    lowest = H.min_eigenvalue
    if lowest <= POSITIVITY_FLOOR:
        raise MetricDegenerateError("metric lost positive-definiteness", {"min_eigenvalue": lowest})


def chern_connection(H: MetricField) -> GridField:
    """A' = H^-1 dH in the holomorphic frame, including the background part."""
    return curvature(H).connection_form


def curvature(H: MetricField) -> CurvaturePack:
    """Full curvature of the Chern connection of (d-bar_0, H)."""
    _check_positive(H)
    return structure_curvature(H.bundle, H.h, H.bundle.cocycle.data, H.H)


def degree(bundle: ModelBundle, H: MetricField, curv: Optional[CurvaturePack] = None) -> float:
    curv = curv or curvature(H)
    return float(grid_integral(trace(curv.LambdaF.data), bundle.geometry).real)


def slope(bundle: ModelBundle, H: MetricField, curv: Optional[CurvaturePack] = None) -> float:
    return degree(bundle, H, curv) / bundle.rank


def hermitian_part_residual(curv: CurvaturePack) -> float:
    """Largest pointwise |H LambdaF - (H LambdaF)^dagger| of the published field."""
    product = curv.metric @ curv.LambdaF.data
    return float(np.max(np.abs(product - dagger(product))))


def random_metric(bundle: ModelBundle, seed: int, magnitude: float, max_mode: Optional[int] = None) -> MetricField:
    """
    Seeded smooth perturbation H0 exp(s) of the background metric.

    s is H0-self-adjoint with Fourier modes up to ``max_mode`` (n_grid / 4 by
    default); off-diagonal entries are band-limited periodic functions
    times the theta section of the entry's weight, so they carry the right
    automorphy. s is scaled so that its pointwise spectral radius peaks at
    ``magnitude``.
    """
    if magnitude < 0:
        raise ValueError("perturbation magnitude must be non-negative")
    if magnitude == 0:
        return MetricField.background(bundle)

    geo = bundle.geometry
    n = geo.n_grid
    max_mode = max_mode if max_mode is not None else n // 4
    rng = np.random.default_rng(seed)

    rank = bundle.rank
    s_hat = np.zeros((n, n, rank, rank), dtype=complex)
    for a in range(rank):
        s_hat[..., a, a] = band_limited_field(n, rng, max_mode).real
    for a in range(rank):
        for b in range(a + 1, rank):
            weight = bundle.degrees[a] - bundle.degrees[b]
            section = band_limited_field(n, rng, max_mode) * theta_section(geo.z, geo.tau, weight)
            entry = section * np.exp(0.5 * (bundle.phi[..., b] - bundle.phi[..., a]))
            s_hat[..., a, b] = entry
            s_hat[..., b, a] = np.conj(entry)

    radius = float(np.max(np.abs(np.linalg.eigvalsh(s_hat))))
    if radius == 0.0:
        return MetricField.background(bundle)
    return MetricField(bundle, s_hat * (magnitude / radius))
