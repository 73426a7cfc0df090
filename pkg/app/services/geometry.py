"""
Discrete calculus on a flat complex torus X = C / (Z + tau Z).

Grid points sit at real coordinates (x, y) in [0, 1)^2 with z = x + tau y.
Fields are stored as arrays of shape (n_grid, n_grid, r, r): axis 0 runs
over x, axis 1 over y, the last two axes are the fiber matrix.

Entry (a, b) of an End(E)-valued field is a section of L_{d_a - d_b}, so it
carries the integer automorphy weight w = d_a - d_b:

    s(z + 1)   = s(z)
    s(z + tau) = exp(-pi i w (2 z + tau)) s(z)

Derivatives use 4th-order central differences. Ghost cells across the
y = 0 / y = 1 seam are filled with the automorphy factor of each entry,
so weight-0 entries are plain periodic functions.

The Chern operators of a bundle act on fields in the H0-unitary frame
instead (``nabla_bar_raw`` / ``nabla_raw``). There the background
connection of a weight-w entry is 2 pi i w y (dx + Re(tau) dy) and the
seam identification is a pure phase, so each stencil shift is an exact
parallel transport along its grid link. Shifts are then unitary and
nabla_raw = -(nabla_bar_raw)^dagger holds to roundoff for any field,
smooth or not.

Constants are pinned by deg(L_d) = d: with the curvature stored as its
dz-bar ^ dz component, Lambda F = -(Im tau / pi) F.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from app.utils.hermitian import dagger, h_adjoint, trace

logger = logging.getLogger(__name__)

FUNCTION = "0"
ONE_ZERO = "1,0"
ZERO_ONE = "0,1"
TWO_FORM = "1,1"
FORM_TYPES = (FUNCTION, ONE_ZERO, ZERO_ONE, TWO_FORM)


@dataclass(frozen=True)
class TorusGeometry:
    """Flat torus with uniform quadrature normalized to unit volume."""

    tau: complex
    n_grid: int
    vol_scale: float

    @property
    def tau_im(self) -> float:
        return float(self.tau.imag)

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_grid

    @property
    def num_points(self) -> int:
        return self.n_grid * self.n_grid

    @cached_property
    def x(self) -> np.ndarray:
        grid = np.arange(self.n_grid) / self.n_grid
        return np.repeat(grid[:, None], self.n_grid, axis=1)

    @cached_property
    def y(self) -> np.ndarray:
        grid = np.arange(self.n_grid) / self.n_grid
        return np.repeat(grid[None, :], self.n_grid, axis=0)

    @cached_property
    def z(self) -> np.ndarray:
        return self.x + self.tau * self.y

    @property
    def lambda_factor(self) -> float:
        """Lambda applied to the dz-bar ^ dz component of a (1,1)-form."""
        return -self.tau_im / math.pi

    @property
    def one_form_weight(self) -> float:
        """Pointwise |u dz-bar|^2 = one_form_weight * |u|^2."""
        return self.tau_im / math.pi

    @property
    def two_form_weight(self) -> float:
        return self.lambda_factor ** 2

    def form_weight(self, form: str) -> float:
        if form == FUNCTION:
            return 1.0
        if form in (ONE_ZERO, ZERO_ONE):
            return self.one_form_weight
        return self.two_form_weight

    def quadrature(self, values: np.ndarray) -> np.ndarray:
        """Trapezoidal integral over the torus (sums the two grid axes)."""
        return np.sum(values, axis=(0, 1)) * self.vol_scale

    def total_volume(self) -> float:
        return float(self.quadrature(np.ones((self.n_grid, self.n_grid))))

    def automorphy_factor(self, weight: np.ndarray, z: np.ndarray) -> np.ndarray:
        """exp(-pi i w (2 z + tau)) broadcast over z (...,) and weights (r, r)."""
        return np.exp(-1j * math.pi * weight * (2.0 * z[..., None, None] + self.tau))

    def kahler_form(self, rank: int) -> "GridField":
        """Kahler form times the identity, as a (1,1) component field."""
        data = np.broadcast_to(np.eye(rank, dtype=complex) / self.lambda_factor,
                               (self.n_grid, self.n_grid, rank, rank)).copy()
        return GridField(data, np.zeros((rank, rank), dtype=int), TWO_FORM)

    def constant(self, matrix, weights: Optional[np.ndarray] = None, form: str = FUNCTION) -> "GridField":
        matrix = np.asarray(matrix, dtype=complex)
        rank = matrix.shape[0]
        data = np.broadcast_to(matrix, (self.n_grid, self.n_grid, rank, rank)).copy()
        if weights is None:
            weights = np.zeros((rank, rank), dtype=int)
        return GridField(data, weights, form)


@dataclass(frozen=True, eq=False)
class GridField:
    """Matrix-valued field on the grid with per-entry automorphy weights."""

    data: np.ndarray
    weights: np.ndarray
    form: str = FUNCTION
    hermitian: bool = False

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != self.data.shape[-2]:
            raise ValueError(f"field data must have shape (n, n, r, r), got {self.data.shape}")
        if self.weights.shape != self.data.shape[-2:]:
            raise ValueError("automorphy weights must be an r x r integer matrix")
        if self.form not in FORM_TYPES:
            raise ValueError(f"unknown form type: {self.form}")

    @property
    def rank(self) -> int:
        return self.data.shape[-1]

    def like(self, data: np.ndarray, form: Optional[str] = None, hermitian: bool = False) -> "GridField":
        return GridField(data, self.weights, self.form if form is None else form, hermitian)

    def _check_compatible(self, other: "GridField") -> None:
        if not np.array_equal(self.weights, other.weights):
            raise ValueError("automorphy weights differ: fields live in different bundles")
        if self.form != other.form:
            raise ValueError(f"form types differ: {self.form} vs {other.form}")

    def __add__(self, other: "GridField") -> "GridField":
        self._check_compatible(other)
        return self.like(self.data + other.data)

    def __sub__(self, other: "GridField") -> "GridField":
        self._check_compatible(other)
        return self.like(self.data - other.data)

    def __mul__(self, scalar) -> "GridField":
        return self.like(self.data * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other: "GridField") -> "GridField":
        if self.form != FUNCTION and other.form != FUNCTION:
            raise ValueError("pointwise product of two forms is not supported")
        form = self.form if self.form != FUNCTION else other.form
        return GridField(self.data @ other.data, self.weights, form)

    def is_pointwise_hermitian(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.data - dagger(self.data))) <= tol)


def make_geometry(tau: complex, n_grid: int) -> TorusGeometry:
    """Build the torus geometry, rejecting degenerate lattices and grids."""
    tau = complex(tau)
    if tau.imag <= 0:
        raise ValueError("Im tau must be positive")
    if n_grid % 2 != 0:
        raise ValueError("n_grid must be even")
    if n_grid < 16:
        raise ValueError("n_grid must be at least 16")

    geo = TorusGeometry(tau=tau, n_grid=int(n_grid), vol_scale=1.0 / (n_grid * n_grid))
    logger.debug(f"[GEOMETRY] tau={tau} n_grid={n_grid}")
    return geo


def end_weights(degrees: Sequence[int]) -> np.ndarray:
    """Automorphy weights d_a - d_b of End(E) for E = sum of L_{d_a}."""
    d = np.asarray(degrees, dtype=int)
    return d[:, None] - d[None, :]


def _diff_x(data: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(data, 2, axis=0) - 8.0 * np.roll(data, 1, axis=0)
            + 8.0 * np.roll(data, -1, axis=0) - np.roll(data, -2, axis=0)) / (12.0 * h)


def _diff_y(data: np.ndarray, weights: np.ndarray, geo: TorusGeometry) -> np.ndarray:
    n = geo.n_grid
    if np.any(weights):
        top = data[:, :2] * geo.automorphy_factor(weights, geo.z[:, :2])
        bottom = data[:, n - 2:] / geo.automorphy_factor(weights, geo.z[:, n - 2:] - geo.tau)
    else:
        top = data[:, :2]
        bottom = data[:, n - 2:]
    ext = np.concatenate([bottom, data, top], axis=1)
    return (ext[:, 0:n] - 8.0 * ext[:, 1:n + 1] + 8.0 * ext[:, 3:n + 3] - ext[:, 4:n + 4]) / (12.0 * geo.spacing)


def d_bar_raw(data: np.ndarray, weights: np.ndarray, geo: TorusGeometry) -> np.ndarray:
    """d/dz-bar = (tau d/dx - d/dy) / (2 i Im tau), on raw component arrays."""
    return (geo.tau * _diff_x(data, geo.spacing) - _diff_y(data, weights, geo)) / (2j * geo.tau_im)


def d_z_raw(data: np.ndarray, weights: np.ndarray, geo: TorusGeometry) -> np.ndarray:
    """d/dz = (d/dy - conj(tau) d/dx) / (2 i Im tau), on raw component arrays."""
    return (_diff_y(data, weights, geo) - np.conj(geo.tau) * _diff_x(data, geo.spacing)) / (2j * geo.tau_im)


def _seam_phase(weights: np.ndarray, geo: TorusGeometry, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unitary-frame automorphy f(x, y + 1) = P(x, y) f(x, y), a pure phase."""
    t1 = geo.tau.real
    return np.exp(-1j * math.pi * weights * (2.0 * (x + t1 * y)[..., None, None] + t1))


def _covariant_x(data: np.ndarray, weights: np.ndarray, geo: TorusGeometry) -> np.ndarray:
    h = geo.spacing
    link = 2j * math.pi * h * weights * geo.y[..., None, None]

    def shift(k: int) -> np.ndarray:
        return np.exp(k * link) * np.roll(data, -k, axis=0)

    return (8.0 * (shift(1) - shift(-1)) - (shift(2) - shift(-2))) / (12.0 * h)


def _covariant_y(data: np.ndarray, weights: np.ndarray, geo: TorusGeometry) -> np.ndarray:
    n = geo.n_grid
    h = geo.spacing
    if not np.any(weights):
        return _diff_y(data, weights, geo)

    top = data[:, :2] * _seam_phase(weights, geo, geo.x[:, :2], geo.y[:, :2])
    bottom = data[:, n - 2:] / _seam_phase(weights, geo, geo.x[:, n - 2:], geo.y[:, n - 2:] - 1.0)
    ext = np.concatenate([bottom, data, top], axis=1)
    y = geo.y[..., None, None]
    t1 = geo.tau.real

    def shift(k: int) -> np.ndarray:
        link = np.exp(2j * math.pi * t1 * weights * (k * h * y + 0.5 * (k * h) ** 2))
        return link * ext[:, 2 + k:n + 2 + k]

    return (8.0 * (shift(1) - shift(-1)) - (shift(2) - shift(-2))) / (12.0 * h)


def nabla_bar_raw(data: np.ndarray, weights: np.ndarray, geo: TorusGeometry) -> np.ndarray:
    """(0,1) part of the background Chern connection on unitary-frame components."""
    return (geo.tau * _covariant_x(data, weights, geo) - _covariant_y(data, weights, geo)) / (2j * geo.tau_im)


def nabla_raw(data: np.ndarray, weights: np.ndarray, geo: TorusGeometry) -> np.ndarray:
    """(1,0) part of the background Chern connection on unitary-frame components."""
    return (_covariant_y(data, weights, geo) - np.conj(geo.tau) * _covariant_x(data, weights, geo)) / (2j * geo.tau_im)


def d_bar(field: GridField, geo: TorusGeometry) -> GridField:
    """Entrywise d-bar. A (1,0)-form a dz goes to the dz-bar ^ dz component."""
    if field.form == ZERO_ONE or field.form == TWO_FORM:
        raise ValueError("d_bar of a (0,1)- or (1,1)-form vanishes on a curve")
    out_form = ZERO_ONE if field.form == FUNCTION else TWO_FORM
    return GridField(d_bar_raw(field.data, field.weights, geo), field.weights, out_form)


def d_z(field: GridField, geo: TorusGeometry) -> GridField:
    """Entrywise d. A (0,1)-form u dz-bar goes to -du/dz on dz-bar ^ dz."""
    if field.form == ONE_ZERO or field.form == TWO_FORM:
        raise ValueError("d_z of a (1,0)- or (1,1)-form vanishes on a curve")
    derivative = d_z_raw(field.data, field.weights, geo)
    if field.form == FUNCTION:
        return GridField(derivative, field.weights, ONE_ZERO)
    return GridField(-derivative, field.weights, TWO_FORM)


def lambda_contract(two_form: GridField, geo: TorusGeometry) -> GridField:
    """Contraction with the Kahler form."""
    if two_form.form != TWO_FORM:
        raise ValueError("lambda_contract expects a (1,1)-form component field")
    return GridField(two_form.data * geo.lambda_factor, two_form.weights, FUNCTION, two_form.hermitian)


def grid_integral(values: np.ndarray, geo: TorusGeometry) -> complex:
    return complex(geo.quadrature(values))


def pointwise_inner(a: np.ndarray, b: np.ndarray, metric: Optional[np.ndarray] = None) -> np.ndarray:
    """Tr(a b*) at every grid point; b* is the metric adjoint when a metric is given."""
    b_star = dagger(b) if metric is None else h_adjoint(b, metric)
    return trace(a @ b_star)


def l2_inner(a: GridField, b: GridField, geo: TorusGeometry, metric: Optional[np.ndarray] = None) -> complex:
    """
    L2 inner product of End(E)-valued fields under unit total volume.

    With ``metric`` (a pointwise Hermitian matrix field H) the adjoint is
    H^-1 b^dagger H, otherwise the plain conjugate transpose.
    """
    a._check_compatible(b)
    values = pointwise_inner(a.data, b.data, metric)
    return complex(geo.quadrature(values)) * geo.form_weight(a.form)


def l2_norm_sq(a: GridField, geo: TorusGeometry, metric: Optional[np.ndarray] = None) -> float:
    return float(l2_inner(a, a, geo, metric).real)
