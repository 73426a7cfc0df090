"""
Pointwise matrix helpers for stacked fields.

Every function here acts on arrays of shape (..., r, r) and treats the
leading axes as grid points. Hermitian functions go through ``eigh`` so
that exp/log/sqrt of a positive Hermitian field stay Hermitian.
"""
import numpy as np

from app.exceptions import MetricDegenerateError

# Smallest eigenvalue accepted for a metric before it counts as degenerate
POSITIVITY_FLOOR = 1e-14


def dagger(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose of the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def hermitian_part(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + dagger(a))


def trace(a: np.ndarray) -> np.ndarray:
    return np.trace(a, axis1=-2, axis2=-1)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def identity_field(shape, rank: int) -> np.ndarray:
    return np.broadcast_to(np.eye(rank, dtype=complex), tuple(shape) + (rank, rank)).copy()


def eig_apply(a: np.ndarray, fn) -> np.ndarray:
    """Apply a scalar function to a Hermitian field through its spectrum."""
    w, v = np.linalg.eigh(hermitian_part(a))
    return (v * fn(w)[..., None, :]) @ dagger(v)


def expm_h(a: np.ndarray) -> np.ndarray:
    return eig_apply(a, np.exp)


def logm_h(a: np.ndarray) -> np.ndarray:
    """Logarithm of a positive Hermitian field."""
    w, v = np.linalg.eigh(hermitian_part(a))
    lowest = float(w.min())
    if lowest <= POSITIVITY_FLOOR:
        raise MetricDegenerateError(
            "metric lost positive-definiteness",
            {"min_eigenvalue": lowest},
        )
    return (v * np.log(w)[..., None, :]) @ dagger(v)


def sqrtm_h(a: np.ndarray) -> np.ndarray:
    return eig_apply(a, np.sqrt)


def min_eigenvalue(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(hermitian_part(a)).min())


def h_adjoint(a: np.ndarray, metric: np.ndarray) -> np.ndarray:
    """Adjoint with respect to a pointwise Hermitian metric: H^-1 a^dagger H."""
    return np.linalg.solve(metric, dagger(a) @ metric)


def real_spectrum(a: np.ndarray, metric: np.ndarray) -> np.ndarray:
    """
    Eigenvalues of a field that is self-adjoint for ``metric``, sorted
    non-increasing along the last axis.

    The field is conjugated by the Hermitian square root of the metric,
    which turns it into an ordinary Hermitian field.
    """
    root = sqrtm_h(metric)
    inv_root = eig_apply(metric, lambda w: 1.0 / np.sqrt(w))
    conjugated = hermitian_part(root @ a @ inv_root)
    return np.linalg.eigvalsh(conjugated)[..., ::-1]
