"""
Closed-form test data on the torus: theta sections, periodic bumps and
seeded band-limited random fields.
"""
import math

import numpy as np
from scipy import fft


def theta_section(z: np.ndarray, tau: complex, degree: int, terms: int = 0) -> np.ndarray:
    """
    Degree-``degree`` theta function in the classical convention.

    The returned values satisfy

        s(z + 1)   = s(z)
        s(z + tau) = exp(-pi i degree (2 z + tau)) s(z)

    and the function is holomorphic. Degree 0 gives the constant 1.
    """
    if degree < 0:
        raise ValueError("theta sections exist only for degree >= 0")
    if degree == 0:
        return np.ones_like(z, dtype=complex)

    if terms <= 0:
        # enough terms for exp(-pi degree Im(tau) n^2) to reach ~1e-40
        terms = int(math.ceil(math.sqrt(92.0 / (math.pi * degree * tau.imag)))) + 3

    n = np.arange(-terms, terms + 1)
    phase = (1j * math.pi * degree * tau) * n ** 2
    expo = phase[:, None] + (2j * math.pi * degree) * n[:, None] * np.ravel(z)[None, :]
    return np.exp(expo).sum(axis=0).reshape(np.shape(z))


def bump(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Smooth periodic bump with maximum 1 at the origin."""
    return np.exp(np.cos(2 * math.pi * x) + np.cos(2 * math.pi * y) - 2.0)


def band_limited_field(n_grid: int, rng: np.random.Generator, max_mode: int, extra_shape=()) -> np.ndarray:
    """
    Seeded smooth periodic complex field on the n_grid x n_grid grid.

    Fourier modes with |kx|, |ky| <= max_mode get Gaussian coefficients
    damped by (1 + |k|^2)^-2; every other mode is zero.
    """
    shape = (n_grid, n_grid) + tuple(extra_shape)
    coeffs = np.zeros(shape, dtype=complex)
    modes = np.arange(-max_mode, max_mode + 1)
    for kx in modes:
        for ky in modes:
            damping = 1.0 / (1.0 + kx * kx + ky * ky) ** 2
            draw = rng.standard_normal(tuple(extra_shape)) + 1j * rng.standard_normal(tuple(extra_shape))
            coeffs[kx % n_grid, ky % n_grid] = damping * draw
    return fft.ifft2(coeffs, axes=(0, 1)) * (n_grid * n_grid)
