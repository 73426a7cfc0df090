"""
Test script for the pointwise Hermitian helpers, checked against scipy.linalg.
"""
import numpy as np
import pytest
from scipy import linalg

from app.exceptions import MetricDegenerateError
from app.utils.hermitian import (
    dagger,
    expm_h,
    h_adjoint,
    logm_h,
    real_spectrum,
    sqrtm_h,
)


def _hermitian_stack(seed: int, count: int = 6, rank: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((count, rank, rank)) + 1j * rng.standard_normal((count, rank, rank))
    return 0.5 * (a + dagger(a))


def test_matrix_functions_match_scipy():
    print("=" * 60)
    print("Testing expm_h / logm_h / sqrtm_h")
    print("=" * 60)

    stack = _hermitian_stack(0)
    exp_stack = expm_h(stack)
    for a, e in zip(stack, exp_stack):
        np.testing.assert_allclose(e, linalg.expm(a), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(sqrtm_h(e), linalg.sqrtm(e), rtol=1e-10, atol=1e-12)
    print("[OK] expm_h and sqrtm_h agree with scipy.linalg")

    np.testing.assert_allclose(logm_h(exp_stack), stack, atol=1e-10)
    np.testing.assert_allclose(dagger(exp_stack), exp_stack, atol=1e-13)
    print("[OK] logm_h inverts expm_h, results Hermitian")


def test_logm_rejects_non_positive():
    singular = np.diag([1.0, 0.0]).astype(complex)[None]
    with pytest.raises(MetricDegenerateError) as info:
        logm_h(singular)
    assert info.value.diagnostics["min_eigenvalue"] <= 1e-14


def test_h_adjoint_and_real_spectrum():
    """A field self-adjoint for a metric has the real spectrum of its Hermitian conjugate."""

    metric = expm_h(_hermitian_stack(1))
    hermitian = _hermitian_stack(2)
    # X = H^-1 A with A Hermitian is H-self-adjoint
    field = np.linalg.solve(metric, hermitian)
    np.testing.assert_allclose(h_adjoint(field, metric), field, atol=1e-10)

    spectrum = real_spectrum(field, metric)
    assert np.all(np.diff(spectrum, axis=-1) <= 1e-12)
    for x, values in zip(field, spectrum):
        reference = np.sort(np.linalg.eigvals(x).real)[::-1]
        np.testing.assert_allclose(values, reference, atol=1e-9)
    print("[OK] H-adjoint and spectrum")


def main():
    tests = [
        test_matrix_functions_match_scipy,
        test_logm_rejects_non_positive,
        test_h_adjoint_and_real_spectrum,
    ]
    results = []
    for test in tests:
        try:
            test()
            results.append(True)
        except AssertionError as e:
            print(f"[FAIL] {test.__name__}: {e}")
            results.append(False)

    print("=" * 60)
    if all(results):
        print(f"[SUCCESS] ALL TESTS PASSED ({sum(results)}/{len(results)})")
    else:
        print(f"[FAILURE] {sum(results)}/{len(results)} tests passed")
    print("=" * 60)
    return all(results)


if __name__ == "__main__":
    success = main()
    exit(0 if success else 1)
