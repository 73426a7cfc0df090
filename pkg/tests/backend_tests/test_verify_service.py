"""
Test script for the invariant battery.
"""
import pytest

from app.config import build_config, settings
from app.exceptions import ConfigError
from app.services import verify_service

ALGEBRAIC_CHECKS = [
    "projection_axioms",
    "psi_squared_identity",
    "trace_psi",
    "psi_norm_metric_independence",
    "degree_metric_independence",
    "dominance_order_properties",
    "hn_type_agreement",
]


def _config(degrees, cocycle="theta", n_grid=16):
    return build_config({
        "geometry": {"n_grid": n_grid},
        "bundle": {"degrees": list(degrees), "cocycle": cocycle},
        "perturbation": {"seed": 0},
    })


def test_battery_order_and_tolerances():
    print("=" * 60)
    print("Testing verify battery layout")
    print("=" * 60)

    names = list(verify_service.CHECKS)
    assert names[0] == "projection_axioms"
    assert names[-1] == "hn_type_agreement"
    assert set(verify_service.check_tolerances()) == set(names)
    assert verify_service.check_tolerances()["path_independence"] == settings.path_tolerance
    print(f"[OK] {len(names)} checks")


def test_check_result_line():
    passed = verify_service.CheckResult("trace_psi", 1e-12, 1e-10)
    assert passed.passed
    assert passed.line().startswith("[PASS] trace_psi: 1.000e-12")

    failed = verify_service.CheckResult("trace_psi", 0.0, -1.0, "(fault injected)")
    assert not failed.passed
    assert failed.line().startswith("[FAIL] trace_psi")
    assert failed.line().endswith("(fault injected)")


def test_algebraic_checks_pass():
    for degrees in ((1, 0), (1, 1, 0)):
        results = verify_service.verify(_config(degrees), only=ALGEBRAIC_CHECKS)
        assert [result.name for result in results] == ALGEBRAIC_CHECKS
        for result in results:
            print(result.line())
            assert result.passed, result.line()
        print(f"[OK] {degrees}: algebraic checks pass")


def test_rank_one_full_battery():
    results = verify_service.verify(_config((1,), cocycle="none"))
    assert len(results) == len(verify_service.CHECKS)
    assert verify_service.all_passed(results), [r.line() for r in results if not r.passed]


def test_path_independence_on_fine_grid():
    results = verify_service.verify(_config((1, 0), n_grid=64), only=["path_independence"])
    print(results[0].line())
    assert results[0].tolerance == 1e-6
    assert results[0].passed, results[0].line()


def test_fault_injection():
    results = verify_service.verify(_config((1, 0)), inject_fault=["trace_psi"], only=["trace_psi", "projection_axioms"])
    by_name = {result.name: result for result in results}
    assert not by_name["trace_psi"].passed
    assert by_name["projection_axioms"].passed
    assert not verify_service.all_passed(results)
    print("[OK] injected fault fails only its own check")


def test_unknown_check_names():
    with pytest.raises(ConfigError, match="unknown verify check"):
        verify_service.verify(_config((1, 0)), inject_fault=["nonsense"])
    with pytest.raises(ConfigError, match="unknown verify check"):
        verify_service.verify(_config((1, 0)), only=["also_nonsense"])


def main():
    tests = [
        test_battery_order_and_tolerances,
        test_check_result_line,
        test_algebraic_checks_pass,
        test_rank_one_full_battery,
        test_path_independence_on_fine_grid,
        test_fault_injection,
        test_unknown_check_names,
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
