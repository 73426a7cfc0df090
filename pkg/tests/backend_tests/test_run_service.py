"""
Test script for end-to-end runs and sweeps.
"""
import json
import os
import tempfile
from unittest.mock import patch

import pytest

from app.config import build_config
from app.exceptions import MetricDegenerateError
from app.services import flow, run_service, trace_store
from app.services.bundle import MetricField


def _config(directory: str, **sections):
    data = {
        "geometry": {"tau": [0.0, 1.0], "n_grid": 16},
        "bundle": {"degrees": [1, 0], "cocycle": "none"},
        "flow": {"dt": 5e-3, "t_end": 0.05, "epsilon": 1e-8, "sample_every": 5},
        "output": {"directory": directory},
    }
    for name, values in sections.items():
        data[name] = dict(data.get(name, {}), **values)
    return build_config(data)


def test_run_converged_at_background():
    """Split bundle from H0: Lambda F = Psi at t = 0."""

    print("=" * 60)
    print("Testing run_service.run")
    print("=" * 60)

    with tempfile.TemporaryDirectory() as tmp:
        result = run_service.run(_config(tmp, flow={"epsilon": 1e-6}))
        assert result.status == "converged"
        assert result.exit_code == run_service.EXIT_SUCCESS

        for name in (trace_store.TRACE_FILE, trace_store.MANIFEST_FILE,
                     trace_store.SUMMARY_FILE, trace_store.EVENTS_FILE):
            assert os.path.exists(os.path.join(tmp, name)), name

        manifest = trace_store.read_manifest(tmp)
        for key in ("artifact", "version", "config", "calibration", "declared_hn_type",
                    "wall_clock_seconds", "started_utc", "status", "terminal"):
            assert key in manifest, key
        assert manifest["declared_hn_type"] == [1.0, 0.0]
        assert manifest["terminal"]["dominance"] == "PASS"
        assert manifest["config"]["bundle"]["degrees"] == [1, 0]

        with open(os.path.join(tmp, trace_store.SUMMARY_FILE), "r", encoding="utf-8") as f:
            summary = f.read()
        assert "Atiyah-Bott" in summary
        assert "dominance: PASS" in summary

        with open(os.path.join(tmp, trace_store.EVENTS_FILE), "r", encoding="utf-8") as f:
            stages = [(event["stage"], event["status"]) for event in map(json.loads, f)]
        assert stages == [
            ("build_bundle", "begin"), ("build_bundle", "end"),
            ("flow", "begin"), ("flow", "end"),
            ("persist", "begin"), ("persist", "end"),
        ]
        print(f"[OK] {result.directory}: {result.status}")


def test_run_not_converged():
    with tempfile.TemporaryDirectory() as tmp:
        config = _config(tmp, bundle={"cocycle": "theta"}, perturbation={"seed": 1, "magnitude": 0.3})
        result = run_service.run(config)
        assert result.status == "not_converged"
        assert result.exit_code == run_service.EXIT_NOT_CONVERGED
        assert "epsilon" in result.manifest["message"]

        rows = trace_store.read_trace_csv(os.path.join(tmp, trace_store.TRACE_FILE))
        # t = 0, every 5 steps, and the terminal state
        assert len(rows) == 3
        assert abs(rows[-1]["t"] - 0.05) <= 1e-12

        energies = [row["hym_energy"] for row in rows]
        assert abs(result.manifest["terminal"]["inf_hym_energy"] - min(energies)) <= 1e-12
        with open(os.path.join(tmp, trace_store.SUMMARY_FILE), "r", encoding="utf-8") as f:
            summary = f.read()
        assert f"inf ||Lambda F||^2 = {min(energies):.10f}" in summary
        assert abs(result.manifest["functional_gap"]) <= 1e-3
        print(f"[OK] not converged, {len(rows)} samples")


def test_runs_are_byte_identical():
    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for name in ("first", "second"):
            directory = os.path.join(tmp, name)
            config = _config(directory, bundle={"cocycle": "theta"}, perturbation={"seed": 3, "magnitude": 0.2})
            run_service.run(config)
            paths.append(os.path.join(directory, trace_store.TRACE_FILE))
        with open(paths[0], "rb") as f1, open(paths[1], "rb") as f2:
            assert f1.read() == f2.read()
        print("[OK] same seed, same trace bytes")


def test_initial_metric():
    with tempfile.TemporaryDirectory() as tmp:
        config = _config(tmp)
        bundle = run_service.build_bundle(config)
        assert bundle.geometry.n_grid == 16
        assert run_service.build_bundle(config, 32).geometry.n_grid == 32

        metric = run_service.initial_metric(bundle, config)
        assert isinstance(metric, MetricField)
        assert not metric.log_h.any()


def test_sweep_writes_index():
    with tempfile.TemporaryDirectory() as tmp:
        config = _config(tmp, bundle={"cocycle": "theta"}, sweep={"amplitudes": [0.5, 0.0]},
                         flow={"epsilon": 1e-6})
        results = run_service.sweep(config)
        assert len(results) == 2
        assert results[0].directory == os.path.join(tmp, "amp_00_0.5")
        assert results[1].directory == os.path.join(tmp, "amp_01_0")

        # amplitude 0 is the split bundle, already at Lambda F = Psi
        assert results[1].status == "converged"
        assert results[0].status == "not_converged"
        assert run_service.combined_exit_code(results) == run_service.EXIT_NOT_CONVERGED

        entries = trace_store.read_index(tmp)
        assert [entry["amplitude"] for entry in entries] == [0.0, 0.5]
        assert entries[0]["directory"] == "amp_01_0"
        print("[OK] sweep index sorted by amplitude")

        with pytest.raises(ValueError, match="amplitudes"):
            run_service.sweep(_config(tmp))


def test_aborted_run_keeps_partial_trace():
    """A flow that loses positivity exits 3 and still writes its artifacts."""

    real_step = flow.donaldson_step
    calls = {"count": 0}

    def failing_step(state, dt):
        calls["count"] += 1
        if calls["count"] > 3:
            raise MetricDegenerateError("metric lost positivity", {"min_eigenvalue": 0.0})
        return real_step(state, dt)

    with tempfile.TemporaryDirectory() as tmp:
        config = _config(tmp, bundle={"cocycle": "theta"}, flow={"sample_every": 1})
        with patch("app.services.flow.donaldson_step", side_effect=failing_step):
            result = run_service.run(config)

        assert result.status == "aborted"
        assert result.exit_code == run_service.EXIT_ABORTED
        for name in (trace_store.TRACE_FILE, trace_store.MANIFEST_FILE, trace_store.SUMMARY_FILE):
            assert os.path.exists(os.path.join(tmp, name)), name

        rows = trace_store.read_trace_csv(os.path.join(tmp, trace_store.TRACE_FILE))
        assert len(rows) == 4
        manifest = trace_store.read_manifest(tmp)
        assert manifest["status"] == "aborted"
        assert manifest["terminal"]["dominance"] in ("PASS", "FAIL")
        assert "functional_gap" not in manifest

        with open(os.path.join(tmp, trace_store.EVENTS_FILE), "r", encoding="utf-8") as f:
            stages = [(event["stage"], event["status"]) for event in map(json.loads, f)]
        assert ("flow", "fail") in stages
        assert stages[-1] == ("persist", "end")
        print(f"[OK] aborted after {len(rows)} samples, exit {result.exit_code}")


def test_parallel_sweep_matches_serial_sweep():
    with tempfile.TemporaryDirectory() as tmp:
        traces = []
        for name, n_jobs in (("serial", 1), ("parallel", 2)):
            root = os.path.join(tmp, name)
            config = _config(root, bundle={"cocycle": "theta"}, sweep={"amplitudes": [1.0, 0.5]},
                             perturbation={"seed": 4, "magnitude": 0.2})
            results = run_service.sweep(config, n_jobs=n_jobs)
            assert [result.directory for result in results] == [
                os.path.join(root, "amp_00_1"), os.path.join(root, "amp_01_0.5"),
            ]
            assert [entry["amplitude"] for entry in trace_store.read_index(root)] == [0.5, 1.0]
            contents = []
            for result in results:
                with open(os.path.join(result.directory, trace_store.TRACE_FILE), "rb") as f:
                    contents.append(f.read())
            traces.append(contents)
        assert traces[0] == traces[1]
        print("[OK] two-worker sweep writes the same traces as a serial sweep")


def test_combined_exit_code():
    assert run_service.combined_exit_code([]) == run_service.EXIT_SUCCESS


def test_discretization_study_is_fourth_order():
    with tempfile.TemporaryDirectory() as tmp:
        config = _config(tmp, bundle={"cocycle": "theta"}, perturbation={"seed": 2, "magnitude": 0.5})
        study = run_service.discretization_study(config)
        print(f"[CHECK] flag degree error {study.error_coarse:.3e} -> {study.error_fine:.3e}, ratio {study.ratio:.1f}")
        assert study.n_fine == 2 * study.n_coarse
        assert study.ratio >= 8.0


def main():
    tests = [
        test_run_converged_at_background,
        test_run_not_converged,
        test_runs_are_byte_identical,
        test_initial_metric,
        test_sweep_writes_index,
        test_aborted_run_keeps_partial_trace,
        test_parallel_sweep_matches_serial_sweep,
        test_combined_exit_code,
        test_discretization_study_is_fourth_order,
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
