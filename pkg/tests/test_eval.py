import math

import numpy as np
import pandas as pd
import pytest

from cmaxsim.core.errors import AlignmentError, DataError
from cmaxsim.models.schemas import ImuTrack
from cmaxsim.services.eval_service import (
    check_alignment,
    comparison_frame,
    deviation_metric,
    method_run,
    realtime_lines,
    report,
    rmse,
    rmse_frame,
    segment_bounds,
    window_error,
)

IMU = ImuTrack(np.array([0.0, 1.0]), np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))


def _estimates(omegas, t_mid=None, windows=None):
    omegas = np.asarray(omegas, dtype=float)
    n = len(omegas)
    return pd.DataFrame({
        "window": np.arange(n) if windows is None else windows,
        "t_mid": np.linspace(0.2, 0.8, n) if t_mid is None else t_mid,
        "omega_x": omegas[:, 0], "omega_y": omegas[:, 1], "omega_z": omegas[:, 2],
    })


def _designs(engine_latency=1.0):
    return pd.DataFrame({
        "design": ["engine", "baseline"],
        "accesses": [600, 1000],
        "latency_ms": [engine_latency, 8.0],
        "E_mem_rw_pJ": [50.0, 100.0],
        "E_logic_lkg_pJ": [30.0, 40.0],
        "E_total_pJ": [80.0, 140.0],
    })


def test_rmse_examples():
    assert rmse([3.0, 4.0]) == pytest.approx(math.sqrt(12.5))
    assert rmse([0.0]) == 0.0
    with pytest.raises(DataError):
        rmse([])
    assert window_error([1.0, 2.0, 2.0], [0.0, 0.0, 0.0]) == pytest.approx(3.0)


def test_deviation_single_segment():
    dev = deviation_metric([2.0, 4.0, 6.0], [0.0, 0.0, 0.0], [0.0, 1.0, 2.0], bounds=(0.0, 10.0))
    np.testing.assert_allclose(dev.values, [0.0, 0.5, 1.0])
    assert dev.degenerate == []


def test_identical_methods_deviate_by_zero():
    e = [0.1, 0.2, 0.3, 0.4]
    dev = deviation_metric(e, e, [0.0, 1.0, 2.0, 3.0], bounds=(0.0, 10.0))
    assert not dev.values.any()
    assert dev.degenerate == [0]


def test_deviation_is_normalised_per_segment():
    t = np.array([0.0, 1.0, 20.0, 21.0])
    dev = deviation_metric([1.0, 3.0, 10.0, 30.0], np.zeros(4), t, bounds=(0.0, 15.0, 30.0))
    assert dev.segment.tolist() == [0, 0, 1, 1]
    np.testing.assert_allclose(dev.values, [0.0, 1.0, 0.0, 1.0])
    with pytest.raises(AlignmentError):
        deviation_metric([1.0], [1.0, 2.0], [0.0])


def test_short_sequences_shrink_the_segments():
    edges = segment_bounds(np.array([10.0, 12.0]))
    np.testing.assert_allclose(edges, [10.0, 10.5, 11.0, 11.5, 12.0])
    edges = segment_bounds(np.array([0.0, 100.0]))
    np.testing.assert_allclose(edges, [0.0, 15.0, 30.0, 45.0, 60.0])


def test_method_run_pairs_with_imu():
    run = method_run("adaptive", _estimates([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]], t_mid=[0.5, 2.0]), IMU)
    assert run.covered.tolist() == [True, False]
    err = run.errors()
    assert err[0] == pytest.approx(0.0)
    assert math.isnan(err[1])

    frame = rmse_frame({"adaptive": run})
    assert frame.loc[0, "covered_windows"] == 1
    assert frame.loc[0, "rmse_deg_s"] == pytest.approx(math.degrees(frame.loc[0, "rmse_rad_s"]))


def test_alignment_is_checked():
    a = method_run("full", _estimates(np.zeros((3, 3))), IMU)
    b = method_run("fixed", _estimates(np.zeros((2, 3))), IMU)
    with pytest.raises(AlignmentError):
        check_alignment({"full": a, "fixed": b})
    c = method_run("fixed", _estimates(np.zeros((3, 3)), windows=[0, 1, 5]), IMU)
    with pytest.raises(AlignmentError):
        check_alignment({"full": a, "fixed": c})


def test_comparison_frame():
    cmp = comparison_frame(_designs())
    assert cmp["metric"].tolist() == ["accesses", "latency_ms", "E_mem.R/W", "E_logic+E_mem.lkg", "E_total"]
    assert cmp.loc[0, "change_pct"] == pytest.approx(-40.0)
    assert cmp.loc[2, "change_pct"] == pytest.approx(-50.0)


def test_realtime_verdicts():
    lines = realtime_lines(_designs(engine_latency=5.0), 5.72)
    assert lines[0].startswith("Real-time bound 5.72 ms")
    assert "meets" in lines[1] and "misses" in lines[2]


def test_report_writes_every_file(tmp_path):
    omegas = np.array([[0.1, 0.0, 0.0], [0.5, 0.0, 0.0], [0.9, 0.0, 0.0]])
    runs = {
        "full": method_run("full", _estimates(omegas), IMU),
        "adaptive": method_run("adaptive", _estimates(omegas + 0.05), IMU),
    }
    written = report(runs, tmp_path, designs=_designs())
    assert set(written) == {"rmse", "deviation", "comparison", "summary"}
    summary = (tmp_path / "summary.txt").read_text()
    assert "rad/s" in summary and "deg/s" in summary
    assert "Real-time bound" in summary
    rm = pd.read_csv(written["rmse"])
    assert rm["method"].tolist() == ["full", "adaptive"]

    with pytest.raises(DataError):
        report({}, tmp_path)


def test_report_without_full_skips_deviation(tmp_path):
    runs = {"fixed": method_run("fixed", _estimates(np.zeros((2, 3))), IMU)}
    written = report(runs, tmp_path)
    assert set(written) == {"rmse", "summary"}
