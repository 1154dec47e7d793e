import numpy as np
import pytest

from cmaxsim.core.errors import DataError, EventOrderError, EventParseError, ImuOrderError, OutOfRangeError
from cmaxsim.models.schemas import CameraIntrinsics, EventStream, ImuTrack, MotionParams
from cmaxsim.services.events_service import (
    load_calib,
    load_events,
    load_imu,
    random_texture,
    synth_scene,
    window_by_count,
    write_calib,
    write_events,
    write_imu,
)


def test_load_events_remaps_polarity(tmp_path, intr):
    path = tmp_path / "events.txt"
    path.write_text("# t x y p\n0.001 3 4 1\n0.002 10 20 0\n\n0.003 63 47 1\n", encoding="utf-8")
    stream = load_events(path, intr)
    assert len(stream) == 3
    assert stream.p.tolist() == [1, -1, 1], "polarity 0/1 should become -1/+1"
    assert stream.x.tolist() == [3, 10, 63]
    assert stream.t.tolist() == [0.001, 0.002, 0.003]


def test_load_events_reports_line_number(tmp_path, intr):
    path = tmp_path / "events.txt"
    path.write_text("0.001 3 4 1\n0.002 x 4 1\n", encoding="utf-8")
    with pytest.raises(EventParseError) as exc:
        load_events(path, intr)
    assert exc.value.line_no == 2
    assert exc.value.path == str(path)


def test_load_events_rejects_bad_polarity_and_range(tmp_path, intr):
    bad_p = tmp_path / "p.txt"
    bad_p.write_text("0.001 3 4 2\n", encoding="utf-8")
    with pytest.raises(EventParseError):
        load_events(bad_p, intr)

    outside = tmp_path / "xy.txt"
    outside.write_text("0.001 3 4 1\n0.002 64 4 1\n", encoding="utf-8")
    with pytest.raises(OutOfRangeError):
        load_events(outside, intr)


def test_load_events_empty_and_missing(tmp_path, intr):
    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing here\n", encoding="utf-8")
    assert len(load_events(empty, intr)) == 0
    with pytest.raises(DataError):
        load_events(tmp_path / "missing.txt", intr)


def test_window_by_count_drops_remainder(intr):
    n = 25
    stream = EventStream(np.arange(n) % 64, np.zeros(n), np.arange(n) * 1e-3, np.ones(n), 64, 48)
    windows = window_by_count(stream, 10)
    assert len(windows) == 2
    assert [w.n for w in windows] == [10, 10]
    assert windows[1].start == 10 and windows[1].index == 1
    assert windows[1].t_ref == pytest.approx(0.010)
    assert window_by_count(stream, 30) == []
    with pytest.raises(DataError):
        window_by_count(stream, 0)


def test_events_must_be_time_ordered(tmp_path, intr):
    path = tmp_path / "events.txt"
    path.write_text("0.001 3 4 1\n0.003 5 6 0\n0.002 7 8 1\n0.004 9 9 1\n", encoding="utf-8")
    with pytest.raises(EventOrderError) as exc:
        load_events(path, intr)
    assert exc.value.line_no == 3
    assert isinstance(exc.value, DataError)

    # equal timestamps are fine
    path.write_text("0.001 3 4 1\n0.001 5 6 0\n0.002 7 8 1\n", encoding="utf-8")
    assert len(load_events(path, intr)) == 3

    t = np.array([0.0, 0.1, 0.05, 0.2])
    shuffled = EventStream(np.zeros(4), np.zeros(4), t, np.ones(4), 64, 48)
    with pytest.raises(EventOrderError, match="event 2"):
        window_by_count(shuffled, 2)


def test_imu_must_be_ordered(tmp_path):
    path = tmp_path / "imu.txt"
    path.write_text("0.0 0 0 0\n0.2 1 1 1\n0.1 1 1 1\n", encoding="utf-8")
    with pytest.raises(ImuOrderError):
        load_imu(path)


def test_imu_lookup_interpolates_and_coverage():
    track = ImuTrack(np.array([0.0, 1.0]), np.array([[0.0, 0.0, 0.0], [1.0, 2.0, -2.0]]))
    np.testing.assert_allclose(track.lookup(0.25), [0.25, 0.5, -0.5])
    assert track.covers(0.5)
    assert not track.covers(1.5)


def test_writers_round_trip(tmp_path, intr, scene):
    write_events(scene.events, tmp_path / "events.txt")
    assert load_events(tmp_path / "events.txt", intr).same_as(scene.events), "events should re-ingest exactly"

    track = ImuTrack(np.array([0.0, 0.001]), np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]))
    write_imu(track, tmp_path / "imu.txt")
    back = load_imu(tmp_path / "imu.txt")
    np.testing.assert_array_equal(back.omega, track.omega)

    write_calib(intr, tmp_path / "calib.txt")
    assert load_calib(tmp_path / "calib.txt", intr.width, intr.height) == intr


def test_load_calib_checks_principal_point(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text("60 60 100 24\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_calib(path, 64, 48)


def test_synth_scene_is_deterministic_and_time_ordered(intr):
    def make():
        rng = np.random.default_rng(3)
        return synth_scene(MotionParams(0.5, 0.2, -0.3), intr, 0.05, random_texture(100, intr, rng), rng=rng)

    a, b = make(), make()
    assert a.events.same_as(b.events)
    assert len(a.events) > 0
    assert np.all(np.diff(a.events.t) >= 0), "synthetic events must be time ordered"
    a.events.check_bounds()


def test_synth_scene_noise_fraction(intr):
    rng = np.random.default_rng(5)
    scene = synth_scene(MotionParams(0.5, 0.2, -0.3), intr, 0.05, random_texture(100, intr, rng), noise=0.2, rng=rng)
    noise = int(np.sum(scene.sources < 0))
    assert noise > 0
    assert noise / len(scene.events) == pytest.approx(0.2, abs=0.02)
    with pytest.raises(DataError):
        synth_scene(MotionParams(), intr, 0.05, random_texture(10, intr, rng), noise=1.0)


def test_static_scene_emits_nothing(intr):
    rng = np.random.default_rng(0)
    scene = synth_scene(MotionParams(), intr, 0.1, random_texture(50, intr, rng))
    assert len(scene.events) == 0


def test_motion_params_reject_nan():
    with pytest.raises(DataError):
        MotionParams(float("nan"), 0.0, 0.0)


def test_intrinsics_check():
    with pytest.raises(DataError):
        CameraIntrinsics(0.0, 60.0, 32.0, 24.0, 64, 48).check()
