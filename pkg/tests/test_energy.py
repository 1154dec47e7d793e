import pytest

from cmaxsim.core.errors import ConfigError
from cmaxsim.models.schemas import MEMORY_GROUPS, AccessCounter
from cmaxsim.services.energy_service import (
    DESIGN_COLUMNS,
    add_stage_energy,
    cycles_to_seconds,
    design_frame,
    energy_estimate,
    load_energy_table,
    saving,
)
from cmaxsim.services.engine_service import BASELINE, ENGINE, EngineTrace, StageReplay, replay_stage
from cmaxsim.models.schemas import MotionParams


@pytest.fixture
def table():
    return load_energy_table()


def test_default_table(table):
    assert table["iwe"].e_read_pj == 11.26
    assert table["raw"].e_write_pj == 21.44
    assert table["sort"].size_kb == 520
    assert table.total_leakage_mw == pytest.approx(12.39 + 3.08 + 10.19 + 1.43)


def test_reads_cost_table_energy(table):
    acc = AccessCounter()
    acc.read("iwe", 100)
    en = energy_estimate(acc, 0.0, table)
    assert en.mem_rw == pytest.approx(1126.0)
    assert en.logic_lkg == 0.0
    assert en.total == pytest.approx(1126.0)


def test_idle_time_costs_leakage_and_logic(table):
    en = energy_estimate(AccessCounter(), 1e-3, table, logic_power_mw=42.78)
    assert en.mem_rw == 0.0
    assert en.mem_lkg == pytest.approx((12.39 + 3.08 + 10.19 + 1.43) * 1e-3 * 1e9)
    assert en.logic == pytest.approx(42.78e6)
    assert en.total == pytest.approx(en.mem_lkg + en.logic)


def test_cycles_and_saving():
    assert cycles_to_seconds(200, 200e6) == pytest.approx(1e-6)
    assert saving(50.0, 100.0) == pytest.approx(-0.5)
    assert saving(1.0, 0.0) == 0.0


@pytest.mark.parametrize("body, message", [
    ("iwe 1 2 3\n", "expected"),
    ("iwe 1 2 3 4\nraw 1 2 3 4\nsort 1 2 3 4\n", "missing"),
    ("cache 1 2 3 4\n", "unknown"),
])
def test_malformed_tables(tmp_path, body, message):
    path = tmp_path / "table.txt"
    path.write_text("# group E_read E_write P_lkg size\n" + body)
    with pytest.raises(ConfigError, match=message):
        load_energy_table(path)


def test_missing_table(tmp_path):
    with pytest.raises(ConfigError):
        load_energy_table(tmp_path / "absent.txt")


def test_design_and_stage_frames(intr, small_window, table):
    trace = EngineTrace()
    replay = StageReplay(0, 0.5, MotionParams(0.5, -0.3, 0.8), [MotionParams(0.5, -0.3, 0.8)])
    replay_stage(ENGINE, replay, small_window, intr, trace)
    replay_stage(BASELINE, replay, small_window, intr, trace)

    frame = design_frame(trace, table, n_windows=1)
    assert list(frame.columns) == DESIGN_COLUMNS
    assert frame["design"].tolist() == [ENGINE, BASELINE]
    for _, row in frame.iterrows():
        assert row["accesses"] == row["reads"] + row["writes"]
        assert row["E_total_pJ"] == pytest.approx(row["E_mem_rw_pJ"] + row["E_logic_lkg_pJ"])
        assert row["latency_ms"] == pytest.approx(1e3 * row["cycles"] / 200e6)

    stages = add_stage_energy(trace.stage_frame(), table)
    for g in MEMORY_GROUPS:
        assert (stages[f"{g}_energy_pJ"] >= 0).all()
