"""Energy estimate from access counts and processing time."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import pandas as pd

from cmaxsim.core.errors import ConfigError
from cmaxsim.models.schemas import MEMORY_GROUPS, AccessCounter
from cmaxsim.services.engine_service import BASELINE, ENGINE, EngineTrace
from cmaxsim.utils.text_parsing import iter_data_lines, parse_float

DEFAULT_TABLE = Path(__file__).resolve().parents[1] / "data" / "energy_table.txt"
DEFAULT_CLOCK_HZ = 200e6
DEFAULT_LOGIC_POWER_MW = 42.78
# mW * s = 1e-3 J = 1e9 pJ
MW_S_TO_PJ = 1e9


@dataclass(frozen=True)
class MemoryGroupEnergy:
    group: str
    e_read_pj: float
    e_write_pj: float
    p_lkg_mw: float
    size_kb: float


@dataclass(frozen=True)
class EnergyTable:
    groups: Dict[str, MemoryGroupEnergy]

    def __getitem__(self, group: str) -> MemoryGroupEnergy:
        return self.groups[group]

    @property
    def total_leakage_mw(self) -> float:
        return sum(g.p_lkg_mw for g in self.groups.values())


def load_energy_table(path: Optional[str | Path] = None) -> EnergyTable:
    path = Path(path) if path else DEFAULT_TABLE
    if not path.exists():
        raise ConfigError(f"energy table not found: {path}")
    groups: Dict[str, MemoryGroupEnergy] = {}
    for line_no, tokens in iter_data_lines(path):
        if len(tokens) != 5:
            raise ConfigError(f"{path}:{line_no}: expected 'group E_read E_write P_lkg size_KB'")
        name = tokens[0]
        if name not in MEMORY_GROUPS:
            raise ConfigError(f"{path}:{line_no}: unknown memory group {name!r}")
        values = [parse_float(t, path, line_no, name) for t in tokens[1:]]
        groups[name] = MemoryGroupEnergy(name, *values)
    missing = [g for g in MEMORY_GROUPS if g not in groups]
    if missing:
        raise ConfigError(f"{path}: missing memory groups {missing}")
    return EnergyTable(groups)


@dataclass(frozen=True)
class EnergyBreakdown:
    """Energy in pJ. ``mem_rw`` is dynamic memory energy, ``logic_lkg`` logic plus leakage."""

    dynamic_by_group: Dict[str, float]
    leakage_by_group: Dict[str, float]
    logic: float
    duration_s: float

    @property
    def mem_rw(self) -> float:
        return sum(self.dynamic_by_group.values())

    @property
    def mem_lkg(self) -> float:
        return sum(self.leakage_by_group.values())

    @property
    def logic_lkg(self) -> float:
        return self.logic + self.mem_lkg

    @property
    def total(self) -> float:
        return self.mem_rw + self.logic_lkg


def cycles_to_seconds(cycles: int, clock_hz: float = DEFAULT_CLOCK_HZ) -> float:
    return cycles / clock_hz


def energy_estimate(accesses: AccessCounter, duration_s: float, table: Optional[EnergyTable] = None,
                    logic_power_mw: float = DEFAULT_LOGIC_POWER_MW) -> EnergyBreakdown:
    table = table or load_energy_table()
    dynamic = {
        g: accesses.reads[g] * table[g].e_read_pj + accesses.writes[g] * table[g].e_write_pj
        for g in MEMORY_GROUPS
    }
    leakage = {g: table[g].p_lkg_mw * duration_s * MW_S_TO_PJ for g in MEMORY_GROUPS}
    logic = logic_power_mw * duration_s * MW_S_TO_PJ
    return EnergyBreakdown(dynamic, leakage, logic, duration_s)


def saving(engine: float, baseline: float) -> float:
    """Relative change of engine against baseline, negative when the engine is cheaper."""
    if baseline == 0:
        return 0.0
    return (engine - baseline) / baseline


DESIGN_COLUMNS = [
    "design", "windows", "reads", "writes", "accesses", "cycles", "latency_ms",
    "E_mem_rw_pJ", "E_mem_lkg_pJ", "E_logic_pJ", "E_logic_lkg_pJ", "E_total_pJ",
]


def add_stage_energy(stage_df: pd.DataFrame, table: EnergyTable, clock_hz: float = DEFAULT_CLOCK_HZ) -> pd.DataFrame:
    """Append ``<group>_energy_pJ`` (dynamic plus leakage over the stage's cycles)."""
    out = stage_df.copy()
    duration = out["cycles"].astype(float) / clock_hz
    for g in MEMORY_GROUPS:
        e = table[g]
        out[f"{g}_energy_pJ"] = (out[f"{g}_reads"] * e.e_read_pj + out[f"{g}_writes"] * e.e_write_pj
                                 + e.p_lkg_mw * duration * MW_S_TO_PJ)
    return out


def design_frame(trace: EngineTrace, table: EnergyTable, n_windows: int,
                 designs: tuple = (ENGINE, BASELINE), clock_hz: float = DEFAULT_CLOCK_HZ,
                 logic_power_mw: float = DEFAULT_LOGIC_POWER_MW) -> pd.DataFrame:
    """Totals per design over ``n_windows`` simulated windows; latency is the per-window average."""
    rows = []
    for design in designs:
        acc = trace.accesses(design)
        cycles = trace.cycles(design)
        duration = cycles_to_seconds(cycles, clock_hz)
        en = energy_estimate(acc, duration, table, logic_power_mw)
        reads = sum(acc.reads.values())
        writes = sum(acc.writes.values())
        latency_ms = 1e3 * duration / n_windows if n_windows else 0.0
        rows.append([design, n_windows, reads, writes, reads + writes, cycles, latency_ms,
                     en.mem_rw, en.mem_lkg, en.logic, en.logic_lkg, en.total])
    return pd.DataFrame(rows, columns=DESIGN_COLUMNS)
