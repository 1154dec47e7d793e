"""Access-counting simulation of the engine datapath and of the baseline design.

One stage iteration streams the stage's retained events through the warp
front-end, bilinear voting, local accumulation and pending merge into the
banked memory, reads the four channels back through the line-buffer blur into
the running statistics, and clears the touched cells. The baseline design
commits all 16 tap updates of every event individually to a single-bank
memory and only sorts at the subsampled stages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from cmaxsim.core.errors import EngineError
from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import (
    MEMORY_GROUPS,
    AccessCounter,
    CameraIntrinsics,
    EventWindow,
    MotionParams,
    StageScale,
)
from cmaxsim.services.accumulation_service import IweChannels, accumulate_window, bilinear_vote_batch
from cmaxsim.services.banking_service import (
    N_LANES,
    BankedMemory,
    FedStream,
    direct_updates,
    ledger_check,
    local_accumulate,
    pending_commit,
)
from cmaxsim.services.contrast_service import (
    GaussianKernel,
    Objective,
    StreamStats,
    line_buffer_stats,
    make_kernel,
    objective_from_stats,
    smooth,
    stream_stats,
)
from cmaxsim.services.sorting_service import SortTables, pixel_group_sort
from cmaxsim.services.warp_service import warp_batch

logger = get_logger("engine")

ENGINE = "engine"
BASELINE = "baseline"
# Baseline: 16 serialised read-modify-writes on one bank, two per cycle
BASELINE_CYCLES_PER_EVENT = 8
CROSS_CHECK_RTOL = 1e-9


@dataclass
class EngineRecord:
    """Counters of one stage-entry pass (kind "entry") or one stage iteration."""

    design: str
    window: int
    stage: float
    kind: str
    iteration: int
    accesses: AccessCounter = field(default_factory=AccessCounter)
    n_window: int = 0
    n_fed: int = 0
    n_valid: int = 0
    active_groups: int = 0
    inlier_events: int = 0
    outlier_events: int = 0
    inlier_emissions: int = 0
    generated: int = 0
    absorbed: int = 0
    pending_hits: int = 0
    commits: int = 0
    cleared: int = 0
    cycles: int = 0
    fifo_max: int = 0
    flush_warnings: int = 0


@dataclass
class EngineTrace:
    records: List[EngineRecord] = field(default_factory=list)

    def add(self, record: EngineRecord) -> EngineRecord:
        self.records.append(record)
        return record

    def for_design(self, design: str) -> List[EngineRecord]:
        return [r for r in self.records if r.design == design]

    def accesses(self, design: str, stage: Optional[float] = None) -> AccessCounter:
        total = AccessCounter()
        for r in self.for_design(design):
            if stage is None or r.stage == stage:
                total.merge(r.accesses)
        return total

    def cycles(self, design: str, window: Optional[int] = None) -> int:
        return sum(r.cycles for r in self.for_design(design) if window is None or r.window == window)

    def windows(self) -> List[int]:
        return sorted({r.window for r in self.records})

    def stage_frame(self) -> pd.DataFrame:
        """One row per (design, stage) with access counts and locality statistics."""
        rows = []
        for design in (ENGINE, BASELINE):
            recs = self.for_design(design)
            for stage in sorted({r.stage for r in recs}):
                rows.append(_stage_row(design, stage, [r for r in recs if r.stage == stage]))
        return pd.DataFrame(rows, columns=STAGE_COLUMNS)


STAGE_COLUMNS = (
    ["design", "stage", "iterations"]
    + [f"{g}_{op}" for g in MEMORY_GROUPS for op in ("reads", "writes")]
    + ["generated", "absorbed", "pending_hits", "commits", "inlier_emissions", "outlier_count",
       "active_group_ratio", "outlier_ratio", "expected_update_ratio",
       "expected_reduction", "measured_reduction", "fifo_max", "flush_warnings", "cycles"]
)


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def _stage_row(design: str, stage: float, recs: List[EngineRecord]) -> Dict[str, object]:
    acc = AccessCounter()
    for r in recs:
        acc.merge(r.accesses)
    its = [r for r in recs if r.kind == "iteration"]
    n_total = sum(r.n_window for r in its)
    valid = sum(r.n_valid for r in its)
    generated = sum(r.generated for r in its)
    emissions = sum(r.inlier_emissions for r in its)
    outliers = sum(r.outlier_events for r in its)
    commits = sum(r.commits for r in its)
    active_ratio = _ratio(sum(r.active_groups for r in its), n_total)
    outlier_ratio = _ratio(outliers, n_total)
    row: Dict[str, object] = {"design": design, "stage": stage, "iterations": len(its)}
    for g in MEMORY_GROUPS:
        row[f"{g}_reads"] = acc.reads[g]
        row[f"{g}_writes"] = acc.writes[g]
    row.update(
        generated=generated,
        absorbed=sum(r.absorbed for r in its),
        pending_hits=sum(r.pending_hits for r in its),
        commits=commits,
        inlier_emissions=emissions,
        outlier_count=outliers,
        active_group_ratio=active_ratio,
        outlier_ratio=outlier_ratio,
        expected_update_ratio=active_ratio + outlier_ratio,
        expected_reduction=1.0 - _ratio(emissions + outliers, valid) if valid else 0.0,
        measured_reduction=1.0 - _ratio(commits, generated) if generated else 0.0,
        fifo_max=max((r.fifo_max for r in its), default=0),
        flush_warnings=sum(r.flush_warnings for r in recs),
        cycles=sum(r.cycles for r in recs),
    )
    return row


def _fed_stream(win: EventWindow, index: np.ndarray, p_ref: np.ndarray, last: np.ndarray,
                omega: MotionParams, scale: StageScale, intr: CameraIntrinsics,
                quantum: Optional[int]) -> FedStream:
    n = len(index)
    w = warp_batch(win.events, win.t_ref, omega, scale, intr, index=index)
    valid = w.valid
    px = np.zeros((n, 4), dtype=np.int64)
    py = np.zeros((n, 4), dtype=np.int64)
    deltas = np.zeros((n, 4, 4), dtype=np.float64)
    vi = np.flatnonzero(valid)
    if len(vi):
        votes = bilinear_vote_batch(w.take(vi), quantum)
        px[vi], py[vi], deltas[vi] = votes.px, votes.py, votes.deltas
    return FedStream(p_ref, w.p_act, last, valid, px, py, deltas)


def _stream_out(memory: BankedMemory, kernel: GaussianKernel, rec: EngineRecord) -> StreamStats:
    """Read the channels back through the line buffers, then clear touched cells."""
    scale = memory.scale
    reads0, writes0 = memory.total_reads, memory.total_writes
    block = memory.readback()
    stats, blur = line_buffer_stats(IweChannels(block, scale), kernel)
    rec.cleared = memory.clear()
    rec.accesses.read("iwe", memory.total_reads - reads0)
    rec.accesses.write("iwe", memory.total_writes - writes0)
    rec.accesses.write("line", blur.buffer_writes)
    rec.accesses.read("line", blur.buffer_reads)
    return stats


def run_engine_stage_iteration(
    tables: SortTables,
    win: EventWindow,
    omega: MotionParams,
    scale: StageScale,
    intr: CameraIntrinsics,
    kernel: Optional[GaussianKernel] = None,
    memory: Optional[BankedMemory] = None,
    quantum: Optional[int] = None,
    window_index: int = 0,
    iteration: int = 1,
) -> tuple[StreamStats, EngineRecord]:
    kernel = kernel or make_kernel(scale)
    memory = memory or BankedMemory(scale, banked=True)
    rec = EngineRecord(ENGINE, window_index, scale.s, "iteration", iteration, n_window=win.n)

    # feeder: active[m], offset[p], offset[p+1] per group; perm[j] and the raw event per slot
    perm = tables.perm
    rec.accesses.read("sort", 3 * len(tables.active) + len(perm))
    rec.accesses.read("raw", len(perm))
    last = np.zeros(len(perm), dtype=bool)
    if len(tables.active):
        last[tables.offset[tables.active + 1] - 1] = True
    fed = _fed_stream(win, perm, tables.p_ref(), last, omega, scale, intr, quantum)

    local = local_accumulate(fed, memory)
    writes0 = memory.total_writes
    pending = pending_commit(local.updates, memory, merge=True)

    n_valid = int(fed.valid.sum())
    generated = np.full(N_LANES, n_valid, dtype=np.int64)
    absorbed = np.full(N_LANES, local.inlier_events - local.inlier_emissions, dtype=np.int64)
    ledger = ledger_check(generated, absorbed, pending)
    if memory.total_writes - writes0 != pending.commits:
        raise EngineError("memory commits disagree with the pending-merge count")
    rec.accesses.read("iwe", pending.commits)
    rec.accesses.write("iwe", pending.commits)

    rec.n_fed = len(perm)
    rec.n_valid = n_valid
    rec.active_groups = len(tables.active)
    rec.inlier_events = local.inlier_events
    rec.outlier_events = local.outlier_events
    rec.inlier_emissions = local.inlier_emissions
    rec.generated = ledger["generated"]
    rec.absorbed = ledger["absorbed"]
    rec.pending_hits = ledger["hits"]
    rec.commits = ledger["commits"]
    rec.fifo_max = local.fifo_max
    rec.flush_warnings = local.flush_warnings

    stats = _stream_out(memory, kernel, rec)
    rec.cycles = len(perm) + math.ceil(scale.pixels / 2)
    return stats, rec


@dataclass(frozen=True, eq=False)
class BaselinePlan:
    """Event order the baseline streams at one stage, fixed at stage entry."""

    scale: StageScale
    index: np.ndarray
    tables: Optional[SortTables]


def baseline_stage_entry(win: EventWindow, omega_entry: MotionParams, scale: StageScale,
                         intr: CameraIntrinsics, window_index: int = 0) -> tuple[BaselinePlan, EngineRecord]:
    """Sort at subsampled stages; at full resolution mark stage-entry validity in arrival order."""
    rec = EngineRecord(BASELINE, window_index, scale.s, "entry", 0, n_window=win.n)
    if scale.s < 1.0:
        tables = pixel_group_sort(win, omega_entry, scale, intr, counter=rec.accesses)
        rec.cycles = 2 * win.n + scale.pixels
        return BaselinePlan(scale, tables.perm, tables), rec
    valid = warp_batch(win.events, win.t_ref, omega_entry, scale, intr).valid if win.n else np.zeros(0, bool)
    rec.accesses.read("raw", win.n)
    rec.accesses.write("sort", win.n)
    rec.cycles = win.n
    return BaselinePlan(scale, np.flatnonzero(valid), None), rec


def run_baseline_stage_iteration(
    plan: BaselinePlan,
    win: EventWindow,
    omega: MotionParams,
    scale: StageScale,
    intr: CameraIntrinsics,
    kernel: Optional[GaussianKernel] = None,
    memory: Optional[BankedMemory] = None,
    quantum: Optional[int] = None,
    window_index: int = 0,
    iteration: int = 1,
) -> tuple[StreamStats, EngineRecord]:
    kernel = kernel or make_kernel(scale)
    memory = memory or BankedMemory(scale, banked=False)
    rec = EngineRecord(BASELINE, window_index, scale.s, "iteration", iteration, n_window=win.n)

    index = plan.index
    if plan.tables is not None:
        rec.accesses.read("sort", 3 * len(plan.tables.active) + len(index))
        p_ref = plan.tables.p_ref()
    else:
        # one validity flag per arrival-order event
        rec.accesses.read("sort", win.n)
        p_ref = np.full(len(index), -2, dtype=np.int64)
    rec.accesses.read("raw", len(index))

    last = np.ones(len(index), dtype=bool)
    fed = _fed_stream(win, index, p_ref, last, omega, scale, intr, quantum)
    updates = direct_updates(fed, memory)
    pending = pending_commit(updates, memory, merge=False)
    n_valid = int(fed.valid.sum())
    if pending.commits != N_LANES * n_valid:
        raise EngineError(f"baseline committed {pending.commits} updates for {n_valid} events")
    rec.accesses.read("iwe", pending.commits)
    rec.accesses.write("iwe", pending.commits)

    rec.n_fed = len(index)
    rec.n_valid = n_valid
    rec.outlier_events = 0
    rec.generated = pending.items
    rec.commits = pending.commits
    rec.active_groups = len(plan.tables.active) if plan.tables is not None else 0

    stats = _stream_out(memory, kernel, rec)
    rec.cycles = len(index) + math.ceil(scale.pixels / 2) + (BASELINE_CYCLES_PER_EVENT - 1) * n_valid
    return stats, rec


def reference_stats(win: EventWindow, mask: np.ndarray, omega: MotionParams, scale: StageScale,
                    intr: CameraIntrinsics, kernel: GaussianKernel, quantum: Optional[int] = None) -> StreamStats:
    channels = accumulate_window(win, mask, omega, scale, intr, quantum=quantum)
    return stream_stats(smooth(channels, kernel))


def check_consistency(a: StreamStats, b: StreamStats, what: str, rtol: float = CROSS_CHECK_RTOL) -> None:
    ref = max(1.0, abs(a.S2), abs(a.S1), float(np.max(np.abs(a.G))), float(np.max(np.abs(a.T))))
    diff = a.max_abs_diff(b)
    if diff > rtol * ref or a.P != b.P:
        raise EngineError(f"{what}: statistics differ by {diff:.3e} (tolerance {rtol * ref:.3e})")


class EngineEvaluator:
    """Stage evaluator backed by the engine datapath; sorts once on construction."""

    def __init__(self, win: EventWindow, scale: StageScale, kernel: GaussianKernel,
                 omega_entry: MotionParams, intr: CameraIntrinsics, trace: EngineTrace,
                 quantum: Optional[int] = None, window_index: int = 0) -> None:
        self.win = win
        self.scale = scale
        self.kernel = kernel
        self.intr = intr
        self.trace = trace
        self.quantum = quantum
        self.window_index = window_index
        self.omega_entry = omega_entry
        entry = EngineRecord(ENGINE, window_index, scale.s, "entry", 0, n_window=win.n)
        self.tables = pixel_group_sort(win, omega_entry, scale, intr, counter=entry.accesses)
        entry.cycles = 2 * win.n + scale.pixels
        entry.active_groups = len(self.tables.active)
        trace.add(entry)
        self.memory = BankedMemory(scale, banked=True)
        self.evaluated: List[MotionParams] = []
        self.stats: List[StreamStats] = []

    @property
    def n_selected(self) -> int:
        return self.tables.retained

    @property
    def pixels(self) -> int:
        return self.scale.pixels

    def __call__(self, omega: MotionParams) -> Objective:
        stats, rec = run_engine_stage_iteration(
            self.tables, self.win, omega, self.scale, self.intr, self.kernel, self.memory,
            self.quantum, self.window_index, len(self.evaluated) + 1,
        )
        self.trace.add(rec)
        self.evaluated.append(omega)
        self.stats.append(stats)
        return objective_from_stats(stats)

    def replay(self) -> "StageReplay":
        return StageReplay(self.window_index, self.scale.s, self.omega_entry, list(self.evaluated))


def engine_evaluator_factory(intr: CameraIntrinsics, trace: EngineTrace, quantum: Optional[int] = None,
                             created: Optional[List[EngineEvaluator]] = None) -> Callable:
    """Scheduler factory ``(window, stage, omega_entry) -> EngineEvaluator``.

    Evaluators are appended to ``created`` so their evaluation lists can be
    replayed through the baseline afterwards.
    """
    def factory(win: EventWindow, stage, omega_entry: MotionParams) -> EngineEvaluator:
        ev = EngineEvaluator(win, stage.scale, stage.kernel, omega_entry, intr, trace, quantum, win.index)
        if created is not None:
            created.append(ev)
        return ev
    return factory


@dataclass(frozen=True)
class StageReplay:
    """Stage-entry estimate plus the omegas evaluated at that stage, in order."""

    window: int
    scale: float
    omega_entry: MotionParams
    omegas: List[MotionParams]


def replay_stage(
    design: str,
    replay: StageReplay,
    win: EventWindow,
    intr: CameraIntrinsics,
    trace: EngineTrace,
    sigma: float = 1.0,
    quantum: Optional[int] = None,
    cross_check: bool = True,
) -> List[StreamStats]:
    """Run one recorded stage trajectory through a design, optionally checking the reference path."""
    scale = StageScale.for_sensor(replay.scale, intr)
    kernel = make_kernel(scale, sigma)
    out: List[StreamStats] = []
    if design == ENGINE:
        entry = EngineRecord(ENGINE, replay.window, scale.s, "entry", 0, n_window=win.n)
        tables = pixel_group_sort(win, replay.omega_entry, scale, intr, counter=entry.accesses)
        entry.cycles = 2 * win.n + scale.pixels
        trace.add(entry)
        memory = BankedMemory(scale, banked=True)
        mask = tables.retained_mask()
        for i, omega in enumerate(replay.omegas, start=1):
            stats, rec = run_engine_stage_iteration(tables, win, omega, scale, intr, kernel, memory,
                                                    quantum, replay.window, i)
            trace.add(rec)
            out.append(stats)
    elif design == BASELINE:
        plan, entry = baseline_stage_entry(win, replay.omega_entry, scale, intr, replay.window)
        trace.add(entry)
        memory = BankedMemory(scale, banked=False)
        mask = np.zeros(win.n, dtype=bool)
        mask[plan.index] = True
        for i, omega in enumerate(replay.omegas, start=1):
            stats, rec = run_baseline_stage_iteration(plan, win, omega, scale, intr, kernel, memory,
                                                      quantum, replay.window, i)
            trace.add(rec)
            out.append(stats)
    else:
        raise EngineError(f"unknown design {design!r}")

    if cross_check:
        for omega, stats in zip(replay.omegas, out):
            ref = reference_stats(win, mask, omega, scale, intr, kernel, quantum)
            check_consistency(ref, stats, f"{design} vs reference, window {replay.window}, stage {scale.label}")
    return out
