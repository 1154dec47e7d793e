"""Stage orchestration: fixed coarse-to-fine schedules and the runtime-adaptive policy.

The adaptive policy starts at the coarsest stage with ``V_prev = V_s(omega)``
and repeats ``omega <- Update(omega, s)``. It stays while the relative gain
``(V - V_prev) / |V_prev|`` is at least the stage threshold tau_s. Otherwise it
promotes to the next stage (re-evaluating ``V_prev`` there) or terminates at
the finest stage. Per-stage and per-window update caps force a departure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from cmaxsim.core.errors import ConfigError, TraceError
from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import SUPPORTED_SCALES, CameraIntrinsics, EventWindow, MotionParams, StageScale
from cmaxsim.services.contrast_service import (
    DEFAULT_SIGMA,
    GaussianKernel,
    Objective,
    StreamStats,
    make_kernel,
    objective_from_stats,
)
from cmaxsim.services.engine_service import reference_stats
from cmaxsim.services.optimizer_service import DEFAULT_STEP, LineSearch, OptState, update, warm_start
from cmaxsim.services.sorting_service import pixel_group_sort

logger = get_logger("scheduler")

MODES = ("fixed", "adaptive", "full")
DEFAULT_TAUS = {0.25: 0.02, 0.5: 0.01, 1.0: 0.005}
STAGE_CAP = 50
WINDOW_CAP = 200

ENTRY = "entry"
UPDATE = "update"
DEPART_GAIN = "gain"
DEPART_CAP = "cap"
DEPART_FIXED = "fixed"


@dataclass(frozen=True, eq=False)
class StageConfig:
    scale: StageScale
    tau: float
    kernel: GaussianKernel
    max_iters: int = STAGE_CAP

    def __post_init__(self) -> None:
        if not self.tau >= 0:
            raise ConfigError(f"stage {self.scale.label}: tau must be non-negative, got {self.tau}")
        if self.max_iters < 1:
            raise ConfigError(f"stage {self.scale.label}: max_iters must be at least 1")

    @property
    def rho(self) -> float:
        return self.scale.s


@dataclass(frozen=True, eq=False)
class Schedule:
    mode: str
    stages: List[StageConfig]
    fixed_iters: Optional[List[int]] = None
    window_cap: int = WINDOW_CAP

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown schedule mode {self.mode!r}; expected one of {MODES}")
        if not self.stages:
            raise ConfigError("a schedule needs at least one stage")
        scales = [st.scale.s for st in self.stages]
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"stage scales must be strictly increasing, got {scales}")
        if scales[-1] != 1.0:
            raise ConfigError("the last stage must be full resolution (s = 1)")
        if self.mode == "fixed":
            if self.fixed_iters is None or len(self.fixed_iters) != len(self.stages):
                raise ConfigError("fixed mode needs one iteration count per stage")
            for st, n in zip(self.stages, self.fixed_iters):
                if n < 0 or n > st.max_iters:
                    raise ConfigError(f"stage {st.scale.label}: fixed count {n} outside [0, {st.max_iters}]")
            if sum(self.fixed_iters) > self.window_cap:
                raise ConfigError(f"fixed counts {self.fixed_iters} exceed the window cap {self.window_cap}")


def build_schedule(
    mode: str,
    intr: CameraIntrinsics,
    taus: Optional[Dict[float, float]] = None,
    sigmas: Optional[Dict[float, float]] = None,
    fixed_iters: Optional[Sequence[int]] = None,
    stage_cap: int = STAGE_CAP,
    window_cap: int = WINDOW_CAP,
) -> Schedule:
    """Standard three-stage schedule, or the single full-resolution stage for ``full``."""
    taus = {**DEFAULT_TAUS, **(taus or {})}
    sigmas = sigmas or {}
    scales = (1.0,) if mode == "full" else SUPPORTED_SCALES
    stages = []
    for s in scales:
        scale = StageScale.for_sensor(s, intr)
        stages.append(StageConfig(scale, taus[s], make_kernel(scale, sigmas.get(s, DEFAULT_SIGMA)), stage_cap))
    if mode == "fixed" and fixed_iters is None:
        fixed_iters = [stage_cap] * len(stages)
        while sum(fixed_iters) > window_cap:
            fixed_iters[int(np.argmax(fixed_iters))] -= 1
    return Schedule(mode, stages, list(fixed_iters) if fixed_iters is not None else None, window_cap)


class StageEvaluator(Protocol):
    n_selected: int
    pixels: int

    def __call__(self, omega: MotionParams) -> Objective: ...


EvaluatorFactory = Callable[[EventWindow, StageConfig, MotionParams], StageEvaluator]


class ReferenceEvaluator:
    """Dense reference path on the event subset chosen by the stage-entry sort."""

    def __init__(self, win: EventWindow, stage: StageConfig, omega_entry: MotionParams,
                 intr: CameraIntrinsics, quantum: Optional[int] = None) -> None:
        self.win = win
        self.stage = stage
        self.intr = intr
        self.quantum = quantum
        self.mask = pixel_group_sort(win, omega_entry, stage.scale, intr).retained_mask()
        self.n_selected = int(self.mask.sum())
        self.pixels = stage.scale.pixels
        self.last_stats: Optional[StreamStats] = None

    def __call__(self, omega: MotionParams) -> Objective:
        self.last_stats = reference_stats(self.win, self.mask, omega, self.stage.scale, self.intr,
                                          self.stage.kernel, self.quantum)
        return objective_from_stats(self.last_stats)


def reference_evaluator_factory(intr: CameraIntrinsics, quantum: Optional[int] = None) -> EvaluatorFactory:
    def factory(win: EventWindow, stage: StageConfig, omega_entry: MotionParams) -> ReferenceEvaluator:
        return ReferenceEvaluator(win, stage, omega_entry, intr, quantum)
    return factory


@dataclass(frozen=True)
class TraceEntry:
    window: int
    stage: float
    iter: int
    kind: str
    variance: float
    gain: float
    omega: MotionParams
    work_units: int
    departure: str = ""


@dataclass
class WindowResult:
    window: int
    omega_hat: MotionParams
    mode: str
    per_stage_iters: Dict[float, int]
    stage_selected: Dict[float, int]
    stage_pixels: Dict[float, int]
    trace: List[TraceEntry] = field(default_factory=list)
    wall_cost: int = 0
    t_start: float = 0.0
    t_end: float = 0.0
    t_mid: float = 0.0

    @property
    def iterations(self) -> int:
        return sum(self.per_stage_iters.values())

    @property
    def variance_trace(self) -> List[tuple[float, int, float]]:
        return [(e.stage, e.iter, e.variance) for e in self.trace]

    def verify(self, schedule: Schedule) -> None:
        """Check stage order, departure reasons, caps and work accounting; raise TraceError."""
        stages = {st.scale.s: st for st in schedule.stages}
        seen: List[float] = []
        total = 0
        cost = 0
        i = 0
        while i < len(self.trace):
            entry = self.trace[i]
            if entry.kind != ENTRY or entry.iter != 0:
                raise TraceError(f"window {self.window}: trace row {i} should open a stage")
            if entry.stage not in stages:
                raise TraceError(f"window {self.window}: stage {entry.stage} is not in the schedule")
            if seen and entry.stage <= seen[-1]:
                raise TraceError(f"window {self.window}: stage {entry.stage} after {seen[-1]}")
            seen.append(entry.stage)
            cfg = stages[entry.stage]
            i += 1
            updates = []
            while i < len(self.trace) and self.trace[i].kind == UPDATE:
                updates.append(self.trace[i])
                i += 1
            for n, u in enumerate(updates, start=1):
                if u.stage != entry.stage or u.iter != n:
                    raise TraceError(f"window {self.window}: update numbering broken at stage {entry.stage}")
                cost += u.work_units
            total += len(updates)
            if self.per_stage_iters.get(entry.stage, 0) != len(updates):
                raise TraceError(f"window {self.window}: stage {entry.stage} iteration count mismatch")
            if len(updates) > cfg.max_iters:
                raise TraceError(f"window {self.window}: stage {entry.stage} exceeded its cap")
            if schedule.mode == "fixed":
                continue
            if not updates:
                raise TraceError(f"window {self.window}: adaptive stage {entry.stage} made no update")
            for u in updates[:-1]:
                if u.departure or not u.gain >= cfg.tau:
                    raise TraceError(f"window {self.window}: stayed at stage {entry.stage} without gain >= tau")
            last = updates[-1]
            if last.departure == DEPART_GAIN:
                if not last.gain < cfg.tau:
                    raise TraceError(f"window {self.window}: gain departure with gain {last.gain} >= tau")
            elif last.departure == DEPART_CAP:
                if not (len(updates) == cfg.max_iters or total == schedule.window_cap):
                    raise TraceError(f"window {self.window}: cap departure before any cap was reached")
            else:
                raise TraceError(f"window {self.window}: stage {entry.stage} left without a recorded reason")
        if cost != self.wall_cost:
            raise TraceError(f"window {self.window}: wall cost {self.wall_cost} != traced {cost}")
        expected = sum(n * (self.stage_selected[s] + self.stage_pixels[s]) for s, n in self.per_stage_iters.items())
        if expected != self.wall_cost:
            raise TraceError(f"window {self.window}: wall cost not reproducible from stage sizes")


def stage_gain(v_new: float, v_prev: float) -> float:
    if v_prev == 0:
        return math.inf if v_new > 0 else 0.0
    return (v_new - v_prev) / abs(v_prev)


class _Run:
    """Mutable bookkeeping shared by the adaptive and fixed drivers."""

    def __init__(self, win: EventWindow, omega0: MotionParams, schedule: Schedule,
                 step: float, line_search: Optional[LineSearch]) -> None:
        self.win = win
        self.schedule = schedule
        self.line_search = line_search
        self.state = OptState(omega0, step=step)
        self.result = WindowResult(win.index, omega0, schedule.mode, {}, {}, {},
                                   t_start=win.t_start, t_end=win.t_end, t_mid=win.t_mid)
        self.total = 0

    def enter(self, stage: StageConfig, factory: EvaluatorFactory) -> tuple[StageEvaluator, float]:
        s = stage.scale.s
        ev = factory(self.win, stage, self.state.omega)
        obj = ev(self.state.omega)
        self.state = self.state.restart(obj)
        self.result.per_stage_iters[s] = 0
        self.result.stage_selected[s] = int(ev.n_selected)
        self.result.stage_pixels[s] = int(ev.pixels)
        self.result.trace.append(TraceEntry(self.win.index, s, 0, ENTRY, obj.variance, math.nan,
                                            self.state.omega, 0))
        logger.debug("window %d: enter stage %s with V=%.6g (%d events selected)",
                     self.win.index, stage.scale.label, obj.variance, ev.n_selected)
        return ev, obj.variance

    def step(self, stage: StageConfig, ev: StageEvaluator, v_prev: float) -> tuple[float, float]:
        s = stage.scale.s
        self.state, obj = update(self.state, ev, self.line_search)
        self.total += 1
        self.result.per_stage_iters[s] += 1
        work = int(ev.n_selected) + int(ev.pixels)
        self.result.wall_cost += work
        gain = stage_gain(obj.variance, v_prev)
        self.result.trace.append(TraceEntry(self.win.index, s, self.result.per_stage_iters[s], UPDATE,
                                            obj.variance, gain, self.state.omega, work))
        return obj.variance, gain

    def mark_departure(self, reason: str) -> None:
        last = self.result.trace[-1]
        self.result.trace[-1] = TraceEntry(last.window, last.stage, last.iter, last.kind, last.variance,
                                           last.gain, last.omega, last.work_units, reason)

    def finish(self) -> WindowResult:
        self.result.omega_hat = self.state.omega
        self.result.verify(self.schedule)
        logger.info("window %d (%s): omega=(%.5f, %.5f, %.5f) after %d updates, cost %d",
                    self.win.index, self.schedule.mode, self.state.omega.wx, self.state.omega.wy,
                    self.state.omega.wz, self.total, self.result.wall_cost)
        return self.result


def run_adaptive(win: EventWindow, omega0: MotionParams, schedule: Schedule, factory: EvaluatorFactory,
                 step: float = DEFAULT_STEP, line_search: Optional[LineSearch] = None) -> WindowResult:
    if schedule.mode not in ("adaptive", "full"):
        raise ConfigError(f"run_adaptive needs an adaptive schedule, got {schedule.mode!r}")
    run = _Run(win, omega0, schedule, step, line_search)
    for k, stage in enumerate(schedule.stages):
        ev, v_prev = run.enter(stage, factory)
        while True:
            v, gain = run.step(stage, ev, v_prev)
            stage_capped = run.result.per_stage_iters[stage.scale.s] >= stage.max_iters
            window_capped = run.total >= schedule.window_cap
            if gain >= stage.tau and not stage_capped and not window_capped:
                v_prev = v
                continue
            run.mark_departure(DEPART_GAIN if gain < stage.tau else DEPART_CAP)
            if stage_capped and gain >= stage.tau:
                logger.warning("window %d: stage %s hit its cap of %d updates",
                               win.index, stage.scale.label, stage.max_iters)
            break
        if run.total >= schedule.window_cap:
            if k < len(schedule.stages) - 1:
                logger.warning("window %d: window cap of %d updates reached at stage %s",
                               win.index, schedule.window_cap, stage.scale.label)
            break
    return run.finish()


def run_fixed(win: EventWindow, omega0: MotionParams, schedule: Schedule, factory: EvaluatorFactory,
              step: float = DEFAULT_STEP, line_search: Optional[LineSearch] = None) -> WindowResult:
    if schedule.mode != "fixed":
        raise ConfigError(f"run_fixed needs a fixed schedule, got {schedule.mode!r}")
    run = _Run(win, omega0, schedule, step, line_search)
    for stage, n in zip(schedule.stages, schedule.fixed_iters):
        if n == 0:
            continue
        ev, v_prev = run.enter(stage, factory)
        for _ in range(n):
            v_prev, _gain = run.step(stage, ev, v_prev)
        run.mark_departure(DEPART_FIXED)
    return run.finish()


def run_full(win: EventWindow, omega0: MotionParams, schedule: Schedule, factory: EvaluatorFactory,
             step: float = DEFAULT_STEP, line_search: Optional[LineSearch] = None) -> WindowResult:
    """Full-resolution baseline: the adaptive policy on the single s = 1 stage."""
    if schedule.mode != "full":
        raise ConfigError(f"run_full needs a full-resolution schedule, got {schedule.mode!r}")
    return run_adaptive(win, omega0, schedule, factory, step, line_search)


def run_window(win: EventWindow, omega0: MotionParams, schedule: Schedule, factory: EvaluatorFactory,
               step: float = DEFAULT_STEP, line_search: Optional[LineSearch] = None) -> WindowResult:
    runner = {"fixed": run_fixed, "adaptive": run_adaptive, "full": run_full}[schedule.mode]
    return runner(win, omega0, schedule, factory, step, line_search)


def run_sequence(windows: Sequence[EventWindow], schedule: Schedule, factory: EvaluatorFactory,
                 step: float = DEFAULT_STEP, line_search: Optional[LineSearch] = None) -> List[WindowResult]:
    """Run windows in order, warm-starting each from the previous estimate."""
    results: List[WindowResult] = []
    prev: Optional[MotionParams] = None
    for win in windows:
        res = run_window(win, warm_start(prev), schedule, factory, step, line_search)
        results.append(res)
        prev = res.omega_hat
    return results


TRACE_COLUMNS = ["window", "stage", "iter", "variance", "gain", "omega_x", "omega_y", "omega_z", "work_units"]
ESTIMATE_COLUMNS = ["window", "t_start", "t_end", "t_mid", "omega_x", "omega_y", "omega_z",
                    "iterations", "work_units"]


def trace_frame(results: Sequence[WindowResult]) -> pd.DataFrame:
    rows = [
        [e.window, e.stage, e.iter, e.variance, e.gain, e.omega.wx, e.omega.wy, e.omega.wz, e.work_units]
        for r in results for e in r.trace
    ]
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def estimates_frame(results: Sequence[WindowResult]) -> pd.DataFrame:
    rows = [
        [r.window, r.t_start, r.t_end, r.t_mid, r.omega_hat.wx, r.omega_hat.wy, r.omega_hat.wz,
         r.iterations, r.wall_cost]
        for r in results
    ]
    return pd.DataFrame(rows, columns=ESTIMATE_COLUMNS)
