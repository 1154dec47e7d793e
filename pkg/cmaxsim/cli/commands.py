"""Subcommand bodies: each takes a validated RunConfig and returns the files it wrote.

All outputs land in ``[output] dir``. Every command also writes
``manifest.json`` so a result directory records how it was produced.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

import cmaxsim
from cmaxsim.core.config import RunConfig, settings
from cmaxsim.core.errors import AlignmentError, DataError
from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import SUPPORTED_SCALES, CameraIntrinsics, EventWindow, ImuTrack, MotionParams, StageScale
from cmaxsim.services.accumulation_service import accumulate_window
from cmaxsim.services.energy_service import add_stage_energy, design_frame, load_energy_table
from cmaxsim.services.engine_service import (
    BASELINE,
    ENGINE,
    EngineEvaluator,
    EngineTrace,
    StageReplay,
    check_consistency,
    engine_evaluator_factory,
    reference_stats,
    replay_stage,
)
from cmaxsim.services.eval_service import CSV_OPTS, METHOD_ORDER, comparison_frame, method_run, realtime_lines, report
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
from cmaxsim.services.optimizer_service import BacktrackingLineSearch
from cmaxsim.services.scheduler_service import (
    Schedule,
    WindowResult,
    build_schedule,
    estimates_frame,
    reference_evaluator_factory,
    run_sequence,
    trace_frame,
)
from cmaxsim.utils.image_export import export_image

logger = get_logger("cli")

Outputs = Dict[str, Path]


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(cfg: RunConfig, command: str, written: Outputs) -> Path:
    """Config echo, package version, seed, command and output names; no timestamps."""
    path = _out_dir(cfg) / "manifest.json"
    manifest = {
        "command": command,
        "version": cmaxsim.__version__,
        "seed": cfg.run.seed,
        "config": cfg.echo(),
        "outputs": sorted(p.name for p in written.values()),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_dataset(cfg: RunConfig, command: str) -> Tuple[CameraIntrinsics, List[EventWindow]]:
    cfg.check_paths(command)
    intr = load_calib(cfg.dataset.calib, cfg.dataset.width, cfg.dataset.height)
    stream = load_events(cfg.dataset.events, intr)
    windows = window_by_count(stream, cfg.window.size)
    if cfg.window.max_windows is not None:
        windows = windows[: cfg.window.max_windows]
    logger.info("%s: %d windows of %d events", command, len(windows), cfg.window.size)
    return intr, windows


def _per_stage(values: List[float]) -> Dict[float, float]:
    return dict(zip(SUPPORTED_SCALES, values))


def make_schedule(cfg: RunConfig, method: str, intr: CameraIntrinsics) -> Schedule:
    sc = cfg.schedule
    return build_schedule(
        method, intr,
        taus=_per_stage(sc.tau),
        sigmas=_per_stage(sc.sigma),
        fixed_iters=sc.fixed_iters if method == "fixed" else None,
        stage_cap=sc.stage_cap,
        window_cap=sc.window_cap,
    )


def line_search_for(cfg: RunConfig) -> BacktrackingLineSearch:
    return BacktrackingLineSearch(max_halvings=cfg.optimizer.max_halvings,
                                  max_doublings=cfg.optimizer.max_doublings)


def _export_images(results: List[WindowResult], windows: List[EventWindow], method: str,
                   intr: CameraIntrinsics, cfg: RunConfig, out: Path) -> Outputs:
    written: Outputs = {}
    scale = StageScale.for_sensor(1.0, intr)
    for res, win in zip(results, windows):
        channels = accumulate_window(win, None, res.omega_hat, scale, intr, quantum=cfg.run.quantum)
        key = f"iwe_{method}_{res.window:05d}"
        written[key] = export_image(channels.iwe, out / f"{key}.png")
    return written


def cmd_estimate(cfg: RunConfig) -> Outputs:
    """Run each selected method over every window; write estimates and traces."""
    intr, windows = _load_dataset(cfg, "estimate")
    out = _out_dir(cfg)
    written: Outputs = {}
    for method in cfg.run.methods:
        schedule = make_schedule(cfg, method, intr)
        factory = reference_evaluator_factory(intr, cfg.run.quantum)
        results = run_sequence(windows, schedule, factory, cfg.optimizer.step, line_search_for(cfg))
        written[f"estimates_{method}"] = out / f"estimates_{method}.csv"
        estimates_frame(results).to_csv(written[f"estimates_{method}"], **CSV_OPTS)
        written[f"trace_{method}"] = out / f"trace_{method}.csv"
        trace_frame(results).to_csv(written[f"trace_{method}"], **CSV_OPTS)
        if cfg.output.images:
            written.update(_export_images(results, windows, method, intr, cfg, out))
        logger.info("estimate: %s finished, %d windows", method, len(results))
    written["manifest"] = write_manifest(cfg, "estimate", written)
    return written


def replays_from_trace(trace: pd.DataFrame) -> List[StageReplay]:
    """Stage trajectories from a ``trace_<method>.csv`` table.

    Each stage replays its entry estimate followed by every post-update estimate.
    """
    replays: List[StageReplay] = []
    for (window, stage), rows in trace.groupby(["window", "stage"], sort=True):
        rows = rows.sort_values("iter")
        omegas = [MotionParams(float(r.omega_x), float(r.omega_y), float(r.omega_z))
                  for r in rows.itertuples(index=False)]
        if int(rows["iter"].iloc[0]) != 0:
            raise DataError(f"trace window {window} stage {stage}: missing stage-entry row")
        replays.append(StageReplay(int(window), float(stage), omegas[0], omegas))
    return replays


def _recorded_trace(cfg: RunConfig, out: Path) -> Optional[Tuple[str, pd.DataFrame]]:
    preferred = ["adaptive"] + [m for m in METHOD_ORDER if m != "adaptive"]
    for method in preferred:
        if method not in cfg.run.methods:
            continue
        path = out / f"trace_{method}.csv"
        if path.exists():
            return method, pd.read_csv(path)
    return None


def _check_engine_against_reference(evaluators: List[EngineEvaluator], intr: CameraIntrinsics,
                                    quantum: Optional[int]) -> None:
    for ev in evaluators:
        mask = ev.tables.retained_mask()
        for omega, stats in zip(ev.evaluated, ev.stats):
            ref = reference_stats(ev.win, mask, omega, ev.scale, intr, ev.kernel, quantum)
            check_consistency(ref, stats, f"engine vs reference, window {ev.window_index}, stage {ev.scale.label}")


def _simulate_live(cfg: RunConfig, intr: CameraIntrinsics, windows: List[EventWindow],
                   trace: EngineTrace, designs: List[str]) -> str:
    """No recorded trajectory: optimise now, with the engine as the evaluator when enabled."""
    method = "adaptive" if "adaptive" in cfg.run.methods else cfg.run.methods[0]
    schedule = make_schedule(cfg, method, intr)
    sigmas = _per_stage(cfg.schedule.sigma)
    by_index = {w.index: w for w in windows}
    if ENGINE in designs:
        created: List[EngineEvaluator] = []
        factory = engine_evaluator_factory(intr, trace, cfg.run.quantum, created)
        run_sequence(windows, schedule, factory, cfg.optimizer.step, line_search_for(cfg))
        if cfg.engine.cross_check:
            _check_engine_against_reference(created, intr, cfg.run.quantum)
        replays = [ev.replay() for ev in created]
        designs = [d for d in designs if d != ENGINE]
    else:
        results = run_sequence(windows, schedule, reference_evaluator_factory(intr, cfg.run.quantum),
                               cfg.optimizer.step, line_search_for(cfg))
        replays = replays_from_trace(trace_frame(results))
    for design in designs:
        for rp in replays:
            replay_stage(design, rp, by_index[rp.window], intr, trace, sigmas.get(rp.scale, 1.0),
                         cfg.run.quantum, cfg.engine.cross_check)
    return method


def cmd_simulate(cfg: RunConfig) -> Outputs:
    """Engine and baseline access counts, latency and energy on one shared trajectory."""
    intr, windows = _load_dataset(cfg, "simulate")
    out = _out_dir(cfg)
    table = load_energy_table(cfg.engine.energy_table or settings.energy_table_path)
    designs = [d for d, on in ((ENGINE, cfg.engine.engine), (BASELINE, cfg.engine.baseline)) if on]
    if not designs:
        raise DataError("both engine and baseline are disabled; nothing to simulate")
    trace = EngineTrace()

    recorded = _recorded_trace(cfg, out)
    if recorded is not None:
        method, frame = recorded
        logger.info("simulate: replaying trace_%s.csv", method)
        by_index = {w.index: w for w in windows}
        sigmas = _per_stage(cfg.schedule.sigma)
        for rp in replays_from_trace(frame):
            if rp.window not in by_index:
                raise AlignmentError(f"trace_{method}.csv names window {rp.window}, "
                                     f"but only {len(windows)} windows were loaded")
            for design in designs:
                replay_stage(design, rp, by_index[rp.window], intr, trace, sigmas.get(rp.scale, 1.0),
                             cfg.run.quantum, cfg.engine.cross_check)
        source = f"trace_{method}.csv"
    else:
        method = _simulate_live(cfg, intr, windows, trace, designs)
        source = f"live {method} optimisation"

    written: Outputs = {}
    stages = add_stage_energy(trace.stage_frame(), table, cfg.engine.clock_hz)
    written["engine_trace"] = out / "engine_trace.csv"
    stages.to_csv(written["engine_trace"], **CSV_OPTS)
    energy = design_frame(trace, table, len(windows), tuple(designs), cfg.engine.clock_hz,
                          cfg.engine.logic_power_mw)
    written["energy"] = out / "energy.csv"
    energy.to_csv(written["energy"], **CSV_OPTS)
    written["simulation_summary"] = out / "simulation_summary.txt"
    written["simulation_summary"].write_text(
        "\n".join(simulation_summary(energy, stages, source, cfg.engine.realtime_ms)) + "\n", encoding="utf-8"
    )
    written["manifest"] = write_manifest(cfg, "simulate", written)
    return written


def simulation_summary(energy: pd.DataFrame, stages: pd.DataFrame, source: str, realtime_ms: float) -> List[str]:
    lines = [f"Trajectory: {source}", ""]
    for row in energy.itertuples(index=False):
        lines.append(f"{row.design:<9} accesses {row.accesses:d}  cycles {row.cycles:d}  "
                     f"E_total {row.E_total_pJ:.6g} pJ")
    if {ENGINE, BASELINE} <= set(energy["design"]):
        lines.append("")
        lines.append("Engine against baseline")
        for row in comparison_frame(energy).itertuples(index=False):
            lines.append(f"  {row.metric:<18} {row.change_pct:+.2f}%")
    engine_rows = stages[stages["design"] == ENGINE]
    if len(engine_rows):
        lines.append("")
        lines.append("Update reduction per stage (expected from local accumulation, measured after merge)")
        for row in engine_rows.itertuples(index=False):
            lines.append(f"  s={row.stage:<5g} expected {100 * row.expected_reduction:.1f}%  "
                         f"measured {100 * row.measured_reduction:.1f}%")
    lines.append("")
    lines.extend(realtime_lines(energy, realtime_ms))
    return lines


def imu_for(omega: MotionParams, duration: float, rate: float) -> ImuTrack:
    """Constant-rate IMU samples of ``omega`` spanning [0, duration]."""
    n = int(math.ceil(duration * rate))
    t = np.arange(n + 1, dtype=np.float64) / rate
    return ImuTrack(t, np.tile(omega.as_array(), (n + 1, 1)))


def cmd_synth(cfg: RunConfig) -> Outputs:
    """Synthetic rotation dataset in the ingestion text layout, plus its ground truth."""
    sy = cfg.synth
    intr = CameraIntrinsics(sy.fx, sy.fy, sy.cx, sy.cy, sy.width, sy.height).check()
    omega = MotionParams.from_array(sy.omega)
    rng = np.random.default_rng(cfg.run.seed)
    scene = synth_scene(omega, intr, sy.duration, random_texture(sy.points, intr, rng), sy.noise, rng)

    out = _out_dir(cfg)
    written: Outputs = {
        "events": out / "events.txt",
        "imu": out / "imu.txt",
        "calib": out / "calib.txt",
        "ground_truth": out / "ground_truth.txt",
    }
    write_events(scene.events, written["events"])
    write_imu(imu_for(omega, sy.duration, sy.imu_rate), written["imu"])
    write_calib(intr, written["calib"])
    written["ground_truth"].write_text(f"{omega.wx!r} {omega.wy!r} {omega.wz!r}\n", encoding="utf-8")
    logger.info("synth: %d events written to %s", len(scene.events), out)
    written["manifest"] = write_manifest(cfg, "synth", written)
    return written


def cmd_evaluate(cfg: RunConfig) -> Outputs:
    """RMSE, deviation and engine comparison from stored estimate and simulation outputs."""
    cfg.check_paths("evaluate")
    out = _out_dir(cfg)
    imu = load_imu(cfg.dataset.imu)
    runs = {}
    for method in cfg.run.methods:
        path = out / f"estimates_{method}.csv"
        if not path.exists():
            if cfg.run.mode != "all":
                raise DataError(f"no stored run for method {method!r}: {path} not found")
            continue
        runs[method] = method_run(method, pd.read_csv(path), imu)
    if not runs:
        raise DataError(f"no estimates_<method>.csv files in {out}; run 'estimate' first")
    energy_path = out / "energy.csv"
    designs = pd.read_csv(energy_path) if energy_path.exists() else None
    written: Outputs = dict(report(runs, out, designs, cfg.engine.realtime_ms))
    written["manifest"] = write_manifest(cfg, "evaluate", written)
    return written


COMMANDS: Dict[str, Callable[[RunConfig], Outputs]] = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "synth": cmd_synth,
    "evaluate": cmd_evaluate,
}
