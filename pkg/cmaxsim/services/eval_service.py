"""IMU-referenced accuracy metrics, method comparison and report files."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from cmaxsim.core.errors import AlignmentError, DataError
from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import ImuTrack

logger = get_logger("eval")

METHOD_ORDER = ("full", "fixed", "adaptive")
DEFAULT_SEGMENT_SECONDS = (0.0, 15.0, 30.0, 45.0, 60.0)
DEFAULT_REALTIME_MS = 5.72
CSV_OPTS = {"index": False, "float_format": "%.17g", "lineterminator": "\n", "encoding": "utf-8"}


@dataclass(frozen=True, eq=False)
class MethodRun:
    method: str
    windows: np.ndarray
    t_mid: np.ndarray
    omega_hat: np.ndarray  # (K, 3)
    omega_imu: np.ndarray  # (K, 3), NaN where the IMU does not cover the window
    covered: np.ndarray

    def __len__(self) -> int:
        return len(self.windows)

    def errors(self) -> np.ndarray:
        """Per-window error; NaN for windows outside IMU coverage."""
        err = np.full(len(self), math.nan)
        c = self.covered
        err[c] = np.linalg.norm(self.omega_hat[c] - self.omega_imu[c], axis=1)
        return err


def window_error(omega_hat, omega_imu) -> float:
    return float(np.linalg.norm(np.asarray(omega_hat, dtype=float) - np.asarray(omega_imu, dtype=float)))


def rmse(errors: Sequence[float]) -> float:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise DataError("RMSE of an empty error sequence")
    return float(np.sqrt(np.mean(e * e)))


def segment_bounds(timestamps: np.ndarray, bounds: Optional[Sequence[float]] = None) -> np.ndarray:
    """Absolute segment boundaries: fixed seconds after the first timestamp,
    shrunk to quarters of the span when the sequence is shorter than the last one."""
    t0 = float(timestamps[0])
    span = float(timestamps[-1]) - t0
    rel = np.asarray(bounds if bounds is not None else DEFAULT_SEGMENT_SECONDS, dtype=float)
    if bounds is None and span < rel[-1]:
        rel = rel / rel[-1] * span
    return t0 + rel


@dataclass
class Deviation:
    values: np.ndarray
    segment: np.ndarray
    degenerate: List[int] = field(default_factory=list)


def deviation_metric(errors_m: Sequence[float], errors_full: Sequence[float], timestamps: Sequence[float],
                     bounds: Optional[Sequence[float]] = None) -> Deviation:
    """|e_m - e_full| min-max normalised independently inside each time segment.

    ``bounds`` are seconds relative to the first timestamp. A segment whose
    deviation is constant becomes all zeros and is listed in ``degenerate``.
    """
    em = np.asarray(errors_m, dtype=float)
    ef = np.asarray(errors_full, dtype=float)
    t = np.asarray(timestamps, dtype=float)
    if not (len(em) == len(ef) == len(t)):
        raise AlignmentError(f"deviation inputs differ in length: {len(em)}, {len(ef)}, {len(t)}")
    if len(t) == 0:
        return Deviation(np.zeros(0), np.zeros(0, dtype=int))
    edges = segment_bounds(t, bounds)
    segment = np.clip(np.searchsorted(edges[1:-1], t, side="right"), 0, len(edges) - 2)
    dev = np.abs(em - ef)
    out = np.zeros_like(dev)
    degenerate: List[int] = []
    for k in np.unique(segment):
        sel = segment == k
        lo, hi = dev[sel].min(), dev[sel].max()
        if hi == lo:
            degenerate.append(int(k))
            continue
        out[sel] = (dev[sel] - lo) / (hi - lo)
    if degenerate:
        logger.warning("deviation segments %s are constant; reported as zeros", degenerate)
    return Deviation(out, segment, degenerate)


def method_run(method: str, estimates: pd.DataFrame, imu: Optional[ImuTrack]) -> MethodRun:
    """Pair a method's per-window estimates with the IMU at each window's midpoint."""
    windows = estimates["window"].to_numpy(dtype=np.int64)
    t_mid = estimates["t_mid"].to_numpy(dtype=float)
    omega_hat = estimates[["omega_x", "omega_y", "omega_z"]].to_numpy(dtype=float)
    omega_imu = np.full_like(omega_hat, math.nan)
    covered = np.zeros(len(windows), dtype=bool)
    if imu is not None:
        for i, t in enumerate(t_mid):
            if imu.covers(float(t)):
                covered[i] = True
                omega_imu[i] = imu.lookup(float(t))
    if len(windows) and not covered.all():
        logger.warning("%s: %d of %d windows lie outside IMU coverage", method,
                       int((~covered).sum()), len(windows))
    return MethodRun(method, windows, t_mid, omega_hat, omega_imu, covered)


def check_alignment(runs: Dict[str, MethodRun]) -> None:
    lengths = {m: len(r) for m, r in runs.items()}
    if len(set(lengths.values())) > 1:
        raise AlignmentError(f"methods cover different window counts: {lengths}")
    ref = next(iter(runs.values()), None)
    for m, r in runs.items():
        if ref is not None and not np.array_equal(r.windows, ref.windows):
            raise AlignmentError(f"method {m!r} is not aligned by window index")


def rmse_frame(runs: Dict[str, MethodRun]) -> pd.DataFrame:
    rows = []
    for m in _ordered(runs):
        r = runs[m]
        err = r.errors()[r.covered]
        value = rmse(err) if len(err) else math.nan
        rows.append([m, len(r), int(r.covered.sum()), r.covered.mean() if len(r) else 0.0,
                     value, math.degrees(value) if not math.isnan(value) else math.nan])
    return pd.DataFrame(rows, columns=["method", "windows", "covered_windows", "coverage",
                                       "rmse_rad_s", "rmse_deg_s"])


def deviation_frame(runs: Dict[str, MethodRun], bounds: Optional[Sequence[float]] = None) -> tuple[pd.DataFrame, Dict[str, List[int]]]:
    full = runs["full"]
    c = full.covered.copy()
    for r in runs.values():
        c &= r.covered
    frame = pd.DataFrame({"window": full.windows[c], "t_mid": full.t_mid[c]})
    errors = {m: runs[m].errors()[c] for m in _ordered(runs)}
    degenerate: Dict[str, List[int]] = {}
    for m in _ordered(runs):
        frame[f"e_{m}"] = errors[m]
    for m in _ordered(runs):
        if m == "full":
            continue
        dev = deviation_metric(errors[m], errors["full"], frame["t_mid"].to_numpy(), bounds)
        if "segment" not in frame:
            frame["segment"] = dev.segment
        frame[f"D_{m}"] = dev.values
        degenerate[m] = dev.degenerate
    return frame, degenerate


COMPARISON_METRICS = [
    ("accesses", "accesses"),
    ("latency_ms", "latency_ms"),
    ("E_mem_rw_pJ", "E_mem.R/W"),
    ("E_logic_lkg_pJ", "E_logic+E_mem.lkg"),
    ("E_total_pJ", "E_total"),
]


def comparison_frame(designs: pd.DataFrame) -> pd.DataFrame:
    """Engine against baseline per metric, with the percentage change."""
    by = designs.set_index("design")
    rows = []
    for col, label in COMPARISON_METRICS:
        e = float(by.loc["engine", col])
        b = float(by.loc["baseline", col])
        change = 100.0 * (e - b) / b if b else 0.0
        rows.append([label, e, b, change])
    return pd.DataFrame(rows, columns=["metric", "engine", "baseline", "change_pct"])


def _ordered(runs: Dict[str, MethodRun]) -> List[str]:
    known = [m for m in METHOD_ORDER if m in runs]
    return known + sorted(m for m in runs if m not in METHOD_ORDER)


def report(runs: Dict[str, MethodRun], out_dir: str | Path, designs: Optional[pd.DataFrame] = None,
           realtime_ms: float = DEFAULT_REALTIME_MS, bounds: Optional[Sequence[float]] = None) -> Dict[str, Path]:
    """Write rmse.csv, deviation.csv, comparison.csv and summary.txt as applicable."""
    if not runs:
        raise DataError("no method runs to report")
    check_alignment(runs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}
    lines: List[str] = []

    rm = rmse_frame(runs)
    written["rmse"] = out / "rmse.csv"
    rm.to_csv(written["rmse"], **CSV_OPTS)
    lines.append("IMU-referenced angular-velocity RMSE")
    for row in rm.itertuples(index=False):
        lines.append(f"  {row.method:<9} {row.rmse_rad_s:.6f} rad/s  {row.rmse_deg_s:.4f} deg/s  "
                     f"({row.covered_windows}/{row.windows} windows covered)")

    if "full" in runs and len(runs) >= 2:
        dev, degenerate = deviation_frame(runs, bounds)
        written["deviation"] = out / "deviation.csv"
        dev.to_csv(written["deviation"], **CSV_OPTS)
        lines.append("")
        lines.append("Mean deviation from the full-resolution method")
        for m in _ordered(runs):
            if m == "full":
                continue
            mean = float(dev[f"D_{m}"].mean()) if len(dev) else math.nan
            flag = f"  degenerate segments {degenerate[m]}" if degenerate[m] else ""
            lines.append(f"  {m:<9} {mean:.6f}{flag}")

    if designs is not None and {"engine", "baseline"} <= set(designs["design"]):
        cmp = comparison_frame(designs)
        written["comparison"] = out / "comparison.csv"
        cmp.to_csv(written["comparison"], **CSV_OPTS)
        lines.append("")
        lines.append("Engine against baseline")
        for row in cmp.itertuples(index=False):
            lines.append(f"  {row.metric:<18} {row.engine:.6g} vs {row.baseline:.6g} ({row.change_pct:+.2f}%)")
        lines.append("")
        lines.extend(realtime_lines(designs, realtime_ms))

    written["summary"] = out / "summary.txt"
    written["summary"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("report written to %s", out)
    return written


def realtime_lines(designs: pd.DataFrame, realtime_ms: float) -> List[str]:
    lines = [f"Real-time bound {realtime_ms:.2f} ms per window"]
    for row in designs.itertuples(index=False):
        verdict = "meets" if row.latency_ms <= realtime_ms else "misses"
        lines.append(f"  {row.design:<9} {row.latency_ms:.4f} ms average latency, {verdict} the bound")
    return lines
