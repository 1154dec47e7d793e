"""
Sweep the adaptive stage thresholds and record the accuracy/work operating curve.

Each grid point scales the configured tau triple by one factor. Full and fixed
runs are computed once as reference rows. Output columns:
  method, tau_quarter, tau_half, tau_full, rmse_rad_s, rmse_deg_s, mean_iterations, mean_work_units

Run:
  python scripts/sweep_tau.py --config exp.ini --factors 0.25,0.5,1,2,4 --out out/tau_sweep.csv
"""

from __future__ import annotations
import argparse
import math
from pathlib import Path
import sys
from typing import List, Sequence

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from cmaxsim.cli.commands import line_search_for, make_schedule  # noqa: E402
from cmaxsim.core.config import RunConfig, load_run_config  # noqa: E402
from cmaxsim.core.errors import CmaxError  # noqa: E402
from cmaxsim.core.logging import setup_logging  # noqa: E402
from cmaxsim.services.eval_service import CSV_OPTS, method_run, rmse  # noqa: E402
from cmaxsim.services.events_service import load_calib, load_events, load_imu, window_by_count  # noqa: E402
from cmaxsim.services.scheduler_service import estimates_frame, reference_evaluator_factory, run_sequence  # noqa: E402

COLUMNS = ["method", "tau_quarter", "tau_half", "tau_full", "rmse_rad_s", "rmse_deg_s",
           "mean_iterations", "mean_work_units"]


def parse_factors(text: str) -> List[float]:
    factors = [float(v) for v in text.split(",") if v.strip()]
    if not factors or any(f <= 0 for f in factors):
        raise ValueError("factors must be positive numbers")
    return factors


def sweep(cfg: RunConfig, factors: Sequence[float]) -> pd.DataFrame:
    cfg.check_paths("estimate")
    cfg.check_paths("evaluate")
    intr = load_calib(cfg.dataset.calib, cfg.dataset.width, cfg.dataset.height)
    windows = window_by_count(load_events(cfg.dataset.events, intr), cfg.window.size)
    if cfg.window.max_windows is not None:
        windows = windows[: cfg.window.max_windows]
    imu = load_imu(cfg.dataset.imu)
    factory = reference_evaluator_factory(intr, cfg.run.quantum)

    def row(method: str, c: RunConfig) -> list:
        results = run_sequence(windows, make_schedule(c, method, intr), factory, c.optimizer.step, line_search_for(c))
        est = estimates_frame(results)
        run = method_run(method, est, imu)
        err = run.errors()[run.covered]
        value = rmse(err) if len(err) else math.nan
        return [method, *c.schedule.tau, value, math.degrees(value),
                float(est["iterations"].mean()), float(est["work_units"].mean())]

    rows = [row("full", cfg), row("fixed", cfg)]
    for f in factors:
        scaled = cfg.model_copy(deep=True)
        scaled.schedule.tau = [t * f for t in cfg.schedule.tau]
        rows.append(row("adaptive", scaled))
    return pd.DataFrame(rows, columns=COLUMNS)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=str, required=True, help="INI experiment file")
    ap.add_argument("--factors", type=str, default="0.25,0.5,1,2,4", help="Comma-separated tau multipliers")
    ap.add_argument("--out", type=str, default="out/tau_sweep.csv", help="Output CSV path")
    args = ap.parse_args()

    setup_logging("WARNING")
    try:
        cfg = load_run_config(args.config)
        frame = sweep(cfg, parse_factors(args.factors))
    except (CmaxError, ValueError) as e:
        print(f"sweep failed: {e}", file=sys.stderr)
        return 2

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_path, **CSV_OPTS)
    best = frame[frame["method"] == "adaptive"].sort_values("rmse_rad_s").head(1)
    print(f"Wrote {len(frame)} rows to {out_path}")
    if len(best):
        print(f"Lowest adaptive RMSE {best['rmse_rad_s'].iloc[0]:.6f} rad/s at tau "
              f"{best['tau_quarter'].iloc[0]:.4g}, {best['tau_half'].iloc[0]:.4g}, {best['tau_full'].iloc[0]:.4g}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
