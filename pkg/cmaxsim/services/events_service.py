"""Event ingestion, windowing, calibration/IMU loading and synthetic scenes.

Files follow the public Event Camera Dataset text layout:
``events.txt`` ("t x y p", p in {0, 1}), ``imu.txt`` ("t wx wy wz ..."),
``calib.txt`` (first four numbers fx fy cx cy).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from cmaxsim.core.errors import DataError, EventOrderError, EventParseError, ImuOrderError, OutOfRangeError
from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import CameraIntrinsics, EventStream, EventWindow, ImuTrack, MotionParams
from cmaxsim.utils.text_parsing import iter_data_lines, parse_float, parse_int, read_numbers

logger = get_logger("events")


def _scan_events(path: Path, intr: CameraIntrinsics) -> EventStream:
    xs: List[int] = []
    ys: List[int] = []
    ts: List[float] = []
    ps: List[int] = []
    for line_no, tokens in iter_data_lines(path):
        if len(tokens) != 4:
            raise EventParseError(f"expected 't x y p', got {len(tokens)} fields", str(path), line_no)
        t = parse_float(tokens[0], path, line_no, "t")
        x = parse_int(tokens[1], path, line_no, "x")
        y = parse_int(tokens[2], path, line_no, "y")
        p = parse_int(tokens[3], path, line_no, "p")
        if ts and t < ts[-1]:
            raise EventOrderError(f"timestamp {t!r} goes backwards (previous {ts[-1]!r})", str(path), line_no)
        if p not in (0, 1):
            raise EventParseError(f"polarity must be 0 or 1, got {tokens[3]!r}", str(path), line_no)
        if not (0 <= x < intr.width and 0 <= y < intr.height):
            raise OutOfRangeError(
                f"{path}:{line_no}: pixel ({x}, {y}) outside sensor {intr.width}x{intr.height}"
            )
        xs.append(x)
        ys.append(y)
        ts.append(t)
        ps.append(1 if p == 1 else -1)
    return EventStream(np.array(xs), np.array(ys), np.array(ts, dtype=np.float64), np.array(ps),
                       intr.width, intr.height)


def load_events(path: str | Path, intr: CameraIntrinsics) -> EventStream:
    """Load an events file in file order, remapping polarity 0/1 to -1/+1.

    The fast numpy path is tried first; any irregularity falls back to a
    line-by-line scan that reports the offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"events file not found: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
    except ValueError:
        data = None

    if data is not None and data.size == 0:
        return EventStream.empty(intr.width, intr.height)
    if data is None or data.shape[1] != 4:
        return _scan_events(path, intr)

    x, y, p = data[:, 1], data[:, 2], data[:, 3]
    in_range = (x >= 0) & (x < intr.width) & (y >= 0) & (y < intr.height)
    well_formed = (x == np.floor(x)) & (y == np.floor(y)) & ((p == 0) | (p == 1))
    ordered = bool(np.all(np.diff(data[:, 0]) >= 0))
    if not (np.all(in_range) and np.all(well_formed) and ordered):
        return _scan_events(path, intr)

    stream = EventStream(x.astype(np.int32), y.astype(np.int32), data[:, 0].copy(),
                         np.where(p > 0, 1, -1), intr.width, intr.height)
    logger.info("Loaded %d events from %s", len(stream), path)
    return stream


def write_events(stream: EventStream, path: str | Path) -> None:
    # repr() of a float is the shortest string that parses back to the same double.
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
            f.write(f"{t!r} {x} {y} {1 if p > 0 else 0}\n")


def window_by_count(stream: EventStream, n: int) -> List[EventWindow]:
    """Split a stream into consecutive windows of exactly ``n`` events.

    The trailing remainder (< n events) is dropped; t_ref of each window is
    the timestamp of its first event. Timestamps must not decrease.
    """
    if n < 1:
        raise DataError(f"window size must be >= 1, got {n}")
    back = np.flatnonzero(np.diff(stream.t) < 0)
    if len(back):
        i = int(back[0]) + 1
        raise EventOrderError(f"event {i} at t={float(stream.t[i])!r} precedes event {i - 1} "
                              f"at t={float(stream.t[i - 1])!r}")
    count = len(stream) // n
    windows = []
    for k in range(count):
        part = stream.slice(k * n, (k + 1) * n)
        windows.append(EventWindow(part, float(part.t[0]), index=k, start=k * n))
    dropped = len(stream) - count * n
    if dropped:
        logger.debug("Dropped %d trailing events (< window size %d)", dropped, n)
    return windows


def load_imu(path: str | Path) -> ImuTrack:
    path = Path(path)
    if not path.exists():
        raise DataError(f"imu file not found: {path}")
    ts: List[float] = []
    ws: List[List[float]] = []
    for line_no, tokens in iter_data_lines(path):
        if len(tokens) < 4:
            raise EventParseError(f"expected at least 't wx wy wz', got {len(tokens)} fields", str(path), line_no)
        t = parse_float(tokens[0], path, line_no, "t")
        if ts and t < ts[-1]:
            raise ImuOrderError(f"{path}:{line_no}: timestamp {t} goes backwards (previous {ts[-1]})")
        ts.append(t)
        ws.append([parse_float(tok, path, line_no, "omega") for tok in tokens[1:4]])
    omega = np.array(ws, dtype=np.float64).reshape(-1, 3)
    return ImuTrack(np.array(ts, dtype=np.float64), omega)


def write_imu(track: ImuTrack, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t, w in zip(track.t.tolist(), track.omega.tolist()):
            f.write(f"{t!r} {w[0]!r} {w[1]!r} {w[2]!r}\n")


def load_calib(path: str | Path, width: int, height: int) -> CameraIntrinsics:
    path = Path(path)
    if not path.exists():
        raise DataError(f"calib file not found: {path}")
    numbers = read_numbers(path)
    if len(numbers) < 4:
        raise EventParseError(f"calibration needs fx fy cx cy, found {len(numbers)} numbers", str(path), 1)
    fx, fy, cx, cy = numbers[:4]
    return CameraIntrinsics(fx, fy, cx, cy, width, height).check()


def write_calib(intr: CameraIntrinsics, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r}\n")


# --- synthetic scenes -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class Texture:
    """Edge points in pixel coordinates at t = 0, each with a contrast sign."""

    x: np.ndarray
    y: np.ndarray
    sign: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    events: EventStream
    sources: np.ndarray  # generating texture point per event, -1 for noise
    omega_true: MotionParams


def random_texture(n_points: int, intr: CameraIntrinsics, rng: np.random.Generator) -> Texture:
    return Texture(
        rng.uniform(0.0, intr.width, n_points),
        rng.uniform(0.0, intr.height, n_points),
        rng.choice(np.array([-1, 1]), n_points),
    )


def _flow(x: np.ndarray, y: np.ndarray, w: np.ndarray, intr: CameraIntrinsics):
    # Same rotational flow field the warp front-end inverts.
    xn = (x - intr.cx) / intr.fx
    yn = (y - intr.cy) / intr.fy
    xy = xn * yn
    u = intr.fx * (xy * w[0] - (1.0 + xn * xn) * w[1] + yn * w[2])
    v = intr.fy * ((1.0 + yn * yn) * w[0] - xy * w[1] - xn * w[2])
    return u, v


def synth_scene(
    omega_true: MotionParams,
    intr: CameraIntrinsics,
    duration: float,
    texture: Texture,
    noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    max_step_px: float = 0.2,
) -> SyntheticScene:
    """Rotate a point texture under a constant angular velocity and emit events.

    Points move with the flow (u, v); an event fires at the new pixel each
    time a point crosses a pixel boundary along x or y. Points leaving the
    sensor re-enter on the opposite side without firing. Noise events are
    uniform in space and time, ``noise`` being their fraction of the output.
    """
    if duration <= 0:
        raise DataError(f"duration must be positive, got {duration}")
    if not (0.0 <= noise < 1.0):
        raise DataError(f"noise fraction must lie in [0, 1), got {noise}")
    rng = rng if rng is not None else np.random.default_rng(0)
    w = omega_true.as_array()

    x = np.asarray(texture.x, dtype=np.float64).copy()
    y = np.asarray(texture.y, dtype=np.float64).copy()
    ids = np.arange(len(texture))

    grid_x, grid_y = np.meshgrid(np.linspace(0, intr.width, 9), np.linspace(0, intr.height, 9))
    gu, gv = _flow(grid_x, grid_y, w, intr)
    vmax = float(max(np.abs(gu).max(initial=0.0), np.abs(gv).max(initial=0.0)))

    out_t: List[np.ndarray] = []
    out_x: List[np.ndarray] = []
    out_y: List[np.ndarray] = []
    out_p: List[np.ndarray] = []
    out_src: List[np.ndarray] = []

    if vmax > 0 and len(texture):
        dt = min(duration, max_step_px / vmax)
        steps = int(np.ceil(duration / dt))
        dt = duration / steps
        for k in range(steps):
            t0 = k * dt
            # midpoint rule
            u1, v1 = _flow(x, y, w, intr)
            u2, v2 = _flow(x + 0.5 * dt * u1, y + 0.5 * dt * v1, w, intr)
            nx = x + dt * u2
            ny = y + dt * v2
            for axis, (old, new) in enumerate(((x, nx), (y, ny))):
                cell_old = np.floor(old)
                cell_new = np.floor(new)
                crossed = cell_old != cell_new
                if not np.any(crossed):
                    continue
                boundary = np.where(new > old, cell_new, cell_old)
                frac = (boundary[crossed] - old[crossed]) / (new[crossed] - old[crossed])
                tc = t0 + frac * dt
                ex = np.floor(x[crossed] + frac * (nx[crossed] - x[crossed])).astype(np.int64)
                ey = np.floor(y[crossed] + frac * (ny[crossed] - y[crossed])).astype(np.int64)
                if axis == 0:
                    ex = cell_new[crossed].astype(np.int64)
                else:
                    ey = cell_new[crossed].astype(np.int64)
                inside = (ex >= 0) & (ex < intr.width) & (ey >= 0) & (ey < intr.height)
                out_t.append(tc[inside])
                out_x.append(ex[inside])
                out_y.append(ey[inside])
                out_p.append(texture.sign[crossed][inside])
                out_src.append(ids[crossed][inside])
            x = np.mod(nx, intr.width)
            y = np.mod(ny, intr.height)

    t_all = np.concatenate(out_t) if out_t else np.zeros(0)
    x_all = np.concatenate(out_x) if out_x else np.zeros(0, dtype=np.int64)
    y_all = np.concatenate(out_y) if out_y else np.zeros(0, dtype=np.int64)
    p_all = np.concatenate(out_p) if out_p else np.zeros(0, dtype=np.int64)
    s_all = np.concatenate(out_src) if out_src else np.zeros(0, dtype=np.int64)

    n_signal = len(t_all)
    n_noise = int(round(noise / (1.0 - noise) * n_signal)) if noise > 0 else 0
    if n_noise:
        t_all = np.concatenate([t_all, rng.uniform(0.0, duration, n_noise)])
        x_all = np.concatenate([x_all, rng.integers(0, intr.width, n_noise)])
        y_all = np.concatenate([y_all, rng.integers(0, intr.height, n_noise)])
        p_all = np.concatenate([p_all, rng.choice(np.array([-1, 1]), n_noise)])
        s_all = np.concatenate([s_all, np.full(n_noise, -1)])

    # microsecond timestamps, as a DVS reports them
    t_all = np.round(t_all, 6)
    order = np.argsort(t_all, kind="stable")
    events = EventStream(x_all[order], y_all[order], t_all[order], p_all[order], intr.width, intr.height)
    logger.info("Synthesised %d events (%d noise) over %.3f s", len(events), n_noise, duration)
    return SyntheticScene(events, s_all[order].astype(np.int64), omega_true)
