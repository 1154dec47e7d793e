"""Shared warp front-end.

Maps events under a rotation hypothesis and stage scale to warped
coordinates, bilinear fractions, Jacobian rows and a stage-local pixel index.

Sign convention: the Jacobian rows are stored exactly as the hardware front-end
builds them, ``r_x = s*dt*[fx*XY, -fx*B, fx*yn]`` (and ``r_y`` likewise), which
is ``+s*dt*grad_omega(u)``. Because ``x' = s*(x - dt*u)``, the true derivative
is ``dx'/domega_j = -r_x[j]`` and ``dy'/domega_j = -r_y[j]``. Every consumer
(bilinear voting, finite-difference checks) applies that minus sign.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmaxsim.models.schemas import CameraIntrinsics, Event, EventStream, MotionParams, StageScale

INVALID = -1


@dataclass(frozen=True)
class WarpedEvent:
    x0: int
    y0: int
    alpha_x: float
    alpha_y: float
    r_x: np.ndarray
    r_y: np.ndarray
    p_act: int
    p: int
    x_w: float
    y_w: float

    @property
    def valid(self) -> bool:
        return self.p_act != INVALID


@dataclass(frozen=True, eq=False)
class WarpedBatch:
    """Struct-of-arrays output of the front-end for a batch of events."""

    x0: np.ndarray
    y0: np.ndarray
    alpha_x: np.ndarray
    alpha_y: np.ndarray
    r_x: np.ndarray  # (n, 3)
    r_y: np.ndarray  # (n, 3)
    p_act: np.ndarray
    p: np.ndarray
    x_w: np.ndarray
    y_w: np.ndarray

    def __len__(self) -> int:
        return len(self.p_act)

    @property
    def valid(self) -> np.ndarray:
        return self.p_act != INVALID

    def take(self, idx: np.ndarray) -> "WarpedBatch":
        return WarpedBatch(self.x0[idx], self.y0[idx], self.alpha_x[idx], self.alpha_y[idx],
                           self.r_x[idx], self.r_y[idx], self.p_act[idx], self.p[idx],
                           self.x_w[idx], self.y_w[idx])

    def event(self, i: int) -> WarpedEvent:
        return WarpedEvent(
            int(self.x0[i]), int(self.y0[i]), float(self.alpha_x[i]), float(self.alpha_y[i]),
            self.r_x[i].copy(), self.r_y[i].copy(), int(self.p_act[i]), int(self.p[i]),
            float(self.x_w[i]), float(self.y_w[i]),
        )


def stencil_fits(x0: np.ndarray, y0: np.ndarray, scale: StageScale) -> np.ndarray:
    """All four bilinear taps (x0..x0+1, y0..y0+1) inside the scaled grid."""
    return (x0 >= 0) & (x0 + 1 < scale.ws) & (y0 >= 0) & (y0 + 1 < scale.hs)


def warp_arrays(
    x: np.ndarray,
    y: np.ndarray,
    t: np.ndarray,
    p: np.ndarray,
    t_ref: float,
    omega: MotionParams,
    scale: StageScale,
    intr: CameraIntrinsics,
) -> WarpedBatch:
    wx, wy, wz = omega.wx, omega.wy, omega.wz
    s = scale.s
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    xn = (x - intr.cx) / intr.fx
    yn = (y - intr.cy) / intr.fy
    dt = np.asarray(t, dtype=np.float64) - t_ref

    b = 1.0 + xn * xn
    d = 1.0 + yn * yn
    xy = xn * yn

    u = intr.fx * (xy * wx - b * wy + yn * wz)
    v = intr.fy * (d * wx - xy * wy - xn * wz)

    xw = s * (x - dt * u)
    yw = s * (y - dt * v)

    sdt = s * dt
    r_x = np.stack([sdt * intr.fx * xy, -sdt * intr.fx * b, sdt * intr.fx * yn], axis=-1)
    r_y = np.stack([sdt * intr.fy * d, -sdt * intr.fy * xy, -sdt * intr.fy * xn], axis=-1)

    fx0 = np.floor(xw)
    fy0 = np.floor(yw)
    x0 = fx0.astype(np.int64)
    y0 = fy0.astype(np.int64)
    alpha_x = xw - fx0
    alpha_y = yw - fy0

    fits = stencil_fits(x0, y0, scale)
    p_act = np.where(fits, y0 * scale.ws + x0, INVALID).astype(np.int64)

    return WarpedBatch(x0, y0, alpha_x, alpha_y, r_x, r_y, p_act,
                       np.asarray(p, dtype=np.int64), xw, yw)


def warp_batch(
    events: EventStream,
    t_ref: float,
    omega: MotionParams,
    scale: StageScale,
    intr: CameraIntrinsics,
    index: np.ndarray | None = None,
) -> WarpedBatch:
    """Warp a whole stream, or only ``events[index]`` in the order given."""
    if index is None:
        return warp_arrays(events.x, events.y, events.t, events.p, t_ref, omega, scale, intr)
    return warp_arrays(events.x[index], events.y[index], events.t[index], events.p[index],
                       t_ref, omega, scale, intr)


def warp_event(e: Event, t_ref: float, omega: MotionParams, scale: StageScale,
               intr: CameraIntrinsics) -> WarpedEvent:
    batch = warp_arrays(np.array([e.x]), np.array([e.y]), np.array([e.t]), np.array([e.p]),
                        t_ref, omega, scale, intr)
    return batch.event(0)
