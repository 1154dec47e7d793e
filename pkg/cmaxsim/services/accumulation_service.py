"""Reference dense accumulation of warped events.

Builds the image of warped events (IWE) and its three derivative images by
bilinear voting. Channel 0 of ``IweChannels.data`` is the IWE, channels 1..3
are dIWE/domega_x, dIWE/domega_y, dIWE/domega_z.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from cmaxsim.core.errors import ConfigError, DataError, EngineError
from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import CameraIntrinsics, EventWindow, MotionParams, StageScale
from cmaxsim.services.warp_service import WarpedBatch, WarpedEvent, warp_batch

logger = get_logger("accumulation")

N_CHANNELS = 4
N_TAPS = 4
# Tap order: (x0, y0), (x0+1, y0), (x0, y0+1), (x0+1, y0+1)
TAP_DX = np.array([0, 1, 0, 1], dtype=np.int64)
TAP_DY = np.array([0, 0, 1, 1], dtype=np.int64)

DUMP_MAGIC = b"CMXIWE1\x00"


@dataclass(frozen=True)
class TapDeltas:
    px: np.ndarray  # (4,)
    py: np.ndarray  # (4,)
    deltas: np.ndarray  # (4 taps, 4 channels)

    @property
    def d_iwe(self) -> np.ndarray:
        return self.deltas[:, 0]

    @property
    def d_x(self) -> np.ndarray:
        return self.deltas[:, 1]

    @property
    def d_y(self) -> np.ndarray:
        return self.deltas[:, 2]

    @property
    def d_z(self) -> np.ndarray:
        return self.deltas[:, 3]


@dataclass(frozen=True, eq=False)
class VoteBatch:
    """Per-event tap coordinates and deltas for a batch of valid events."""

    px: np.ndarray  # (n, 4)
    py: np.ndarray  # (n, 4)
    deltas: np.ndarray  # (n, 4 taps, 4 channels)

    def __len__(self) -> int:
        return len(self.px)

    def taps(self, i: int) -> TapDeltas:
        return TapDeltas(self.px[i].copy(), self.py[i].copy(), self.deltas[i].copy())


@dataclass(eq=False)
class IweChannels:
    data: np.ndarray  # (4, hs, ws)
    scale: StageScale

    def __post_init__(self) -> None:
        if self.data.shape != (N_CHANNELS, self.scale.hs, self.scale.ws):
            raise DataError(
                f"channel block shape {self.data.shape} does not match stage "
                f"{self.scale.hs}x{self.scale.ws}"
            )

    @classmethod
    def zeros(cls, scale: StageScale) -> "IweChannels":
        return cls(np.zeros((N_CHANNELS, scale.hs, scale.ws), dtype=np.float64), scale)

    @property
    def iwe(self) -> np.ndarray:
        return self.data[0]

    @property
    def d_iwe_x(self) -> np.ndarray:
        return self.data[1]

    @property
    def d_iwe_y(self) -> np.ndarray:
        return self.data[2]

    @property
    def d_iwe_z(self) -> np.ndarray:
        return self.data[3]

    def __add__(self, other: "IweChannels") -> "IweChannels":
        return IweChannels(self.data + other.data, self.scale)


def check_quantum(quantum: Optional[int]) -> None:
    if quantum is None:
        return
    if quantum <= 0 or quantum & (quantum - 1):
        raise ConfigError(f"quantum must be a positive power of two, got {quantum}")


def quantize(values: np.ndarray, quantum: Optional[int]) -> np.ndarray:
    """Round to integer multiples of ``1/quantum``.

    With a power-of-two quantum every rounded value is an exact dyadic
    rational, so sums of them do not depend on the summation order.
    """
    if quantum is None:
        return values
    check_quantum(quantum)
    return np.round(values * quantum) / quantum


def bilinear_vote_batch(w: WarpedBatch, quantum: Optional[int] = None) -> VoteBatch:
    if len(w) and not np.all(w.valid):
        bad = int(np.flatnonzero(~w.valid)[0])
        raise EngineError(f"event {bad} has an invalid p_act and cannot be voted")

    ax = w.alpha_x[:, None]
    ay = w.alpha_y[:, None]
    bx = 1.0 - w.alpha_x[:, None]
    by = 1.0 - w.alpha_y[:, None]
    p = w.p.astype(np.float64)[:, None]

    weights = np.concatenate([bx * by, ax * by, bx * ay, ax * ay], axis=1)
    dw_dx = np.concatenate([-by, by, -ay, ay], axis=1)
    dw_dy = np.concatenate([-bx, -ax, bx, ax], axis=1)

    n = len(w)
    deltas = np.empty((n, N_TAPS, N_CHANNELS), dtype=np.float64)
    deltas[:, :, 0] = p * weights
    for j in range(3):
        # dx'/domega_j = -r_x[j], dy'/domega_j = -r_y[j]
        deltas[:, :, 1 + j] = -p * (dw_dx * w.r_x[:, j:j + 1] + dw_dy * w.r_y[:, j:j + 1])

    deltas = quantize(deltas, quantum)
    px = w.x0[:, None] + TAP_DX[None, :]
    py = w.y0[:, None] + TAP_DY[None, :]
    return VoteBatch(px, py, deltas)


def bilinear_vote(w: WarpedEvent, quantum: Optional[int] = None) -> TapDeltas:
    if not w.valid:
        raise EngineError("cannot vote an event whose warped stencil is out of range")
    batch = WarpedBatch(
        np.array([w.x0]), np.array([w.y0]), np.array([w.alpha_x]), np.array([w.alpha_y]),
        w.r_x.reshape(1, 3), w.r_y.reshape(1, 3), np.array([w.p_act]), np.array([w.p]),
        np.array([w.x_w]), np.array([w.y_w]),
    )
    return bilinear_vote_batch(batch, quantum).taps(0)


def scatter_votes(channels: IweChannels, votes: VoteBatch) -> None:
    """Add every tap delta of ``votes`` into ``channels`` in place."""
    if not len(votes):
        return
    flat = (votes.py * channels.scale.ws + votes.px).ravel()
    for c in range(N_CHANNELS):
        np.add.at(channels.data[c].reshape(-1), flat, votes.deltas[:, :, c].ravel())


def accumulate_window(
    win: EventWindow,
    subset: Optional[np.ndarray],
    omega: MotionParams,
    scale: StageScale,
    intr: CameraIntrinsics,
    quantum: Optional[int] = None,
    shards: int = 1,
) -> IweChannels:
    """Dense sum of bilinear votes of the selected, in-range events.

    ``subset`` is a boolean mask of length N (None selects every event).
    ``shards`` splits the selected events into private images that are
    reduced in shard order at the end.
    """
    if subset is None:
        index = np.arange(win.n)
    else:
        subset = np.asarray(subset, dtype=bool)
        if subset.shape != (win.n,):
            raise DataError(f"subset mask has length {subset.shape[0]}, window has {win.n} events")
        index = np.flatnonzero(subset)

    out = IweChannels.zeros(scale)
    if len(index) == 0:
        return out

    warped = warp_batch(win.events, win.t_ref, omega, scale, intr, index=index)
    keep = np.flatnonzero(warped.valid)
    if len(keep) < len(warped):
        logger.debug("stage %s: %d of %d selected events fall outside the grid",
                     scale.label, len(warped) - len(keep), len(warped))
    votes = bilinear_vote_batch(warped.take(keep), quantum)

    if shards <= 1:
        scatter_votes(out, votes)
        return out
    for part in np.array_split(np.arange(len(votes)), shards):
        private = IweChannels.zeros(scale)
        scatter_votes(private, VoteBatch(votes.px[part], votes.py[part], votes.deltas[part]))
        out.data += private.data
    return out


def dump_channels(channels: IweChannels, path: str | Path) -> None:
    """Write the four channels as a flat little-endian float64 block."""
    hs, ws = channels.scale.hs, channels.scale.ws
    header = np.array([hs, ws, N_CHANNELS], dtype="<i4").tobytes()
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(header)
        f.write(np.ascontiguousarray(channels.data, dtype="<f8").tobytes())


def load_channels(path: str | Path, scale: StageScale) -> IweChannels:
    raw = Path(path).read_bytes()
    if raw[:len(DUMP_MAGIC)] != DUMP_MAGIC:
        raise DataError(f"{path}: not an IWE dump")
    off = len(DUMP_MAGIC)
    hs, ws, nc = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=3, offset=off))
    if (hs, ws) != (scale.hs, scale.ws) or nc != N_CHANNELS:
        raise DataError(f"{path}: dump is {nc}x{hs}x{ws}, expected {N_CHANNELS}x{scale.hs}x{scale.ws}")
    if len(raw) != off + 12 + 8 * nc * hs * ws:
        raise DataError(f"{path}: truncated IWE dump")
    data = np.frombuffer(raw, dtype="<f8", offset=off + 12).reshape(nc, hs, ws).astype(np.float64)
    return IweChannels(data, scale)
