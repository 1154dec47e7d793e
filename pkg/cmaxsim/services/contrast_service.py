"""Gaussian smoothing of the IWE channels and the variance objective.

Both the materialised path (``smooth`` + ``stream_stats``) and the streaming
``LineBufferBlur`` apply the taps in the same order and feed rows to the same
``StatsAccumulator``, so they produce bitwise identical statistics.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Optional

import numpy as np

from cmaxsim.core.errors import KernelError, NumericalError
from cmaxsim.models.schemas import StageScale
from cmaxsim.services.accumulation_service import IweChannels

STAGE_TAPS: Dict[float, int] = {0.25: 3, 0.5: 5, 1.0: 9}
DEFAULT_SIGMA = 1.0
NEGATIVE_VARIANCE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    taps: np.ndarray
    sigma: float

    @property
    def length(self) -> int:
        return len(self.taps)

    @property
    def radius(self) -> int:
        return len(self.taps) // 2


def gaussian_taps(length: int, sigma: float) -> np.ndarray:
    if length < 1 or length % 2 == 0:
        raise KernelError(f"kernel length must be odd and positive, got {length}")
    r = length // 2
    if sigma <= 0:
        taps = np.zeros(length)
        taps[r] = 1.0
        return taps
    k = np.arange(-r, r + 1, dtype=np.float64)
    taps = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return taps / taps.sum()


def make_kernel(scale: StageScale, sigma: float = DEFAULT_SIGMA) -> GaussianKernel:
    length = STAGE_TAPS.get(scale.s)
    if length is None:
        raise KernelError(f"no kernel defined for stage scale {scale.s}; supported: {sorted(STAGE_TAPS)}")
    return GaussianKernel(gaussian_taps(length, sigma), float(sigma))


def _check_fits(kernel: GaussianKernel, hs: int, ws: int) -> None:
    if kernel.length > min(hs, ws):
        raise KernelError(f"{kernel.length}-tap kernel does not fit a {hs}x{ws} image")


def _fir_last_axis(block: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    n = block.shape[-1]
    pad = [(0, 0)] * (block.ndim - 1) + [(r, r)]
    padded = np.pad(block, pad)
    out = np.zeros(block.shape, dtype=np.float64)
    for k, w in enumerate(taps):
        out += w * padded[..., k:k + n]
    return out


def smooth_block(data: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Horizontal then vertical zero-padded FIR over a (C, H, W) block."""
    _check_fits(kernel, data.shape[-2], data.shape[-1])
    horiz = _fir_last_axis(data, kernel.taps)
    r = kernel.radius
    h = data.shape[-2]
    padded = np.pad(horiz, [(0, 0)] * (horiz.ndim - 2) + [(r, r), (0, 0)])
    out = np.zeros(horiz.shape, dtype=np.float64)
    for k, w in enumerate(kernel.taps):
        out += w * padded[..., k:k + h, :]
    return out


def smooth(channels: IweChannels, kernel: GaussianKernel) -> np.ndarray:
    return smooth_block(channels.data, kernel)


@dataclass
class StreamStats:
    S1: float = 0.0
    S2: float = 0.0
    G: np.ndarray = field(default_factory=lambda: np.zeros(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))
    P: int = 0

    def as_dict(self) -> dict:
        return {
            "S1": self.S1, "S2": self.S2,
            "G_x": float(self.G[0]), "G_y": float(self.G[1]), "G_z": float(self.G[2]),
            "T_x": float(self.T[0]), "T_y": float(self.T[1]), "T_z": float(self.T[2]),
            "P": self.P,
        }

    def max_abs_diff(self, other: "StreamStats") -> float:
        a = np.concatenate([[self.S1, self.S2], self.G, self.T])
        b = np.concatenate([[other.S1, other.S2], other.G, other.T])
        return float(np.max(np.abs(a - b)))


class StatsAccumulator:
    """Running S1, S2, G_j, T_j over blurred rows, one row at a time."""

    def __init__(self) -> None:
        self._s1 = 0.0
        self._s2 = 0.0
        self._g = np.zeros(3)
        self._t = np.zeros(3)
        self._p = 0

    def push_row(self, row: np.ndarray) -> None:
        row = np.ascontiguousarray(row, dtype=np.float64)
        i = row[0]
        d = row[1:]
        self._s1 += float(i.sum())
        self._s2 += float((i * i).sum())
        self._g += (d * i).sum(axis=1)
        self._t += d.sum(axis=1)
        self._p += row.shape[-1]

    def result(self) -> StreamStats:
        return StreamStats(self._s1, self._s2, self._g.copy(), self._t.copy(), self._p)


def stream_stats(smoothed: np.ndarray) -> StreamStats:
    acc = StatsAccumulator()
    for y in range(smoothed.shape[1]):
        acc.push_row(smoothed[:, y, :])
    return acc.result()


class LineBufferBlur:
    """Row-streaming separable blur feeding a StatsAccumulator.

    Each input row is filtered horizontally on arrival and pushed into a ring
    of ``taps`` zero-initialised line buffers; once the ring is full the
    vertical FIR produces one output row, which goes straight to the
    statistics. Blurred rows are never stored.
    """

    def __init__(self, kernel: GaussianKernel, height: int, width: int,
                 sink: Optional[StatsAccumulator] = None) -> None:
        _check_fits(kernel, height, width)
        self.kernel = kernel
        self.height = height
        self.width = width
        self.sink = sink or StatsAccumulator()
        self.buffer_writes = 0
        self.buffer_reads = 0
        self._rows_in = 0
        self._zero = np.zeros((4, width))
        self._ring: Deque[np.ndarray] = deque(
            [self._zero] * kernel.radius, maxlen=kernel.length
        )

    def push(self, row: np.ndarray) -> None:
        if self._rows_in >= self.height:
            raise KernelError("line buffer received more rows than the image height")
        self._rows_in += 1
        channels = row.shape[0]
        horiz = _fir_last_axis(row, self.kernel.taps)
        self.buffer_writes += channels * self.width
        self._append(horiz)

    def _append(self, horiz: np.ndarray) -> None:
        self._ring.append(horiz)
        if len(self._ring) == self.kernel.length:
            out = np.zeros(horiz.shape, dtype=np.float64)
            for k, w in enumerate(self.kernel.taps):
                out += w * self._ring[k]
            self.buffer_reads += horiz.shape[0] * self.width * (self.kernel.length - 1)
            self.sink.push_row(out)

    def finish(self) -> StreamStats:
        if self._rows_in != self.height:
            raise KernelError(f"line buffer got {self._rows_in} rows, expected {self.height}")
        for _ in range(self.kernel.radius):
            self._append(self._zero)
        return self.sink.result()


def line_buffer_stats(channels: IweChannels, kernel: GaussianKernel) -> tuple[StreamStats, LineBufferBlur]:
    blur = LineBufferBlur(kernel, channels.scale.hs, channels.scale.ws)
    for y in range(channels.scale.hs):
        blur.push(channels.data[:, y, :])
    return blur.finish(), blur


@dataclass(frozen=True, eq=False)
class Objective:
    variance: float
    gradient: np.ndarray

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.variance) and np.all(np.isfinite(self.gradient)))


def objective_from_stats(st: StreamStats) -> Objective:
    if st.P <= 0:
        raise NumericalError("statistics cover zero pixels")
    p = float(st.P)
    mean = st.S1 / p
    var = st.S2 / p - mean * mean
    if var < -NEGATIVE_VARIANCE_TOL:
        raise NumericalError(f"negative variance {var!r} from S1={st.S1!r}, S2={st.S2!r}, P={st.P}")
    grad = (2.0 / p) * (st.G - st.S1 * st.T / p)
    return Objective(max(var, 0.0), grad)


def direct_objective(smoothed: np.ndarray) -> Objective:
    """Two-pass form: mean-centred variance and gradient over the blurred block."""
    i = smoothed[0]
    p = i.size
    centred = i - i.mean()
    var = float((centred * centred).sum() / p)
    grad = np.array([2.0 * float((centred * smoothed[1 + j]).sum()) / p for j in range(3)])
    return Objective(var, grad)
