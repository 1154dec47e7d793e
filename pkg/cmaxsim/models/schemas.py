from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cmaxsim.core.errors import DataError, OutOfRangeError


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def check(self) -> "CameraIntrinsics":
        # Enforced where calibration enters the system (loaders, config); the
        # warp itself accepts any intrinsics.
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DataError(
                f"principal point ({self.cx}, {self.cy}) outside sensor {self.width}x{self.height}"
            )
        return self


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: float
    p: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Columnar, immutable event storage in file/timestamp order."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise DataError("event columns have different lengths")
        object.__setattr__(self, "x", _frozen(np.asarray(self.x, dtype=np.int32)))
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=np.int32)))
        object.__setattr__(self, "t", _frozen(np.asarray(self.t, dtype=np.float64)))
        object.__setattr__(self, "p", _frozen(np.asarray(self.p, dtype=np.int8)))

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), width, height)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), float(self.t[i]), int(self.p[i]))

    def slice(self, start: int, stop: int) -> "EventStream":
        return EventStream(
            self.x[start:stop], self.y[start:stop], self.t[start:stop], self.p[start:stop],
            self.width, self.height,
        )

    def check_bounds(self) -> None:
        bad = (self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise OutOfRangeError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside sensor {self.width}x{self.height}"
            )

    def same_as(self, other: "EventStream") -> bool:
        return (
            self.width == other.width and self.height == other.height
            and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t) and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True, eq=False)
class EventWindow:
    events: EventStream
    t_ref: float
    index: int = 0
    start: int = 0

    @property
    def n(self) -> int:
        return len(self.events)

    @property
    def t_start(self) -> float:
        return float(self.events.t[0]) if self.n else self.t_ref

    @property
    def t_end(self) -> float:
        return float(self.events.t[-1]) if self.n else self.t_ref

    @property
    def t_mid(self) -> float:
        return 0.5 * (self.t_start + self.t_end)


@dataclass(frozen=True, eq=False)
class ImuTrack:
    t: np.ndarray
    omega: np.ndarray  # shape (K, 3)

    def __len__(self) -> int:
        return len(self.t)

    def covers(self, t: float) -> bool:
        return len(self.t) > 0 and float(self.t[0]) <= t <= float(self.t[-1])

    def lookup(self, t: float) -> np.ndarray:
        # np.interp clamps to the end samples outside the sampled range.
        if len(self.t) == 0:
            raise DataError("IMU track is empty")
        return np.array([np.interp(t, self.t, self.omega[:, j]) for j in range(3)])


@dataclass(frozen=True)
class MotionParams:
    wx: float = 0.0
    wy: float = 0.0
    wz: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.wx, self.wy, self.wz)):
            raise DataError(f"non-finite angular velocity ({self.wx}, {self.wy}, {self.wz})")

    @classmethod
    def from_array(cls, arr) -> "MotionParams":
        a = np.asarray(arr, dtype=np.float64).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.wx, self.wy, self.wz], dtype=np.float64)


SUPPORTED_SCALES = (0.25, 0.5, 1.0)


@dataclass(frozen=True)
class StageScale:
    s: float
    full_height: int
    full_width: int
    hs: int = field(init=False)
    ws: int = field(init=False)

    def __post_init__(self) -> None:
        if not (0 < self.s <= 1):
            raise DataError(f"stage scale must lie in (0, 1], got {self.s}")
        object.__setattr__(self, "hs", int(math.ceil(self.s * self.full_height)))
        object.__setattr__(self, "ws", int(math.ceil(self.s * self.full_width)))

    @classmethod
    def for_sensor(cls, s: float, intr: CameraIntrinsics) -> "StageScale":
        return cls(s, intr.height, intr.width)

    @property
    def pixels(self) -> int:
        return self.hs * self.ws

    @property
    def label(self) -> str:
        return {0.25: "1/4", 0.5: "1/2", 1.0: "1"}.get(self.s, f"{self.s:g}")


# Memory groups of the engine, in report order.
MEMORY_GROUPS = ("iwe", "raw", "sort", "line")
MEMORY_GROUP_LABELS = {
    "iwe": "IWE/dIWE",
    "raw": "Raw events",
    "sort": "Sorting buffers",
    "line": "Line buffers",
}


@dataclass
class AccessCounter:
    """Read/write counts per memory group."""

    reads: dict = field(default_factory=lambda: {g: 0 for g in MEMORY_GROUPS})
    writes: dict = field(default_factory=lambda: {g: 0 for g in MEMORY_GROUPS})

    def read(self, group: str, n: int = 1) -> None:
        self.reads[group] += int(n)

    def write(self, group: str, n: int = 1) -> None:
        self.writes[group] += int(n)

    def merge(self, other: "AccessCounter") -> "AccessCounter":
        for g in MEMORY_GROUPS:
            self.reads[g] += other.reads[g]
            self.writes[g] += other.writes[g]
        return self

    def total(self) -> int:
        return sum(self.reads.values()) + sum(self.writes.values())

    def group_total(self, group: str) -> int:
        return self.reads[group] + self.writes[group]
