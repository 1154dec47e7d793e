"""Parity-banked IWE memory, local accumulation and pending merge.

Every channel (IWE, dIWE_x, dIWE_y, dIWE_z) is split into four banks by the
parity pair of the pixel coordinates, ``bank = (y & 1) << 1 | (x & 1)``, with
bank-local address ``(y // 2) * ceil(Ws / 2) + x // 2``. A write lane is one
(channel, bank) pair, ``lane = channel * 4 + bank``, so 16 lanes in total.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from cmaxsim.core.errors import EngineError
from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import AccessCounter, StageScale
from cmaxsim.services.accumulation_service import N_CHANNELS, N_TAPS, TAP_DX, TAP_DY

logger = get_logger("banking")

N_BANKS = 4
N_LANES = N_CHANNELS * N_BANKS


def half_up(n: int) -> int:
    return (n + 1) // 2


def bank_of(x, y):
    return ((np.asarray(y) & 1) << 1) | (np.asarray(x) & 1)


def address_of(x, y, ws: int):
    return (np.asarray(y) // 2) * half_up(ws) + np.asarray(x) // 2


@dataclass(frozen=True)
class BankMap:
    bank: int
    a00: int
    banks: Tuple[int, int, int, int]
    addresses: Tuple[int, int, int, int]


def bank_map(x0: int, y0: int, ws: int) -> BankMap:
    """Banks and bank-local addresses of the four taps of the stencil at (x0, y0).

    Tap order follows the voting order (x0, y0), (x0+1, y0), (x0, y0+1),
    (x0+1, y0+1). The horizontal increment over ``a00`` is 1 when x0 is odd,
    the vertical one is ``ceil(Ws/2)`` when y0 is odd.
    """
    xs = x0 + TAP_DX
    ys = y0 + TAP_DY
    banks = bank_of(xs, ys)
    addrs = address_of(xs, ys, ws)
    return BankMap(int(banks[0]), int(addrs[0]),
                   tuple(int(b) for b in banks), tuple(int(a) for a in addrs))


class BankedMemory:
    """Four channels of scalar cells with per-(channel, bank) access counters.

    ``banked=False`` models the single-bank baseline memory: one flat bank per
    channel addressed by ``y * Ws + x``.
    """

    def __init__(self, scale: StageScale, banked: bool = True) -> None:
        self.scale = scale
        self.banked = banked
        if banked:
            self.n_banks = N_BANKS
            self.bank_size = half_up(scale.hs) * half_up(scale.ws)
        else:
            self.n_banks = 1
            self.bank_size = scale.pixels
        self.cells = np.zeros((N_CHANNELS, self.n_banks, self.bank_size), dtype=np.float64)
        self.touched = np.zeros(self.cells.shape, dtype=bool)
        self.reads = np.zeros((N_CHANNELS, self.n_banks), dtype=np.int64)
        self.writes = np.zeros((N_CHANNELS, self.n_banks), dtype=np.int64)

        ys, xs = np.mgrid[0:scale.hs, 0:scale.ws]
        if banked:
            self._pix_bank = bank_of(xs, ys).ravel()
            self._pix_addr = address_of(xs, ys, scale.ws).ravel()
        else:
            self._pix_bank = np.zeros(scale.pixels, dtype=np.int64)
            self._pix_addr = (ys * scale.ws + xs).ravel()

    def locate(self, px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.banked:
            return bank_of(px, py), address_of(px, py, self.scale.ws)
        return np.zeros_like(np.asarray(px)), np.asarray(py) * self.scale.ws + np.asarray(px)

    def commit(self, channel: np.ndarray, bank: np.ndarray, address: np.ndarray, delta: np.ndarray) -> None:
        """Read-modify-write each (channel, bank, address) += delta, in the given order."""
        if np.any(address >= self.bank_size) or np.any(address < 0):
            raise EngineError("bank-local address out of range")
        flat = (channel * self.n_banks + bank) * self.bank_size + address
        np.add.at(self.cells.reshape(-1), flat, delta)
        self.touched.reshape(-1)[flat] = True
        lanes = channel * self.n_banks + bank
        counts = np.bincount(lanes, minlength=N_CHANNELS * self.n_banks).reshape(N_CHANNELS, self.n_banks)
        self.reads += counts
        self.writes += counts

    def readback(self) -> np.ndarray:
        """Reassemble the dense (4, Hs, Ws) block; one read per pixel per channel."""
        out = self.cells[:, self._pix_bank, self._pix_addr].reshape(N_CHANNELS, self.scale.hs, self.scale.ws)
        for c in range(N_CHANNELS):
            self.reads[c] += np.bincount(self._pix_bank, minlength=self.n_banks)
        return out

    def clear(self) -> int:
        """Zero every touched cell; each one costs a write. Returns the count."""
        n = int(self.touched.sum())
        self.writes += self.touched.sum(axis=2)
        self.cells[self.touched] = 0.0
        self.touched[:] = False
        return n

    @property
    def total_reads(self) -> int:
        return int(self.reads.sum())

    @property
    def total_writes(self) -> int:
        return int(self.writes.sum())


@dataclass(frozen=True, eq=False)
class FedStream:
    """Events as the feeder streams them in one iteration, all in stream order.

    ``valid`` marks events whose stencil fits at the current omega; only those
    carry meaningful ``px``/``py``/``deltas``. ``last_in_pg`` closes a group run
    regardless of validity.
    """

    p_ref: np.ndarray
    p_act: np.ndarray
    last_in_pg: np.ndarray
    valid: np.ndarray
    px: np.ndarray  # (n, 4)
    py: np.ndarray  # (n, 4)
    deltas: np.ndarray  # (n, 4 taps, 4 channels)

    def __len__(self) -> int:
        return len(self.p_ref)


@dataclass(frozen=True, eq=False)
class LaneUpdateBatch:
    """Lane tuples (channel, bank, address, delta) ordered by emission key."""

    channel: np.ndarray
    bank: np.ndarray
    address: np.ndarray
    delta: np.ndarray
    key: np.ndarray

    def __len__(self) -> int:
        return len(self.delta)

    @property
    def lane(self) -> np.ndarray:
        return self.channel * N_BANKS + self.bank


@dataclass
class LocalAccumulation:
    updates: LaneUpdateBatch
    inlier_events: int
    outlier_events: int
    inlier_emissions: int
    flush_warnings: int
    fifo_max: int

    @property
    def absorptions(self) -> int:
        return N_LANES * (self.inlier_events - self.inlier_emissions)


def _expand(px: np.ndarray, py: np.ndarray, deltas: np.ndarray, key: np.ndarray,
            memory: BankedMemory) -> LaneUpdateBatch:
    """Fan (n, 4 taps) stencils with (n, 4, 4) deltas out into n*16 lane tuples."""
    n = len(key)
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return LaneUpdateBatch(z, z, z, np.zeros(0), z)
    bank, addr = memory.locate(px, py)
    channel = np.broadcast_to(np.arange(N_CHANNELS)[None, None, :], (n, N_TAPS, N_CHANNELS))
    bank3 = np.broadcast_to(bank[:, :, None], (n, N_TAPS, N_CHANNELS))
    addr3 = np.broadcast_to(addr[:, :, None], (n, N_TAPS, N_CHANNELS))
    key3 = np.broadcast_to(key[:, None, None], (n, N_TAPS, N_CHANNELS))
    return LaneUpdateBatch(channel.ravel().astype(np.int64), bank3.ravel().astype(np.int64),
                           addr3.ravel().astype(np.int64), deltas.ravel(), key3.ravel().astype(np.int64))


def direct_updates(fed: FedStream, memory: BankedMemory) -> LaneUpdateBatch:
    """Every tap of every valid event as its own tuple, in stream order."""
    idx = np.flatnonzero(fed.valid)
    return _expand(fed.px[idx], fed.py[idx], fed.deltas[idx], idx, memory)


def local_accumulate(fed: FedStream, memory: BankedMemory) -> LocalAccumulation:
    """Merge inlier events of each group run into one 16-tuple block.

    Inliers (``p_act == p_ref``) sum into 16 local registers that are emitted
    once when the run's ``last_in_pg`` event arrives. Outliers emit their 16
    tuples immediately. Emission keys are ``2*pos`` for outliers and
    ``2*pos + 1`` for blocks, ``pos`` being the stream position. A run still
    open at the end of the stream is flushed and counted as a warning.
    """
    n = len(fed)
    inlier = fed.valid & (fed.p_act == fed.p_ref)
    outlier = fed.valid & ~inlier

    # run r holds the events after the r-th last_in_pg flag
    flags = fed.last_in_pg.astype(np.int64)
    run_id = np.concatenate([[0], np.cumsum(flags)[:-1]]) if n else np.zeros(0, np.int64)
    n_runs = int(run_id[-1]) + 1 if n else 0
    flush_warnings = 0
    if n and not fed.last_in_pg[-1]:
        flush_warnings = 1
        logger.warning("feeder stream ended without last_in_pg; flushing the open group")

    close_pos = np.full(n_runs, n - 1, dtype=np.int64)
    flagged = np.flatnonzero(fed.last_in_pg)
    close_pos[run_id[flagged]] = flagged

    in_idx = np.flatnonzero(inlier)
    in_runs = run_id[in_idx]
    emitting = np.unique(in_runs)
    block = np.zeros((n_runs, N_TAPS, N_CHANNELS), dtype=np.float64)
    np.add.at(block, in_runs, fed.deltas[in_idx])
    # first inlier of each run gives the shared stencil coordinates
    first = in_idx[np.searchsorted(in_runs, emitting)] if len(in_idx) else in_idx

    out_idx = np.flatnonzero(outlier)
    blocks = _expand(fed.px[first], fed.py[first], block[emitting], 2 * close_pos[emitting] + 1, memory)
    singles = _expand(fed.px[out_idx], fed.py[out_idx], fed.deltas[out_idx], 2 * out_idx, memory)

    merged = LaneUpdateBatch(*(np.concatenate([getattr(singles, f), getattr(blocks, f)])
                               for f in ("channel", "bank", "address", "delta", "key")))

    emissions_per_pos = np.zeros(n, dtype=np.int64)
    np.add.at(emissions_per_pos, out_idx, 1)
    np.add.at(emissions_per_pos, close_pos[emitting], 1)

    return LocalAccumulation(
        updates=merged,
        inlier_events=len(in_idx),
        outlier_events=len(out_idx),
        inlier_emissions=len(emitting),
        flush_warnings=flush_warnings,
        fifo_max=fifo_occupancy_max(emissions_per_pos),
    )


def fifo_occupancy_max(emissions_per_cycle: np.ndarray) -> int:
    """Peak queue depth when one emission drains per cycle (unbounded queue)."""
    if len(emissions_per_cycle) == 0:
        return 0
    s = np.cumsum(emissions_per_cycle - 1)
    q = s - np.minimum.accumulate(np.minimum(s, 0))
    return int(max(q.max(), 0))


@dataclass
class PendingResult:
    items: int
    hits: int
    commits: int
    hits_per_lane: np.ndarray
    commits_per_lane: np.ndarray


def pending_commit(updates: LaneUpdateBatch, memory: BankedMemory, merge: bool = True) -> PendingResult:
    """Drain lane tuples through one pending register per lane into memory.

    Within a lane, consecutive tuples to the same address merge in the
    register (a hit); an address change commits the register with one
    read-modify-write. The end-of-iteration flush commits what is left.
    With ``merge=False`` every tuple is committed on its own.
    """
    n = len(updates)
    lanes = updates.lane
    if n == 0:
        zero = np.zeros(N_LANES, dtype=np.int64)
        return PendingResult(0, 0, 0, zero, zero.copy())

    order = np.lexsort((updates.key, lanes))
    lane_s = lanes[order]
    addr_s = updates.address[order]
    delta_s = updates.delta[order]

    if merge:
        start = np.ones(n, dtype=bool)
        start[1:] = (lane_s[1:] != lane_s[:-1]) | (addr_s[1:] != addr_s[:-1])
    else:
        start = np.ones(n, dtype=bool)
    heads = np.flatnonzero(start)
    sums = np.add.reduceat(delta_s, heads)
    commit_lane = lane_s[heads]
    memory.commit(commit_lane // N_BANKS, commit_lane % N_BANKS, addr_s[heads], sums)

    items_per_lane = np.bincount(lane_s, minlength=N_LANES)
    commits_per_lane = np.bincount(commit_lane, minlength=N_LANES)
    return PendingResult(n, n - len(heads), len(heads),
                         items_per_lane - commits_per_lane, commits_per_lane)


@dataclass
class PendingRegister:
    valid: bool = False
    address: int = -1
    value: float = 0.0
    hits: int = 0
    commits: int = 0


@dataclass
class PendingRegisterFile:
    """Tuple-at-a-time model of the per-lane pending registers."""

    memory: Optional[BankedMemory] = None
    lanes: List[PendingRegister] = field(default_factory=lambda: [PendingRegister() for _ in range(N_LANES)])
    committed: List[Tuple[int, int, float]] = field(default_factory=list)

    def _commit(self, lane: int) -> None:
        reg = self.lanes[lane]
        self.committed.append((lane, reg.address, reg.value))
        if self.memory is not None:
            self.memory.commit(np.array([lane // N_BANKS]), np.array([lane % N_BANKS]),
                               np.array([reg.address]), np.array([reg.value]))
        reg.commits += 1
        reg.valid = False
        reg.value = 0.0

    def push(self, lane: int, address: int, delta: float) -> None:
        reg = self.lanes[lane]
        if reg.valid and reg.address == address:
            reg.value += delta
            reg.hits += 1
            return
        if reg.valid:
            self._commit(lane)
        reg.valid = True
        reg.address = address
        reg.value = delta

    def flush(self) -> None:
        for lane, reg in enumerate(self.lanes):
            if reg.valid:
                self._commit(lane)

    @property
    def hits(self) -> int:
        return sum(r.hits for r in self.lanes)

    @property
    def commits(self) -> int:
        return sum(r.commits for r in self.lanes)


def ledger_check(generated_per_lane: np.ndarray, absorbed_per_lane: np.ndarray,
                 pending: PendingResult) -> Dict[str, int]:
    """Generated = absorbed + pending hits + commits on every lane, else EngineError."""
    rhs = absorbed_per_lane + pending.hits_per_lane + pending.commits_per_lane
    if not np.array_equal(generated_per_lane, rhs):
        bad = int(np.flatnonzero(generated_per_lane != rhs)[0])
        raise EngineError(
            f"access ledger broken on lane {bad}: generated {int(generated_per_lane[bad])} != "
            f"absorbed {int(absorbed_per_lane[bad])} + hits {int(pending.hits_per_lane[bad])} "
            f"+ commits {int(pending.commits_per_lane[bad])}"
        )
    return {
        "generated": int(generated_per_lane.sum()),
        "absorbed": int(absorbed_per_lane.sum()),
        "hits": pending.hits,
        "commits": pending.commits,
    }
