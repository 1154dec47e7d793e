"""Pixel-grouped sorting with stage-aware subsampling.

Runs once at stage entry with the stage-entry estimate and produces the
``active``/``offset``/``perm`` tables reused by every iteration of the stage.
The three states are evaluated with numpy; the access counts recorded are the
ones the sequential three-state flow performs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import AccessCounter, CameraIntrinsics, EventWindow, MotionParams, StageScale
from cmaxsim.services.warp_service import INVALID, warp_batch

logger = get_logger("sorting")


def stage_policy(cnt: int, s: float) -> tuple[int, int, bool]:
    """Retained budget ``k``, subsample stride and activity flag of one group."""
    if cnt <= 0:
        return 0, 1, False
    k = max(1, math.ceil(s * cnt))
    stride = max(1, cnt // k)
    return k, stride, True


def stage_policy_arrays(cnt: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    act = cnt > 0
    k = np.where(act, np.maximum(1, np.ceil(s * cnt)).astype(np.int64), 0)
    stride = np.maximum(1, cnt // np.maximum(k, 1)).astype(np.int64)
    return k, stride, act


@dataclass(frozen=True, eq=False)
class SortTables:
    scale: StageScale
    omega_ref: MotionParams
    active: np.ndarray
    offset: np.ndarray  # length P + 1
    perm: np.ndarray
    stride: np.ndarray
    act: np.ndarray
    cnt: np.ndarray
    gid: np.ndarray  # p_act per input event at omega_ref
    n_events: int

    @property
    def retained(self) -> int:
        return int(self.offset[-1])

    @property
    def n_valid(self) -> int:
        return int(self.cnt.sum())

    def retained_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_events, dtype=bool)
        mask[self.perm] = True
        return mask

    def p_ref(self) -> np.ndarray:
        """Group id of every perm slot."""
        return np.repeat(np.arange(self.scale.pixels), np.diff(self.offset))


def pixel_group_sort(
    win: EventWindow,
    omega_ref: MotionParams,
    scale: StageScale,
    intr: CameraIntrinsics,
    counter: Optional[AccessCounter] = None,
    rho: Optional[float] = None,
) -> SortTables:
    """Build the stage tables. ``rho`` overrides the keep ratio (default ``scale.s``)."""
    rho = scale.s if rho is None else rho
    n = win.n
    npix = scale.pixels

    # State 1: count valid warped events per group
    gid = warp_batch(win.events, win.t_ref, omega_ref, scale, intr).p_act if n else np.zeros(0, np.int64)
    valid = gid != INVALID
    cnt = np.bincount(gid[valid], minlength=npix).astype(np.int64)

    # State 2: prefix scan with the stage policy
    k, stride, act = stage_policy_arrays(cnt, rho)
    offset = np.zeros(npix + 1, dtype=np.int64)
    np.cumsum(k, out=offset[1:])
    active = np.flatnonzero(act)

    # State 3: keep group-local ranks with rank % stride == 0 inside the budget
    idx = np.flatnonzero(valid)
    order = idx[np.argsort(gid[idx], kind="stable")]
    g_sorted = gid[order]
    first = np.searchsorted(g_sorted, g_sorted, side="left")
    rank = np.arange(len(order)) - first
    st = stride[g_sorted]
    keep = (rank % st == 0) & (rank // st < k[g_sorted])
    perm = order[keep].astype(np.int64)

    tables = SortTables(scale, omega_ref, active, offset, perm, stride, act, cnt, gid, n)
    if counter is not None:
        _count_sort_accesses(counter, tables, valid)
    logger.debug("stage %s sort: %d events, %d valid, %d active groups, %d retained",
                 scale.label, n, tables.n_valid, len(active), tables.retained)
    return tables


def _count_sort_accesses(counter: AccessCounter, t: SortTables, valid: np.ndarray) -> None:
    n = t.n_events
    npix = t.scale.pixels
    n_valid = int(valid.sum())
    valid_active = int(t.act[t.gid[valid]].sum()) if n_valid else 0
    retained = t.retained
    n_active = len(t.active)

    # State 1: cnt clear, raw read + gid write per event, cnt read-modify-write per valid event
    counter.read("raw", n)
    counter.write("sort", npix + n + n_valid)
    counter.read("sort", n_valid)

    # State 2: offset write, cnt read, stride and act writes per group; active write per active group
    counter.read("sort", npix)
    counter.write("sort", 3 * npix + n_active + 1)

    # ptr <- offset, rank <- 0
    counter.read("sort", npix)
    counter.write("sort", 2 * npix)

    # State 3: gid read per event; act read per valid event; rank, stride, ptr and
    # offset[p+1] reads plus rank write per event of an active group; perm and ptr
    # writes per retained event
    counter.read("sort", n + n_valid + 4 * valid_active)
    counter.write("sort", valid_active + 2 * retained)
