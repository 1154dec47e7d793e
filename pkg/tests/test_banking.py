import numpy as np
import pytest

from cmaxsim.core.errors import EngineError
from cmaxsim.models.schemas import StageScale
from cmaxsim.services.accumulation_service import TAP_DX, TAP_DY
from cmaxsim.services.banking_service import (
    N_LANES,
    BankedMemory,
    FedStream,
    LaneUpdateBatch,
    PendingRegisterFile,
    address_of,
    bank_map,
    bank_of,
    direct_updates,
    fifo_occupancy_max,
    half_up,
    ledger_check,
    local_accumulate,
    pending_commit,
)


def _fed(x0, y0, p_ref, p_act, last, valid=None, seed=0):
    n = len(x0)
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0)
    y0 = np.asarray(y0)
    return FedStream(
        p_ref=np.asarray(p_ref),
        p_act=np.asarray(p_act),
        last_in_pg=np.asarray(last, dtype=bool),
        valid=np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool),
        px=x0[:, None] + TAP_DX[None, :],
        py=y0[:, None] + TAP_DY[None, :],
        deltas=rng.normal(size=(n, 4, 4)),
    )


def _batch(lanes_addr):
    n = len(lanes_addr)
    lane = np.array([la for la, _ in lanes_addr], dtype=np.int64)
    return LaneUpdateBatch(lane // 4, lane % 4, np.array([a for _, a in lanes_addr], dtype=np.int64),
                           np.ones(n), np.arange(n, dtype=np.int64))


def test_bank_map_examples():
    m = bank_map(5, 3, 8)
    assert m.bank == 3
    assert m.a00 == 6
    assert sorted(m.banks) == [0, 1, 2, 3]

    origin = bank_map(0, 0, 8)
    assert origin.bank == 0 and origin.a00 == 0
    assert origin.banks == (0, 1, 2, 3)
    assert origin.addresses == (0, 0, 0, 0)


def test_stencil_taps_never_share_a_bank():
    for ws in range(2, 65):
        for hs in range(2, 65):
            ys, xs = np.mgrid[0:hs - 1, 0:ws - 1]
            banks = np.stack([bank_of(xs + dx, ys + dy) for dx, dy in zip(TAP_DX, TAP_DY)])
            assert np.all(np.sort(banks, axis=0) == np.arange(4)[:, None, None]), f"{ws}x{hs}"
            addrs = np.stack([address_of(xs + dx, ys + dy, ws) for dx, dy in zip(TAP_DX, TAP_DY)])
            assert addrs.min() >= 0 and addrs.max() < half_up(ws) * half_up(hs), f"{ws}x{hs}"


def test_bank_addressing_is_a_bijection():
    ws, hs = 9, 7
    ys, xs = np.mgrid[0:hs, 0:ws]
    pairs = set(zip(bank_of(xs, ys).ravel().tolist(), address_of(xs, ys, ws).ravel().tolist()))
    assert len(pairs) == ws * hs
    assert max(a for _, a in pairs) < half_up(ws) * half_up(hs)


def test_pending_merges_repeated_addresses(intr):
    memory = BankedMemory(StageScale.for_sensor(1.0, intr))
    res = pending_commit(_batch([(5, 10), (5, 10), (5, 10)]), memory)
    assert (res.hits, res.commits) == (2, 1)
    assert memory.cells[1, 1, 10] == 3.0
    assert memory.total_reads == 1 and memory.total_writes == 1

    memory = BankedMemory(StageScale.for_sensor(1.0, intr))
    res = pending_commit(_batch([(5, 10), (5, 11), (5, 10), (5, 11)]), memory)
    assert (res.hits, res.commits) == (0, 4)

    memory = BankedMemory(StageScale.for_sensor(1.0, intr))
    res = pending_commit(_batch([(5, 10), (5, 10), (5, 10)]), memory, merge=False)
    assert (res.hits, res.commits) == (0, 3)


def test_register_file_matches_vectorized_pending(intr):
    rng = np.random.default_rng(3)
    n = 400
    lane = rng.integers(0, N_LANES, n)
    addr = rng.integers(0, 4, n)
    delta = rng.normal(size=n)
    batch = LaneUpdateBatch(lane // 4, lane % 4, addr, delta, np.arange(n))

    scale = StageScale.for_sensor(1.0, intr)
    fast = BankedMemory(scale)
    res = pending_commit(batch, fast)

    slow = BankedMemory(scale)
    regs = PendingRegisterFile(memory=slow)
    for i in range(n):
        regs.push(int(lane[i]), int(addr[i]), float(delta[i]))
    regs.flush()

    assert (regs.hits, regs.commits) == (res.hits, res.commits)
    np.testing.assert_allclose(slow.cells, fast.cells, atol=1e-12)
    assert slow.total_writes == fast.total_writes


def test_inlier_run_emits_one_block(intr):
    memory = BankedMemory(StageScale.for_sensor(1.0, intr))
    g = 3 * 64 + 4
    fed = _fed([4, 4, 4], [3, 3, 3], [g] * 3, [g] * 3, [False, False, True])
    acc = local_accumulate(fed, memory)
    assert acc.inlier_events == 3 and acc.inlier_emissions == 1
    assert len(acc.updates) == 16
    assert acc.absorptions == 2 * N_LANES
    assert acc.flush_warnings == 0
    # the block carries the summed deltas of its run
    np.testing.assert_allclose(np.sort(acc.updates.delta), np.sort(fed.deltas.sum(axis=0).ravel()))


def test_outlier_emits_its_own_tuples(intr):
    memory = BankedMemory(StageScale.for_sensor(1.0, intr))
    g = 3 * 64 + 4
    fed = _fed([4, 9], [3, 3], [g, g], [g, 3 * 64 + 9], [False, True])
    acc = local_accumulate(fed, memory)
    assert acc.inlier_emissions == 1 and acc.outlier_events == 1
    assert len(acc.updates) == 32
    # an outlier leaves before a block closed at the same position
    keys = np.unique(acc.updates.key)
    assert keys.tolist() == [2, 3]


def test_open_run_is_flushed_with_a_warning(intr):
    memory = BankedMemory(StageScale.for_sensor(1.0, intr))
    g = 3 * 64 + 4
    acc = local_accumulate(_fed([4, 4], [3, 3], [g, g], [g, g], [False, False]), memory)
    assert acc.flush_warnings == 1
    assert acc.inlier_emissions == 1


def test_local_and_direct_paths_write_the_same_memory(intr):
    scale = StageScale.for_sensor(1.0, intr)
    rng = np.random.default_rng(11)
    # runs of one pixel group, some events drifting to a neighbour
    x0 = np.repeat(rng.integers(0, 60, 30), 4)
    y0 = np.repeat(rng.integers(0, 45, 30), 4)
    p_ref = y0 * scale.ws + x0
    drift = rng.random(len(x0)) < 0.3
    x0 = np.where(drift, x0 + 1, x0)
    p_act = y0 * scale.ws + x0
    last = np.zeros(len(x0), dtype=bool)
    last[3::4] = True
    valid = rng.random(len(x0)) < 0.9
    fed = _fed(x0, y0, p_ref, p_act, last, valid=valid, seed=5)

    local_mem = BankedMemory(scale)
    acc = local_accumulate(fed, local_mem)
    pend = pending_commit(acc.updates, local_mem)

    direct_mem = BankedMemory(scale)
    pending_commit(direct_updates(fed, direct_mem), direct_mem, merge=False)

    np.testing.assert_allclose(local_mem.readback(), direct_mem.readback(), atol=1e-12)
    assert local_mem.total_writes <= direct_mem.total_writes

    generated = np.full(N_LANES, int(valid.sum()))
    absorbed = np.full(N_LANES, acc.inlier_events - acc.inlier_emissions)
    ledger = ledger_check(generated, absorbed, pend)
    assert ledger["generated"] == ledger["absorbed"] + ledger["hits"] + ledger["commits"]

    with pytest.raises(EngineError):
        ledger_check(generated + 1, absorbed, pend)


def test_memory_guards_and_clear(intr):
    scale = StageScale.for_sensor(0.25, intr)
    memory = BankedMemory(scale)
    with pytest.raises(EngineError):
        memory.commit(np.array([0]), np.array([0]), np.array([memory.bank_size]), np.array([1.0]))
    memory.commit(np.array([0, 2]), np.array([1, 3]), np.array([0, 5]), np.array([1.0, 2.0]))
    assert memory.clear() == 2
    assert memory.total_writes == 4
    assert not memory.cells.any()


def test_flat_memory_addresses_row_major(intr):
    scale = StageScale.for_sensor(0.25, intr)
    flat = BankedMemory(scale, banked=False)
    bank, addr = flat.locate(np.array([3]), np.array([2]))
    assert bank.tolist() == [0] and addr.tolist() == [2 * scale.ws + 3]
    assert flat.bank_size == scale.pixels


def test_fifo_occupancy():
    assert fifo_occupancy_max(np.array([], dtype=np.int64)) == 0
    assert fifo_occupancy_max(np.array([1, 1, 1])) == 0
    assert fifo_occupancy_max(np.array([3, 0, 0, 0])) == 2
    assert fifo_occupancy_max(np.array([0, 0, 2, 2, 0])) == 2
