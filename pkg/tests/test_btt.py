import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transitlab.btt import (
    INFO_SIZE,
    BttDevice,
    CorruptMetadata,
    FlogEntry,
    InvalidGeometry,
    lanes_for_cores,
    newest,
)
from transitlab.harness.crash import btt_crash_enumeration
from transitlab.pmem import PmemImage
from transitlab.sim import PowerFailure, explore
from transitlab.workload import decode_payload, make_payload

BS = 64


def fresh(total=1024, lanes=4, bs=BS):
    return BttDevice.format(None, total, lanes, block_size=bs)


def test_format_geometry():
    dev = fresh(1024, 4)
    arena = dev.arenas[0]
    assert dev.nlba == 1020
    assert arena.free == [1020, 1021, 1022, 1023]
    assert all(arena.map_get(i) == i for i in range(0, 1020, 97))
    assert dev.read_sync(17) == bytes(BS)
    assert dev.check_permutation() == []


def test_lane_count_clamped_to_cores():
    assert lanes_for_cores(36) == 36
    assert lanes_for_cores(1000) == 256
    dev = BttDevice.format(None, 1024, 300, cores=36, block_size=BS)
    assert dev.lanes == 36


def test_format_rejects_too_few_blocks():
    with pytest.raises(InvalidGeometry):
        BttDevice.format(None, 4, 4, block_size=BS)


def test_write_swaps_with_lane_free_block():
    dev = fresh(1024, 4)
    arena = dev.arenas[0]
    dev.write_sync(5, make_payload(5, 1, BS), lane=0)
    assert arena.map_get(5) == 1020
    assert arena.free[0] == 5
    ent = newest(*arena.read_flog(0))
    assert (ent.lba, ent.old_pba, ent.new_pba) == (5, 5, 1020)
    assert dev.read_sync(5) == make_payload(5, 1, BS)


def test_repeated_writes_alternate_two_blocks():
    dev = fresh(1024, 4)
    arena = dev.arenas[0]
    seen = []
    for v in range(1, 5):
        dev.write_sync(5, make_payload(5, v, BS), lane=0)
        seen.append(arena.map_get(5))
    assert seen == [1020, 5, 1020, 5]


def test_distinct_lanes_never_share_a_block():
    def program(sched):
        dev = fresh(6, 2)
        dev.pmem.journal = []

        def writer(lane, lba):
            for v in (1, 2):
                yield from dev.write(lba, make_payload(lba, v, BS), lane)

        sched.spawn(writer(0, 0))
        sched.spawn(writer(1, 1))
        sched.run()
        data_off = dev.arenas[0].layout.data_off
        pbas = [(off - data_off) // BS for off, data in dev.pmem.journal if len(data) == BS and off >= data_off]
        return pbas, dev.check_permutation()

    runs = 0
    for _, (pbas, problems) in explore(program):
        runs += 1
        assert len(pbas) == 4 and len(set(pbas)) == 4
        assert problems == []
    assert runs > 1


def test_concurrent_read_sees_whole_old_or_new_block():
    old, new = make_payload(2, 1, BS), make_payload(2, 2, BS)

    def program(sched):
        dev = fresh(8, 2)
        dev.write_sync(2, old, lane=0)
        out = {}

        def reader():
            out["data"] = yield from dev.read(2, 1)

        sched.spawn(dev.write(2, new, 0))
        sched.spawn(reader())
        sched.run()
        return out["data"]

    results = {data for _, data in explore(program)}
    assert results <= {old, new}
    assert results == {old, new}


def _crash_btt_write(step, tear=0):
    dev = fresh(8, 2)
    dev.write_sync(3, make_payload(3, 1, BS))
    pm = dev.pmem
    pm.arm_crash(step, tear)
    with pytest.raises(PowerFailure):
        dev.write_sync(3, make_payload(3, 2, BS))
    image = PmemImage(pm.capacity_bytes, BS)
    image.persisted[:] = pm.persisted
    return BttDevice.recover(image)


def test_crash_during_data_write_keeps_old_version():
    dev = _crash_btt_write(1, tear=BS // 2)
    assert decode_payload(dev.read_sync(3)) == (3, 1)
    assert dev.redone == []


def test_torn_flog_entry_is_ignored():
    # the commit word is the last 8 bytes of the entry; 24 bytes land without it
    dev = _crash_btt_write(2, tear=24)
    assert decode_payload(dev.read_sync(3)) == (3, 1)
    assert dev.check_permutation() == []


def test_recovery_redoes_lost_map_update():
    dev = _crash_btt_write(3)
    assert decode_payload(dev.read_sync(3)) == (3, 2)
    assert dev.redone == [3]


def test_recovery_is_idempotent():
    dev = _crash_btt_write(3)
    once = dev.pmem.snapshot()
    BttDevice.recover(dev.pmem)
    assert dev.pmem.snapshot() == once


def test_recovered_device_accepts_further_writes():
    dev = _crash_btt_write(3)
    for v in range(3, 7):
        dev.write_sync(3, make_payload(3, v, BS), lane=v % 2)
        dev.write_sync(4, make_payload(4, v, BS), lane=(v + 1) % 2)
    assert decode_payload(dev.read_sync(3)) == (3, 6)
    assert dev.check_permutation() == []


def test_info_block_repaired_from_tail():
    dev = fresh(64, 2)
    pm = dev.pmem
    pm.persisted[0:INFO_SIZE] = b"\xff" * INFO_SIZE
    again = BttDevice.recover(pm)
    assert again.check_info() == []
    assert again.nlba == 62


def test_both_info_blocks_bad_is_corrupt_metadata():
    dev = fresh(64, 2)
    pm = dev.pmem
    tail = dev.layouts[0].tail_off
    pm.persisted[0:INFO_SIZE] = bytes(INFO_SIZE)
    pm.persisted[tail:tail + INFO_SIZE] = bytes(INFO_SIZE)
    with pytest.raises(CorruptMetadata):
        BttDevice.recover(pm)


def test_flog_sequence_ordering():
    a = FlogEntry(1, 2, 3, 1)
    b = FlogEntry(1, 3, 2, 2)
    c = FlogEntry(1, 2, 3, 3)
    assert newest(a, b) is b
    assert newest(b, c) is c
    # 3 -> 1 wraps around
    assert newest(c, FlogEntry(1, 3, 2, 1)).seq == 1
    assert newest(None, a) is a
    assert FlogEntry.unpack(a.pack()) == a
    assert FlogEntry.unpack(a.pack()[:24] + bytes(8)) is None


def test_multi_arena_device_routes_lbas():
    dev = BttDevice.format(None, 200, 2, block_size=BS, arena_max_bytes=8 * 1024)
    assert len(dev.arenas) > 1
    for lba in range(0, dev.nlba, 7):
        dev.write_sync(lba, make_payload(lba, 1, BS), lane=lba % 2)
    again = BttDevice.recover(dev.pmem)
    for lba in range(0, dev.nlba, 7):
        assert decode_payload(again.read_sync(lba)) == (lba, 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 2)), min_size=1, max_size=40))
def test_map_and_free_stay_a_permutation(ops):
    dev = fresh(13, 3)
    last = {}
    for i, (lba, lane) in enumerate(ops, 1):
        dev.write_sync(lba, make_payload(lba, i, BS), lane)
        last[lba] = i
        assert dev.check_permutation() == []
    again = BttDevice.recover(dev.pmem)
    for lba, v in last.items():
        assert decode_payload(again.read_sync(lba)) == (lba, v)


def test_one_lane_three_writes_every_crash_point():
    v = btt_crash_enumeration(((0, 0, 0),), nlba=2)
    assert v.ok, v.violations[:3]
    assert v.crash_points > 9


def test_enumeration_catches_map_before_data(monkeypatch):
    from transitlab.btt import MAP_ENTRY, Arena

    def hasty_write(self, lba, data, lane, on_commit=None):
        # publishes the mapping before the data block is written, no flog
        yield self.lane_locks[lane]
        try:
            free = self.free[lane]
            old = self.map_get(lba)
            self.pmem.write(self.layout.map_off + lba * MAP_ENTRY, self._map_bytes(free))
            yield 1
            self.pmem.write(self.data_off(free), data)
            self.free[lane] = old
        finally:
            self.lane_locks[lane].release()

    monkeypatch.setattr(Arena, "write", hasty_write)
    v = btt_crash_enumeration(((0, 1),), nlba=2)
    assert not v.ok
