import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import BS, Bench, block
from transitlab.cache import VALID
from transitlab.pmem import LatencyConfig
from transitlab.policies import (
    FSYNC,
    NO_FLAGS,
    POLICY_NAMES,
    HotColdBloom,
    UnknownPolicy,
    metadata_overhead_bytes_per_slot,
)
from transitlab.policies.base import CATEGORIES, BioFlags
from transitlab.workload import decode_payload

LAT = LatencyConfig()


# -- caiti write path ------------------------------------------------------------
def test_caiti_first_write_costs_one_dram_copy():
    b = Bench("caiti", slots=4, workers=0)
    ctx, elapsed = b.write(7, 1)
    eng = b.pol.engine
    sh = eng.lookup(eng.find_set_by_hash(7), 7)
    assert sh.state == VALID and sh.linked
    assert eng.idle_notifies == 1
    assert b.dev.ledger.writes == 0
    assert elapsed == LAT.dram_write_ns_per_block + 2 * LAT.metadata_ns
    assert ctx.disposition == "cache_write_only"


def test_caiti_rewrite_updates_in_place():
    b = Bench("caiti", slots=4, workers=0)
    b.write(7, 1)
    free_before = len(b.pol.engine.free)
    b.write(7, 2)
    assert len(b.pol.engine.free) == free_before
    assert b.dev.ledger.writes == 0
    assert decode_payload(b.read(7)) == (7, 2)


def test_caiti_full_cache_bypasses_to_device():
    b = Bench("caiti", slots=2, workers=0)
    b.write(1, 1)
    b.write(2, 1)
    eng = b.pol.engine
    slots_before = {sh.slot_number: (sh.lba, sh.state) for sh in eng.headers}
    ctx, _ = b.write(3, 1)
    assert ctx.disposition == "conditional_bypass"
    assert b.dev.ledger.writes_critical == 1
    assert {sh.slot_number: (sh.lba, sh.state) for sh in eng.headers} == slots_before
    assert decode_payload(b.dev.peek_block(3)) == (3, 1)
    assert b.pol.counters["bypass"] == 1


def test_caiti_without_bypass_evicts_then_writes():
    b = Bench("caiti", slots=2, workers=0, bypass=False)
    b.write(1, 1)
    b.write(2, 1)
    ctx, _ = b.write(3, 1)
    assert ctx.disposition == "cache_eviction_and_write"
    assert b.dev.ledger.writes_critical == 1
    assert b.pol.engine.lookup(3 % 4, 3) is not None


def test_caiti_without_eager_eviction_never_notifies_workers():
    b = Bench("caiti", slots=8, workers=2, eager=False)
    for lba in range(5):
        b.write(lba, 1)
    b.settle()
    assert b.pol.engine.evictions == 0
    assert b.flush() == 5


def test_caiti_reads():
    b = Bench("caiti", slots=4, workers=0)
    b.dev.write_sync(9, block(9, 1))
    assert decode_payload(b.read(9)) == (9, 1)      # uncached
    b.write(9, 2)
    assert decode_payload(b.read(9)) == (9, 2)      # cached, newest
    assert b.read(30) == bytes(BS)


def test_caiti_read_during_fill_returns_previous_version():
    # the fill holds the slot Pending from t=metadata until t=metadata+dram
    filled_at = LAT.metadata_ns + LAT.dram_write_ns_per_block
    for delay in range(0, 1300, 100):
        b = Bench("caiti", slots=4, workers=0)
        b.dev.write_sync(5, block(5, 1))
        out = {}

        def reader():
            yield delay
            out["data"] = yield from b.pol.handle_read(5, NO_FLAGS, b.ctx())

        b.run(b.pol.handle_write(5, block(5, 2), NO_FLAGS, b.ctx()), reader())
        looked_at = delay + LAT.metadata_ns
        if looked_at < filled_at:
            assert decode_payload(out["data"]) == (5, 1)
        elif looked_at > filled_at:
            assert decode_payload(out["data"]) == (5, 2)


def test_caiti_flush_after_quiescence_is_tiny():
    b = Bench("caiti", slots=8, workers=2)
    for lba in range(30):
        b.write(lba, 1)
    b.settle()
    assert b.flush() == 0


def test_caiti_fua_write_is_durable_at_ack():
    b = Bench("caiti", slots=8, workers=0)
    b.write(4, 1, flags=FSYNC)
    assert decode_payload(b.dev.peek_block(4)) == (4, 1)


# -- staging baselines --------------------------------------------------------------
def test_lru_victim_is_least_recent():
    b = Bench("lru", slots=2)
    b.write(1, 1)   # a
    b.write(2, 1)   # b
    b.write(1, 2)   # a again
    b.write(3, 1)
    assert set(b.pol.entries) == {1, 3}
    assert decode_payload(b.dev.peek_block(2)) == (2, 1)


def test_lru_costs():
    b = Bench("lru", slots=1)
    _, miss_empty = b.write(1, 1)
    _, hit = b.write(1, 2)
    _, miss_full = b.write(2, 1)
    assert hit == LAT.metadata_ns + LAT.dram_write_ns_per_block
    assert miss_empty == hit
    assert miss_full == hit + b.dev.pmem.write_cost(BS) + 2 * LAT.pmem_small_write_ns


def test_pmbd_drains_everything_when_full():
    n = 6
    b = Bench("pmbd", slots=n)
    for lba in range(n):
        b.write(lba, 1)
    assert b.dev.ledger.writes == 0
    ctx, _ = b.write(40, 1)
    assert b.dev.ledger.writes_critical == n
    assert ctx.disposition == "cache_eviction_and_write"
    assert len(b.pol.entries) == 1


@pytest.mark.parametrize("n", [1, 7, 10, 16])
def test_pmbd70_trigger(n):
    b = Bench("pmbd70", slots=n)
    assert b.pol.trigger == math.ceil(0.7 * n)
    for lba in range(b.pol.trigger - 1):
        b.write(lba, 1)
        b.settle(1)
    assert b.pol.drains == 0
    b.write(b.pol.trigger - 1, 1)
    b.settle(1)
    assert b.pol.drains == 1


def test_pmbd70_never_exceeds_capacity():
    b = Bench("pmbd70", slots=5)
    peak = 0

    def writer():
        nonlocal peak
        for v in range(1, 40):
            yield from b.pol.handle_write(v % 13, block(v % 13, v), NO_FLAGS, b.ctx())
            peak = max(peak, len(b.pol.entries))

    b.run(writer())
    assert peak <= 5
    assert b.pol.check_invariants() == []


# -- bloom / coactive ------------------------------------------------------------------
def test_bloom_threshold_two_insertions():
    bf = HotColdBloom.for_slots(64)
    bf.insert(11)
    assert not bf.is_hot(11)
    bf.insert(11)
    assert bf.is_hot(11)
    assert not bf.is_hot(12)
    bf.reset()
    assert not bf.is_hot(11)


def test_bloom_periodic_reset():
    bf = HotColdBloom(512, reset_interval=4)
    bf.insert(1)
    bf.insert(1)
    assert bf.is_hot(1)
    bf.insert(2)
    bf.insert(3)
    assert not bf.is_hot(1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=50, unique=True))
def test_bloom_has_no_false_cold(keys):
    bf = HotColdBloom.for_slots(256)
    for k in keys:
        bf.insert(k)
        bf.insert(k)
    assert all(bf.is_hot(k) for k in keys)


def test_coactive_idle_step_on_clean_cache_is_no_op():
    b = Bench("coactive", slots=4, start=False)
    (lba,) = b.run(b.pol.coactive_idle_step(1))
    assert lba is None and b.dev.ledger.writes == 0


def test_coactive_idle_step_waits_for_foreground_device_work():
    b = Bench("coactive", slots=4, start=False)
    b.write(3, 1)
    b.dev.fg_inflight = 1
    (lba,) = b.run(b.pol.coactive_idle_step(1))
    assert lba is None
    b.dev.fg_inflight = 0
    (lba,) = b.run(b.pol.coactive_idle_step(1))
    assert lba == 3 and b.dev.ledger.writes_background == 1


def test_coactive_prefers_cold_clean_victims():
    b = Bench("coactive", slots=2, start=False, bloom_reset_interval=0)
    b.write(1, 1)
    b.write(1, 2)          # lba 1 becomes hot
    b.write(2, 1)
    b.run(b.pol.handle_flush(FSYNC, b.ctx()))
    assert not b.pol.dirty
    b.write(3, 1)
    assert set(b.pol.entries) == {1, 3}
    assert b.dev.ledger.writes_critical == 2   # only the flush wrote


def test_coactive_idle_daemon_cleans_in_background():
    b = Bench("coactive", slots=8)
    for lba in range(4):
        b.write(lba, 1)
    b.settle()
    assert not b.pol.dirty
    assert b.pol.idle_writebacks == 4
    assert b.pol.check_invariants() == []


# -- metadata accounting ---------------------------------------------------------------
@pytest.mark.parametrize("name, expected", [
    ("caiti", 102), ("lru", 84), ("pmbd", 84), ("pmbd70", 84), ("coactive", 102),
    ("caiti-woee", 102),
])
def test_metadata_bytes_per_slot(name, expected):
    assert metadata_overhead_bytes_per_slot(name) == expected


def test_metadata_ratio_and_unknown_policy():
    assert abs(100 * metadata_overhead_bytes_per_slot("caiti") / 4096 - 2.5) <= 0.01
    with pytest.raises(UnknownPolicy):
        metadata_overhead_bytes_per_slot("arc")


def test_bio_flag_codec():
    for f in (BioFlags(), FSYNC, BioFlags(preflush=True)):
        assert BioFlags.decode(f.encode()) == f
    assert FSYNC.encode() == "PFS"
    assert len(CATEGORIES) == 8


# -- read-your-writes, every policy -----------------------------------------------------
ops_strategy = st.lists(
    st.tuples(st.sampled_from(["w", "w", "r", "f"]), st.integers(0, 11)), min_size=1, max_size=40)


@pytest.mark.parametrize("name", POLICY_NAMES)
@settings(max_examples=25, deadline=None)
@given(ops=ops_strategy)
def test_read_your_writes(name, ops):
    b = Bench(name, slots=4, workers=2)
    model = {}
    version = 0
    for kind, lba in ops:
        if kind == "w":
            version += 1
            b.write(lba, version)
            model[lba] = version
        elif kind == "r":
            got = decode_payload(b.read(lba))
            assert got == ((lba, model[lba]) if lba in model else None)
        else:
            b.flush()
    b.settle()
    b.flush()
    for lba, v in model.items():
        assert decode_payload(b.dev.peek_block(lba)) == (lba, v)
    assert b.pol.check_invariants() == []
