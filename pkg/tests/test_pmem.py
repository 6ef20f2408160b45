import pytest
from hypothesis import given
from hypothesis import strategies as st

from transitlab.pmem import LatencyConfig, MediumError, OutOfRange, PmemImage
from transitlab.sim import PowerFailure


def test_round_trip():
    pm = PmemImage(16384)
    data = bytes(range(256)) * 16
    pm.write(0, data)
    assert pm.read(0, 4096) == data


def test_empty_write_changes_nothing():
    pm = PmemImage(4096)
    before = pm.snapshot()
    assert pm.write(100, b"") == 0
    assert pm.snapshot() == before and pm.write_count == 0


def test_fresh_image_reads_zero_and_reads_are_stable():
    pm = PmemImage(8192)
    assert pm.read(4096, 4096) == bytes(4096)
    assert pm.read(0, 64) == pm.read(0, 64)


def test_torn_write_keeps_prefix():
    pm = PmemImage(8192)
    old = b"\xaa" * 4096
    pm.write(0, old)
    pm.arm_crash(1, tear=2048)
    with pytest.raises(PowerFailure):
        pm.write(0, b"\x55" * 4096)
    got = pm.peek(0, 4096)
    assert got[:2048] == b"\x55" * 2048
    assert got[2048:] == old[2048:]


def test_tear_rounds_down_to_atomic_unit():
    pm = PmemImage(4096, atomic_unit=8)
    pm.arm_crash(1, tear=13)
    with pytest.raises(PowerFailure):
        pm.write(0, b"\x01" * 64)
    assert pm.peek(0, 64) == b"\x01" * 8 + bytes(56)


def test_atomic_word_never_tears():
    pm = PmemImage(4096)
    pm.arm_crash(1, tear=4)
    with pytest.raises(PowerFailure):
        pm.write(0, b"\x01" * 8)
    assert pm.peek(0, 8) == bytes(8)


def test_crash_without_inflight_write_is_a_no_op():
    pm = PmemImage(4096)
    pm.write(0, b"x" * 100)
    before = pm.snapshot()
    pm.crash(tear_spec=50)
    assert pm.snapshot() == before


def test_crash_tears_registered_inflight_writes():
    pm = PmemImage(4096)
    pm.begin("lane0", 0, b"\x07" * 64)
    pm.crash({"lane0": 16})
    assert pm.peek(0, 64) == b"\x07" * 16 + bytes(48)


def test_costs_follow_latency_profile():
    lat = LatencyConfig()
    pm = PmemImage(1 << 16, block_size=4096, latency=lat)
    assert pm.write_cost(4096) == lat.pmem_write_ns_per_block
    assert pm.write_cost(8) == lat.pmem_small_write_ns
    assert pm.read_cost(8192) == 2 * lat.pmem_read_ns_per_block


def test_media_error_and_range_checks():
    pm = PmemImage(4096)
    pm.fail_next_writes(1)
    with pytest.raises(MediumError):
        pm.write(0, b"abc")
    pm.write(0, b"abc")
    with pytest.raises(OutOfRange):
        pm.write(4090, b"too long")


def test_save_and_load(tmp_path):
    pm = PmemImage(4096)
    pm.write(10, b"persist me")
    path = tmp_path / "img.bin"
    pm.save(path)
    assert PmemImage.load(path).peek(10, 10) == b"persist me"


@given(st.lists(st.tuples(st.integers(0, 4000), st.binary(min_size=1, max_size=96)), max_size=30))
def test_image_matches_bytearray_model(writes):
    pm = PmemImage(4096)
    model = bytearray(4096)
    for off, data in writes:
        pm.write(off, data)
        model[off:off + len(data)] = data
    assert pm.snapshot() == bytes(model)
    assert pm.ledger.bytes_written == sum(len(d) for _, d in writes)
