import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from transitlab.policies import FSYNC
from transitlab.workload import (
    FLUSH,
    READ,
    TORN,
    WRITE,
    KeyChooser,
    RequestStream,
    UnknownKind,
    VersionClock,
    WorkloadSpec,
    ZipfianGenerator,
    decode_payload,
    export_trace,
    job_streams,
    load_trace,
    make_payload,
    periodic_preflush_injector,
    ycsb_workload,
)


def stream(**kw):
    return list(RequestStream(WorkloadSpec(**kw)))


def test_seqwrite_wraps_at_address_space():
    reqs = stream(pattern="seqwrite", address_space_blocks=5, total_ops=12)
    assert [r.lba for r in reqs] == [0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]
    assert all(r.kind == WRITE for r in reqs)
    assert [r.version for r in reqs[:6]] == [1, 1, 1, 1, 1, 2]


def test_fsync_after_every_n_writes():
    reqs = stream(fsync_every_n_writes=128, total_ops=300, address_space_blocks=1000)
    assert all(r.kind == WRITE for r in reqs[:128])
    assert reqs[128].kind == FLUSH and reqs[128].flags == FSYNC
    assert reqs[257].kind == FLUSH
    assert sum(r.kind == FLUSH for r in reqs) == 2


def test_zipfian_top_key_matches_analytic_mass():
    n, theta = 10_000, 0.99
    gen = ZipfianGenerator(n, theta)
    ranks = gen.ranks(np.random.default_rng(1).random(1_000_000))
    observed = np.count_nonzero(ranks == 0) / ranks.size
    expected = 1.0 / math.fsum(1.0 / i ** theta for i in range(1, n + 1))
    assert abs(observed - expected) <= 0.10 * expected
    assert ranks.min() >= 0 and ranks.max() < n


def test_zipfian_is_monotone_in_rank():
    ranks = ZipfianGenerator(1000).ranks(np.random.default_rng(2).random(200_000))
    counts = np.bincount(ranks, minlength=1000)
    assert counts[0] > counts[1] > counts[5] > counts[100]


def test_latest_distribution_follows_newest_key():
    spec = WorkloadSpec(distribution="latest", address_space_blocks=10_000)
    chooser = KeyChooser(spec, np.random.default_rng(0))
    chooser.inserted(4321)
    draws = np.array([chooser.next() for _ in range(20_000)])
    top = 1.0 / math.fsum(1.0 / i ** 0.99 for i in range(1, 10_001))
    assert abs(np.mean(draws == 4321) - top) <= 0.15 * top
    # the 50 keys just older than the newest get far more than a uniform share
    assert np.mean((draws >= 4271) & (draws < 4321)) > 50 * (50 / 10_000)


def test_periodic_preflush_count():
    ticks = list(periodic_preflush_injector(5e9, 30 * 60 * 1e9))
    assert len(ticks) == 360
    assert all(r.kind == FLUSH and r.flags.preflush and not r.flags.fua for _, r in ticks)
    assert list(periodic_preflush_injector(math.inf, 1e12)) == []


def test_ycsb_a_read_ratio():
    reqs = list(RequestStream(ycsb_workload("A", total_ops=10_000, address_space_blocks=5000)))
    reads = sum(r.kind == READ for r in reqs)
    assert abs(reads - 5000) <= 4 * 50


def test_ycsb_f_pairs_read_then_write():
    reqs = list(RequestStream(ycsb_workload("F", total_ops=2000, address_space_blocks=5000)))
    pairs = 0
    for a, b in zip(reqs, reqs[1:]):
        if b.kind == WRITE:
            assert a.kind == READ and a.lba == b.lba
            pairs += 1
    assert pairs > 500


def test_ycsb_unknown_kind():
    with pytest.raises(UnknownKind):
        ycsb_workload("Z")


def test_sstable_bursts_end_with_flush():
    reqs = stream(pattern="sstable", burst_blocks=8, total_ops=27, address_space_blocks=4096)
    first = reqs[:9]
    assert [r.kind for r in first] == [WRITE] * 8 + [FLUSH]
    assert [r.lba for r in first[1:8]] == [first[0].lba + i for i in range(1, 8)]


def test_same_seed_same_stream():
    a = stream(seed=4, total_ops=500, address_space_blocks=999)
    b = stream(seed=4, total_ops=500, address_space_blocks=999)
    c = stream(seed=5, total_ops=500, address_space_blocks=999)
    assert a == b
    assert a != c


def test_jobs_split_ops_and_share_versions():
    spec = WorkloadSpec(total_ops=101, numjobs=4, address_space_blocks=3)
    clock = VersionClock()
    streams = job_streams(spec, clock)
    reqs = [r for s in streams for r in s]
    assert len(reqs) == 101
    per_lba = {}
    for r in reqs:
        per_lba.setdefault(r.lba, []).append(r.version)
    for versions in per_lba.values():
        assert sorted(versions) == list(range(1, len(versions) + 1))


def test_trace_round_trip(tmp_path):
    reqs = stream(total_ops=200, fsync_every_n_writes=16, address_space_blocks=64)
    path = tmp_path / "trace.csv"
    assert export_trace(reqs, path) == 200
    back = load_trace(path)
    assert [(r.id, r.kind, r.lba, r.flags, r.version) for r in back] == \
           [(r.id, r.kind, r.lba, r.flags, r.version) for r in reqs]


def test_spec_validation():
    with pytest.raises(ValueError):
        WorkloadSpec(pattern="bogus").validate()
    with pytest.raises(ValueError):
        WorkloadSpec(read_ratio=1.5).validate()


@given(st.integers(0, 2**40), st.integers(1, 2**40), st.sampled_from([16, 64, 512, 4096]))
def test_payload_round_trip(lba, version, bs):
    blk = make_payload(lba, version, bs)
    assert len(blk) == bs
    assert decode_payload(blk) == (lba, version)


@given(st.integers(1, 255), st.integers(16, 4080))
def test_mixed_payload_is_torn(version, cut):
    old, new = make_payload(3, version, 4096), make_payload(3, version + 1, 4096)
    cut -= cut % 16
    mixed = new[:cut] + old[cut:]
    assert decode_payload(mixed) == (3, TORN)
    assert decode_payload(bytes(4096)) is None
