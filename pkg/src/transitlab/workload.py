"""Deterministic block request streams: fio-like pressure patterns, fsync
cadence, YCSB key distributions and the periodic journal flush."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .policies.base import FSYNC, NO_FLAGS, PERIODIC_FLUSH, BioFlags

READ, WRITE, FLUSH = "READ", "WRITE", "FLUSH"
PATTERNS = ("randwrite", "seqwrite", "randread", "readwrite_mix", "rmw", "sstable")
DISTRIBUTIONS = ("uniform", "zipfian", "latest")
YCSB_KINDS = ("LOAD", "A", "F")

_STAMP = struct.Struct("<QQ")
_BATCH = 4096


class Exhausted(Exception):
    pass


class UnknownKind(ValueError):
    pass


# -- self-describing payloads ---------------------------------------------------
def make_payload(lba: int, version: int, block_size: int) -> bytes:
    if block_size % _STAMP.size:
        raise ValueError(f"block size must be a multiple of {_STAMP.size}")
    return _STAMP.pack(lba, version) * (block_size // _STAMP.size)


TORN = -1


def decode_payload(block: bytes) -> tuple[int, int] | None:
    """Return (lba, version), None for a never-written block, or
    (lba, TORN) when the block is not one whole stamped version."""
    if not any(block):
        return None
    lba, version = _STAMP.unpack_from(block, 0)
    if block != _STAMP.pack(lba, version) * (len(block) // _STAMP.size):
        return (lba, TORN)
    return (lba, version)


class VersionClock:
    """Per-lba write counter shared by every job of a run."""

    def __init__(self):
        self.last: dict[int, int] = {}

    def next(self, lba: int) -> int:
        v = self.last.get(lba, 0) + 1
        self.last[lba] = v
        return v


# -- requests -----------------------------------------------------------------------
@dataclass(slots=True)
class IoRequest:
    id: int
    kind: str
    lba: int = -1
    flags: BioFlags = NO_FLAGS
    version: int = 0
    nblocks: int = 1
    issue_ns: int = 0
    job: int = 0

    def payload(self, block_size: int, i: int = 0) -> bytes:
        return make_payload(self.lba + i, self.version, block_size)


@dataclass
class WorkloadSpec:
    pattern: str = "randwrite"
    address_space_blocks: int = (64 << 30) // 4096
    io_size_blocks: int = 1
    iodepth: int = 32
    numjobs: int = 1
    total_ops: int = 100_000
    fsync_every_n_writes: int = 0
    periodic_preflush_interval_ns: float = 5e9
    distribution: str = "uniform"
    zipf_theta: float = 0.99
    read_ratio: float = 0.5
    burst_blocks: int = 1024
    seed: int = 0

    def validate(self) -> "WorkloadSpec":
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        for name in ("address_space_blocks", "io_size_blocks", "iodepth", "numjobs", "total_ops", "burst_blocks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.fsync_every_n_writes < 0:
            raise ValueError("fsync_every_n_writes must be >= 0")
        if not 0 < self.zipf_theta < 1:
            raise ValueError("zipf_theta must lie in (0, 1)")
        if not 0 <= self.read_ratio <= 1:
            raise ValueError("read_ratio must lie in [0, 1]")
        if self.periodic_preflush_interval_ns <= 0:
            raise ValueError("periodic_preflush_interval_ns must be positive")
        if self.io_size_blocks > self.address_space_blocks:
            raise ValueError("io_size_blocks exceeds the address space")
        return self


# -- key choosers ----------------------------------------------------------------------
def zeta(n: int, theta: float, start: int = 0) -> float:
    """sum_{i=start+1..n} 1/i^theta, in chunks to bound memory."""
    total = 0.0
    lo = start + 1
    while lo <= n:
        hi = min(n, lo + (1 << 20) - 1)
        total += float(np.sum(np.arange(lo, hi + 1, dtype=np.float64) ** -theta))
        lo = hi + 1
    return total


class ZipfianGenerator:
    """Rank generator over [0, n) with P(rank k) ~ 1/(k+1)^theta, using the
    closed-form inversion YCSB uses.  ``grow`` extends n incrementally."""

    def __init__(self, n: int, theta: float = 0.99):
        self.theta = theta
        self.zeta2 = zeta(2, theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.n = 0
        self.zetan = 0.0
        self.grow(n)

    def grow(self, n: int) -> None:
        if n > self.n:
            self.zetan += zeta(n, self.theta, self.n)
            self.n = n
            self.eta = (1 - (2.0 / n) ** (1 - self.theta)) / (1 - self.zeta2 / self.zetan) if n > 2 else 0.0

    def ranks(self, u: np.ndarray) -> np.ndarray:
        uz = u * self.zetan
        out = np.floor(self.n * np.power(self.eta * u - self.eta + 1, self.alpha)).astype(np.int64)
        out = np.where(uz < 1 + 0.5 ** self.theta, 1, out)
        out = np.where(uz < 1.0, 0, out)
        return np.clip(out, 0, self.n - 1)

    def top_mass(self) -> float:
        return 1.0 / self.zetan


class KeyChooser:
    def __init__(self, spec: WorkloadSpec, rng: np.random.Generator):
        self.rng = rng
        self.n = spec.address_space_blocks - spec.io_size_blocks + 1
        self.kind = spec.distribution
        self.zipf = ZipfianGenerator(self.n, spec.zipf_theta) if self.kind != "uniform" else None
        self.latest = self.n - 1     # newest inserted key for the latest distribution
        self._buf = np.empty(0, dtype=np.int64)
        self._i = 0

    def _refill(self) -> None:
        if self.kind == "uniform":
            self._buf = self.rng.integers(0, self.n, size=_BATCH)
        else:
            self._buf = self.zipf.ranks(self.rng.random(_BATCH))
        self._i = 0

    def next(self) -> int:
        if self._i >= len(self._buf):
            self._refill()
        v = int(self._buf[self._i])
        self._i += 1
        if self.kind == "latest":
            return (self.latest - v) % self.n
        return v

    def inserted(self, lba: int) -> None:
        self.latest = lba


class RequestStream:
    """One job's request sequence.  Deterministic in (spec, job)."""

    def __init__(self, spec: WorkloadSpec, job: int = 0, versions: VersionClock | None = None,
                 limit: int | None = None):
        spec.validate()
        self.spec = spec
        self.job = job
        self.versions = versions or VersionClock()
        self.rng = np.random.default_rng([spec.seed, job])
        self.keys = KeyChooser(spec, self.rng)
        self.limit = spec.total_ops if limit is None else limit
        self.emitted = 0
        self.writes_since_sync = 0
        self._pending: list[IoRequest] = []
        self._seq_pos = (job * spec.address_space_blocks // spec.numjobs) if spec.pattern != "sstable" else 0
        self._burst_left = 0
        self._mix_u = np.empty(0)
        self._mix_i = 0

    def __iter__(self) -> Iterator[IoRequest]:
        while True:
            try:
                yield self.next_request()
            except Exhausted:
                return

    def _coin(self) -> float:
        if self._mix_i >= len(self._mix_u):
            self._mix_u = self.rng.random(_BATCH)
            self._mix_i = 0
        u = float(self._mix_u[self._mix_i])
        self._mix_i += 1
        return u

    def _req(self, kind: str, lba: int = -1, flags: BioFlags = NO_FLAGS) -> IoRequest:
        version = 0
        if kind == WRITE:
            version = self.versions.next(lba)
            for i in range(1, self.spec.io_size_blocks):
                self.versions.next(lba + i)
        return IoRequest(self.emitted, kind, lba, flags, version, self.spec.io_size_blocks if kind != FLUSH else 0,
                         job=self.job)

    def _write(self, lba: int) -> IoRequest:
        self.writes_since_sync += 1
        self.keys.inserted(lba)
        return self._req(WRITE, lba)

    def _draw(self) -> list[tuple[str, int]]:
        spec = self.spec
        p = spec.pattern
        io = spec.io_size_blocks
        space = spec.address_space_blocks
        if p == "seqwrite":
            lba = self._seq_pos
            self._seq_pos = (self._seq_pos + io) % (space - io + 1)
            return [(WRITE, lba)]
        if p == "sstable":
            if self._burst_left == 0:
                self._burst_left = spec.burst_blocks
                self._seq_pos = self.keys.next() // io * io
            lba = self._seq_pos
            self._seq_pos = (self._seq_pos + io) % (space - io + 1)
            self._burst_left -= 1
            out = [(WRITE, lba)]
            if self._burst_left == 0:
                out.append((FLUSH, -1))
            return out
        if p == "randwrite":
            return [(WRITE, self.keys.next())]
        if p == "randread":
            return [(READ, self.keys.next())]
        if p == "readwrite_mix":
            kind = READ if self._coin() < spec.read_ratio else WRITE
            return [(kind, self.keys.next())]
        if p == "rmw":
            lba = self.keys.next()
            if self._coin() < spec.read_ratio:
                return [(READ, lba)]
            return [(READ, lba), (WRITE, lba)]
        raise UnknownKind(p)

    def next_request(self) -> IoRequest:
        if self.emitted >= self.limit:
            raise Exhausted()
        n = self.spec.fsync_every_n_writes
        if n and self.writes_since_sync >= n:
            self.writes_since_sync = 0
            req = self._req(FLUSH, flags=FSYNC)
        elif self._pending:
            kind, lba = self._pending.pop(0)
            req = self._write(lba) if kind == WRITE else self._req(kind, lba, FSYNC if kind == FLUSH else NO_FLAGS)
        else:
            drawn = self._draw()
            self._pending = drawn[1:]
            kind, lba = drawn[0]
            req = self._write(lba) if kind == WRITE else self._req(kind, lba, FSYNC if kind == FLUSH else NO_FLAGS)
        self.emitted += 1
        return req


def next_request(stream: RequestStream) -> IoRequest:
    return stream.next_request()


def job_streams(spec: WorkloadSpec, versions: VersionClock | None = None) -> list[RequestStream]:
    """Split total_ops over numjobs independent streams sharing one version clock."""
    versions = versions or VersionClock()
    base, extra = divmod(spec.total_ops, spec.numjobs)
    return [RequestStream(spec, j, versions, base + (1 if j < extra else 0)) for j in range(spec.numjobs)]


def periodic_preflush_injector(interval_ns: float, duration_ns: float) -> Iterator[tuple[int, IoRequest]]:
    """Yield (time, FLUSH) pairs on the journal-commit cadence."""
    if interval_ns <= 0:
        raise ValueError("interval must be positive")
    if math.isinf(interval_ns):
        return
    k = 1
    while k * interval_ns <= duration_ns:
        yield int(k * interval_ns), IoRequest(-k, FLUSH, flags=PERIODIC_FLUSH)
        k += 1


def ycsb_workload(kind: str, distribution: str = "zipfian", **overrides) -> WorkloadSpec:
    kind = kind.upper()
    if kind not in YCSB_KINDS:
        raise UnknownKind(kind)
    if kind == "LOAD":
        spec = WorkloadSpec(pattern="seqwrite", distribution="uniform")
    elif kind == "A":
        spec = WorkloadSpec(pattern="readwrite_mix", read_ratio=0.5, distribution=distribution)
    else:
        spec = WorkloadSpec(pattern="rmw", read_ratio=0.5, distribution=distribution)
    return replace(spec, **overrides).validate()


# -- trace files --------------------------------------------------------------------------
TRACE_HEADER = ("id", "kind", "lba", "flags", "version")


def export_trace(requests, path) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow((r.id, r.kind, r.lba, r.flags.encode(), r.version))
            n += 1
    return n


def load_trace(path) -> list[IoRequest]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(IoRequest(int(row["id"]), row["kind"], int(row["lba"]),
                                 BioFlags.decode(row["flags"]), int(row["version"]),
                                 0 if row["kind"] == FLUSH else 1))
    return out


class TraceStream:
    """Replays a recorded request list; versions are taken from the trace."""

    def __init__(self, requests: list[IoRequest], job: int = 0):
        self.requests = requests
        self.job = job
        self.pos = 0

    def next_request(self) -> IoRequest:
        if self.pos >= len(self.requests):
            raise Exhausted()
        r = self.requests[self.pos]
        self.pos += 1
        return replace(r, job=self.job)

    def __iter__(self):
        while self.pos < len(self.requests):
            yield self.next_request()
