"""Simulated byte-addressable persistent medium.

The image keeps only persisted bytes.  Writes are applied whole unless a
crash has been armed for them, in which case a prefix (aligned to the
medium's atomic store unit) lands and :class:`PowerFailure` is raised.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

from .sim import PowerFailure

SMALL_WRITE_MAX = 64


class OutOfRange(ValueError):
    pass


class MediumError(IOError):
    """Injected media failure; surfaces as IO_ERROR / -EIO upstream."""


@dataclass
class LatencyConfig:
    pmem_write_ns_per_block: int = 3000
    pmem_read_ns_per_block: int = 1500
    dram_write_ns_per_block: int = 1000
    dram_read_ns_per_block: int = 500
    pmem_small_write_ns: int = 500
    # cost of one cache-metadata action (hash, lookup, list or queue update)
    metadata_ns: int = 50

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if int(value) != value or value < 0:
                raise ValueError(f"latency {name} must be a non-negative integer, got {value!r}")
            setattr(self, name, int(value))


class Clock:
    """Stand-alone clock for using the medium outside a scheduler."""

    VIRTUAL = "virtual"
    REAL = "real"

    def __init__(self, mode: str = VIRTUAL):
        if mode not in (self.VIRTUAL, self.REAL):
            raise ValueError(mode)
        self.mode = mode
        self._now = 0
        self._t0 = None
        if mode == self.REAL:
            import time
            self._t0 = time.perf_counter_ns()

    @property
    def now_ns(self) -> int:
        if self.mode == self.REAL:
            import time
            return time.perf_counter_ns() - self._t0
        return self._now

    def charge(self, ns: int) -> None:
        if ns < 0:
            raise ValueError("negative charge")
        if self.mode == self.VIRTUAL:
            self._now += ns


@dataclass
class OpLedger:
    writes: int = 0
    reads: int = 0
    bytes_written: int = 0
    bytes_read: int = 0
    charged_ns: int = 0
    ops: list | None = field(default=None, repr=False)

    def add(self, kind: str, nbytes: int, ns: int) -> None:
        if kind == "w":
            self.writes += 1
            self.bytes_written += nbytes
        else:
            self.reads += 1
            self.bytes_read += nbytes
        self.charged_ns += ns
        if self.ops is not None:
            self.ops.append((kind, nbytes, ns))


class PmemImage:
    def __init__(self, capacity_bytes: int, block_size: int = 4096,
                 latency: LatencyConfig | None = None, atomic_unit: int = 8,
                 clock: Clock | None = None, record_ops: bool = False):
        if capacity_bytes <= 0:
            raise ValueError("capacity must be positive")
        self.capacity_bytes = capacity_bytes
        self.block_size = block_size
        self.atomic_unit = atomic_unit
        self.latency = latency or LatencyConfig()
        self.clock = clock
        self.persisted = bytearray(capacity_bytes)
        self.ledger = OpLedger(ops=[] if record_ops else None)
        self.write_count = 0
        self._crash_at: int | None = None
        self._crash_tear: int = 0
        self._fail_writes = 0
        self._inflight: dict = {}
        # when a list, every applied write is appended as (offset, bytes)
        self.journal: list | None = None

    # -- cost model -------------------------------------------------------
    def write_cost(self, nbytes: int) -> int:
        if nbytes == 0:
            return 0
        if nbytes <= SMALL_WRITE_MAX:
            return self.latency.pmem_small_write_ns
        return self.latency.pmem_write_ns_per_block * math.ceil(nbytes / self.block_size)

    def read_cost(self, nbytes: int) -> int:
        # metadata-sized fetches are folded into the block read that follows
        if nbytes <= SMALL_WRITE_MAX:
            return 0
        return self.latency.pmem_read_ns_per_block * math.ceil(nbytes / self.block_size)

    def _check(self, offset: int, n: int) -> None:
        if offset < 0 or n < 0 or offset + n > self.capacity_bytes:
            raise OutOfRange(f"[{offset}, {offset + n}) outside 0..{self.capacity_bytes}")

    # -- fault injection --------------------------------------------------
    def arm_crash(self, at_write: int, tear: int = 0) -> None:
        """Lose power during the ``at_write``-th write from now (1-based).

        ``tear`` bytes of that write (rounded down to the atomic unit) land.
        """
        if at_write < 1:
            raise ValueError("at_write is 1-based")
        self._crash_at = self.write_count + at_write
        self._crash_tear = tear

    def disarm(self) -> None:
        self._crash_at = None

    def fail_next_writes(self, n: int) -> None:
        self._fail_writes = n

    def torn_prefix(self, nbytes: int, tear: int) -> int:
        if nbytes <= self.atomic_unit:
            return nbytes if tear >= nbytes else 0
        tear = max(0, min(tear, nbytes))
        return tear - tear % self.atomic_unit

    # -- data path --------------------------------------------------------
    def write(self, offset: int, data) -> int:
        n = len(data)
        self._check(offset, n)
        if n == 0:
            return 0
        if self._fail_writes:
            self._fail_writes -= 1
            raise MediumError(f"media error writing {n} B at {offset}")
        self.write_count += 1
        if self._crash_at is not None and self.write_count >= self._crash_at:
            keep = self.torn_prefix(n, self._crash_tear)
            if keep:
                self.persisted[offset:offset + keep] = data[:keep]
            self._crash_at = None
            raise PowerFailure(f"power lost in write #{self.write_count} ({keep}/{n} B landed)")
        self.persisted[offset:offset + n] = data
        if self.journal is not None:
            self.journal.append((offset, bytes(data)))
        ns = self.write_cost(n)
        self.ledger.add("w", n, ns)
        if self.clock is not None:
            self.clock.charge(ns)
        return ns

    def read(self, offset: int, n: int) -> bytes:
        self._check(offset, n)
        ns = self.read_cost(n)
        self.ledger.add("r", n, ns)
        if self.clock is not None:
            self.clock.charge(ns)
        return bytes(self.persisted[offset:offset + n])

    def peek(self, offset: int, n: int) -> bytes:
        """Read without charging; for recovery tools and oracles."""
        self._check(offset, n)
        return bytes(self.persisted[offset:offset + n])

    # -- in-flight tracking for crash(tear_spec) --------------------------
    def begin(self, key, offset: int, data) -> None:
        self._inflight[key] = (offset, bytes(data))

    def end(self, key) -> None:
        self._inflight.pop(key, None)

    def crash(self, tear_spec: dict | int | None = None) -> None:
        """Declare volatile state lost.

        Writes registered as in flight (one per key, typically per lane) are
        torn according to ``tear_spec``: a dict key -> bytes landed, or one
        value applied to all of them.  With no tear_spec none of them lands.
        """
        for key, (offset, data) in sorted(self._inflight.items(), key=lambda kv: str(kv[0])):
            if tear_spec is None:
                continue
            tear = tear_spec.get(key, 0) if isinstance(tear_spec, dict) else tear_spec
            keep = self.torn_prefix(len(data), tear)
            if keep:
                self.persisted[offset:offset + keep] = data[:keep]
        self._inflight.clear()
        self._crash_at = None

    # -- file-backed images -----------------------------------------------
    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(self.persisted)

    @classmethod
    def load(cls, path: str | os.PathLike, block_size: int = 4096,
             latency: LatencyConfig | None = None) -> "PmemImage":
        with open(path, "rb") as fh:
            raw = fh.read()
        img = cls(len(raw), block_size=block_size, latency=latency)
        img.persisted[:] = raw
        return img

    def snapshot(self) -> bytes:
        return bytes(self.persisted)
