"""Shared vocabulary for caching policies: bio flags, timing categories,
per-request context and the policy interface."""

from __future__ import annotations

from dataclasses import dataclass

CATEGORIES = (
    "metadata_mgmt",
    "cache_write_only",
    "cache_eviction_and_write",
    "conditional_bypass",
    "wbq_enqueue",
    "cache_flush",
    "device_direct",
    "others",
)
(METADATA, WRITE_ONLY, EVICT_WRITE, BYPASS, ENQUEUE, FLUSH, DIRECT, OTHERS) = range(len(CATEGORIES))

# how a request was finally served
DISPOSITIONS = (
    "cache_write_only",
    "cache_eviction_and_write",
    "conditional_bypass",
    "device_direct",
    "read_hit",
    "read_miss",
    "flush",
)

POLICY_NAMES = ("caiti", "lru", "pmbd", "pmbd70", "coactive", "none")

# per-slot metadata footprint, field by field
METADATA_FIELDS = {
    "caiti": {"lba": 8, "slot_number": 4, "state": 1, "lock": 40, "work_struct": 33, "wbq_and_free_links": 16},
    "lru": {"lba": 8, "slot_number": 4, "lock": 40, "lists": 32},
    "pmbd": {"lba": 8, "slot_number": 4, "lock": 40, "lists": 32},
    "pmbd70": {"lba": 8, "slot_number": 4, "lock": 40, "lists": 32},
    "coactive": {"lba": 8, "slot_number": 4, "lock": 40, "lists": 48, "bloom": 2},
    "none": {},
}


class UnknownPolicy(KeyError):
    pass


def metadata_overhead_bytes_per_slot(policy: str) -> int:
    base = policy.split("-")[0]
    if base not in METADATA_FIELDS:
        raise UnknownPolicy(policy)
    return sum(METADATA_FIELDS[base].values())


@dataclass(frozen=True)
class BioFlags:
    preflush: bool = False
    fua: bool = False
    sync: bool = False

    def encode(self) -> str:
        return "".join(c for c, on in (("P", self.preflush), ("F", self.fua), ("S", self.sync)) if on) or "-"

    @classmethod
    def decode(cls, text: str) -> "BioFlags":
        text = text.strip()
        return cls("P" in text, "F" in text, "S" in text)


NO_FLAGS = BioFlags()
FSYNC = BioFlags(preflush=True, fua=True, sync=True)
PERIODIC_FLUSH = BioFlags(preflush=True)


class RequestContext:
    """Time attribution for one request.

    Handlers call ``lap(cat)`` after each phase; whatever elapsed since the
    previous lap is charged to ``cat``.  Time never lapped ends up in
    ``others`` when the runner closes the record.
    """

    __slots__ = ("rt", "cats", "last", "worker", "lane", "disposition")

    def __init__(self, rt, worker: int = 0, lane: int = 0):
        self.rt = rt
        self.cats = [0] * len(CATEGORIES)
        self.last = rt.now
        self.worker = worker
        self.lane = lane
        self.disposition: str | None = None

    def lap(self, cat: int) -> None:
        now = self.rt.now
        self.cats[cat] += now - self.last
        self.last = now

    def skip(self) -> None:
        self.last = self.rt.now

    def close(self, total_ns: int) -> list[int]:
        known = sum(self.cats) - self.cats[OTHERS]
        self.cats[OTHERS] = total_ns - known
        return self.cats


class Policy:
    """Interface every policy implements.

    ``handle_*`` are generators to be driven by a runtime; ``handle_read``
    returns the block, ``handle_flush`` returns the number of blocks the
    flush had to make durable.
    """

    name = "abstract"

    def __init__(self, device, latency):
        self.device = device
        self.lat = latency
        self.block_size = device.block_size
        self.flush_volumes: list[int] = []
        self.counters = {"bypass": 0, "critical_evictions": 0}

    def start(self, rt) -> list:
        """Spawn background actors on ``rt``; returns them."""
        return []

    def handle_write(self, lba: int, data, flags: BioFlags, ctx: RequestContext):
        raise NotImplementedError
        yield

    def handle_read(self, lba: int, flags: BioFlags, ctx: RequestContext):
        raise NotImplementedError
        yield

    def handle_flush(self, flags: BioFlags, ctx: RequestContext):
        raise NotImplementedError
        yield

    def metadata_overhead_bytes_per_slot(self) -> int:
        return metadata_overhead_bytes_per_slot(self.name)

    def check_invariants(self) -> list[str]:
        return []

    def transition_violations(self) -> list[str]:
        return []

    def cached_blocks(self) -> int:
        return 0


class Passthrough(Policy):
    name = "none"

    def handle_write(self, lba, data, flags, ctx):
        yield from self.device.write(lba, data, ctx.lane, critical=True)
        ctx.lap(DIRECT)
        ctx.disposition = "device_direct"

    def handle_read(self, lba, flags, ctx):
        data = yield from self.device.read(lba, ctx.lane)
        ctx.lap(DIRECT)
        ctx.disposition = "read_miss"
        return data

    def handle_flush(self, flags, ctx):
        self.flush_volumes.append(0)
        ctx.disposition = "flush"
        return 0
        yield
