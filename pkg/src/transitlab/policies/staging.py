"""Staging write-back caches: data stays cached until replacement or a flush
forces it out.  LRU replacement and the PMBD full/70% drain variants."""

from __future__ import annotations

import math
from collections import OrderedDict

from ..sim import Lock, Signal
from .base import DIRECT, EVICT_WRITE, FLUSH, METADATA, WRITE_ONLY, Policy


class Entry:
    __slots__ = ("lba", "slot", "dirty", "gen", "busy")

    def __init__(self, lba: int, slot: int):
        self.lba = lba
        self.slot = slot
        self.dirty = True
        self.gen = 0
        self.busy = False   # being written back with the cache lock released

    def __repr__(self):
        return f"<entry lba={self.lba} slot={self.slot} dirty={self.dirty}>"


class StagingPolicy(Policy):
    """Shared slab, index and free list behind one cache-wide lock."""

    def __init__(self, device, latency, num_slots: int, lane_offset: int = 1):
        super().__init__(device, latency)
        if num_slots < 1:
            raise ValueError("need at least one slot")
        self.num_slots = num_slots
        self.lane_offset = lane_offset
        self.lock = Lock(f"{self.name}-cache")
        self.entries: OrderedDict[int, Entry] = OrderedDict()   # oldest first
        self.free_slots = list(range(num_slots - 1, -1, -1))
        self.slab = bytearray(num_slots * self.block_size)
        self.slot_freed = Signal("slot-freed")
        self.background_writebacks = 0

    # -- slab helpers -----------------------------------------------------------
    def _store(self, e: Entry, data) -> None:
        off = e.slot * self.block_size
        self.slab[off:off + self.block_size] = data
        e.dirty = True
        e.gen += 1

    def _load(self, e: Entry) -> bytes:
        off = e.slot * self.block_size
        return bytes(self.slab[off:off + self.block_size])

    def _insert(self, lba: int) -> Entry:
        e = Entry(lba, self.free_slots.pop())
        self.entries[lba] = e
        return e

    def _drop(self, e: Entry) -> None:
        del self.entries[e.lba]
        self.free_slots.append(e.slot)
        self.slot_freed.notify(1)

    def _writeback(self, e: Entry, lane: int, critical: bool):
        gen = e.gen
        e.busy = True
        try:
            yield from self.device.write(e.lba, self._load(e), lane, critical=critical)
        finally:
            e.busy = False
        if e.gen == gen:
            e.dirty = False
        if critical:
            self.counters["critical_evictions"] += 1
        else:
            self.background_writebacks += 1

    def _write_dirty(self, lane: int, critical: bool, drop: bool):
        """Write every dirty entry back; with ``drop`` empty the cache too."""
        volume = 0
        for e in list(self.entries.values()):
            if e.dirty:
                yield from self._writeback(e, lane, critical)
                volume += 1
            if drop:
                self._drop(e)
        return volume

    def _dirty_count(self) -> int:
        return sum(1 for e in self.entries.values() if e.dirty)

    def _hit(self, e: Entry, data):
        self.entries.move_to_end(e.lba)
        yield self.lat.dram_write_ns_per_block
        self._store(e, data)

    def _fill(self, lba: int, data):
        e = self._insert(lba)
        yield self.lat.dram_write_ns_per_block
        self._store(e, data)

    def make_room(self, lane: int):
        """Free one slot on behalf of a missing writer.  Returns True if any
        device write was needed."""
        raise NotImplementedError
        yield

    # -- request handlers ---------------------------------------------------------
    def handle_write(self, lba, data, flags, ctx):
        yield self.lock
        try:
            yield self.lat.metadata_ns
            ctx.lap(METADATA)
            e = self.entries.get(lba)
            stalled = False
            if e is not None:
                yield from self._hit(e, data)
            else:
                if not self.free_slots:
                    stalled = yield from self.make_room(ctx.lane)
                    ctx.lap(EVICT_WRITE if stalled else METADATA)
                    e = self.entries.get(lba)
                if e is not None:
                    yield from self._hit(e, data)
                else:
                    yield from self._fill(lba, data)
            ctx.lap(EVICT_WRITE if stalled else WRITE_ONLY)
            ctx.disposition = "cache_eviction_and_write" if stalled else "cache_write_only"
            if flags.fua:
                e = self.entries[lba]
                if e.dirty:
                    yield from self._writeback(e, ctx.lane, critical=True)
                ctx.lap(FLUSH)
        finally:
            self.lock.release()

    def handle_read(self, lba, flags, ctx):
        yield self.lock
        try:
            yield self.lat.metadata_ns
            e = self.entries.get(lba)
            if e is not None:
                data = self._load(e)
                self.entries.move_to_end(lba)
        finally:
            self.lock.release()
        ctx.lap(METADATA)
        if e is not None:
            yield self.lat.dram_read_ns_per_block
            ctx.disposition = "read_hit"
            return data
        data = yield from self.device.read(lba, ctx.lane)
        ctx.lap(DIRECT)
        ctx.disposition = "read_miss"
        return data

    def handle_flush(self, flags, ctx):
        yield self.lock
        try:
            volume = self._dirty_count()
            yield from self.flush_locked(ctx.lane)
        finally:
            self.lock.release()
        ctx.lap(FLUSH)
        ctx.disposition = "flush"
        self.flush_volumes.append(volume)
        return volume

    def flush_locked(self, lane: int):
        yield from self._write_dirty(lane, critical=True, drop=False)

    # -- invariants -----------------------------------------------------------------
    def check_invariants(self):
        problems = []
        slots = [e.slot for e in self.entries.values()]
        if len(set(slots)) != len(slots):
            problems.append("two cached lbas share a slot")
        if set(slots) & set(self.free_slots):
            problems.append("slot both cached and free")
        if len(slots) + len(self.free_slots) != self.num_slots:
            problems.append(f"conservation: {len(slots)} cached + {len(self.free_slots)} free != {self.num_slots}")
        for lba, e in self.entries.items():
            if e.lba != lba:
                problems.append(f"index key {lba} points at {e!r}")
        return problems

    def cached_blocks(self):
        return len(self.entries)


class LruPolicy(StagingPolicy):
    name = "lru"

    def make_room(self, lane):
        victim = next(iter(self.entries.values()))
        stalled = victim.dirty
        if victim.dirty:
            yield from self._writeback(victim, lane, critical=True)
        self._drop(victim)
        return stalled


class PmbdPolicy(StagingPolicy):
    """Drains the whole buffer once it is completely full."""

    name = "pmbd"

    def make_room(self, lane):
        n = yield from self._write_dirty(lane, critical=True, drop=True)
        return n > 0

    def flush_locked(self, lane):
        yield from self._write_dirty(lane, critical=True, drop=True)


class Pmbd70Policy(StagingPolicy):
    """A syncer daemon empties the buffer whenever it reaches 70% occupancy;
    writers that find it full wait for the daemon."""

    name = "pmbd70"

    def __init__(self, device, latency, num_slots, lane_offset=1, watermark: float = 0.7):
        super().__init__(device, latency, num_slots, lane_offset)
        self.watermark = watermark
        self.trigger = max(1, math.ceil(watermark * num_slots))
        self.wake = Signal("syncer")
        self.draining = False
        self.drains = 0

    def start(self, rt):
        return [rt.spawn(self.syncer(), "pmbd70-syncer", kind="bg")]

    def make_room(self, lane):
        # the lock is dropped while waiting so the syncer can make progress
        while not self.free_slots:
            self.wake.notify(1)
            self.lock.release()
            yield self.slot_freed
            yield self.lock
        return True

    def _fill(self, lba, data):
        yield from super()._fill(lba, data)
        if len(self.entries) >= self.trigger and not self.draining:
            self.wake.notify(1)

    def syncer(self):
        lane = self.lane_offset % self.device.lanes
        while True:
            if len(self.entries) < self.trigger:
                yield self.wake
                continue
            self.draining = True
            self.drains += 1
            while self.entries:
                yield self.lock
                e = next((x for x in self.entries.values() if not x.busy), None)
                if e is None:
                    self.lock.release()
                    break
                if e.dirty:
                    self.lock.release()
                    yield from self._writeback(e, lane, critical=False)
                    yield self.lock
                if not e.dirty and self.entries.get(e.lba) is e:
                    self._drop(e)
                self.lock.release()
            self.draining = False

    def handle_flush(self, flags, ctx):
        yield self.lock
        try:
            volume = self._dirty_count()
            while True:
                # the syncer may hold one entry mid write-back
                e = next((x for x in self.entries.values() if x.dirty and not x.busy), None)
                if e is None:
                    if any(x.dirty for x in self.entries.values()):
                        self.lock.release()
                        yield self.lat.metadata_ns
                        yield self.lock
                        continue
                    break
                yield from self._writeback(e, ctx.lane, critical=True)
            for e in list(self.entries.values()):
                if not e.busy:
                    self._drop(e)
        finally:
            self.lock.release()
        ctx.lap(FLUSH)
        ctx.disposition = "flush"
        self.flush_volumes.append(volume)
        return volume
