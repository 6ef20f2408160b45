"""Hot/cold aware staging cache that writes cold dirty blocks back while the
device has no foreground work."""

from __future__ import annotations

from collections import OrderedDict

from ..sim import Signal
from .base import EVICT_WRITE, FLUSH, METADATA, WRITE_ONLY
from .bloom import HotColdBloom
from .staging import Entry, StagingPolicy

SCAN_LIMIT = 64


class CoactivePolicy(StagingPolicy):
    name = "coactive"

    def __init__(self, device, latency, num_slots, lane_offset=1, bloom_reset_interval: int | None = None):
        super().__init__(device, latency, num_slots, lane_offset)
        if bloom_reset_interval is None:
            bloom_reset_interval = num_slots
        self.bloom = HotColdBloom.for_slots(num_slots, bloom_reset_interval)
        # both lists are kept in recency order, oldest first; self.entries is the index
        self.dirty: OrderedDict[int, Entry] = OrderedDict()
        self.clean: OrderedDict[int, Entry] = OrderedDict()
        self.dirty_added = Signal("coa-dirty")
        self.idle_writebacks = 0
        self.idle_waits = 0

    def start(self, rt):
        return [rt.spawn(self.idle_daemon(), "coa-idle", kind="bg")]

    # -- list maintenance ---------------------------------------------------------
    def _mark_dirty(self, e: Entry) -> None:
        self.clean.pop(e.lba, None)
        self.dirty[e.lba] = e
        self.dirty.move_to_end(e.lba)

    def _mark_clean(self, e: Entry) -> None:
        if self.dirty.pop(e.lba, None) is not None:
            self.clean[e.lba] = e

    def _insert(self, lba):
        # holds no data yet; it moves to the dirty list once the copy lands
        e = super()._insert(lba)
        self.clean[lba] = e
        return e

    def _drop(self, e):
        self.dirty.pop(e.lba, None)
        self.clean.pop(e.lba, None)
        super()._drop(e)

    def _writeback(self, e, lane, critical):
        yield from super()._writeback(e, lane, critical)
        if not e.dirty and self.entries.get(e.lba) is e:
            self._mark_clean(e)

    def _hit(self, e, data):
        yield from super()._hit(e, data)
        self._mark_dirty(e)

    def _fill(self, lba, data):
        yield from super()._fill(lba, data)
        self._mark_dirty(self.entries[lba])
        self.dirty_added.notify(1)

    def make_room(self, lane):
        victim = None
        for n, e in enumerate(self.clean.values()):
            if not self.bloom.is_hot(e.lba):
                victim = e
                break
            if n >= SCAN_LIMIT:
                break
        if victim is None and self.clean:
            victim = next(iter(self.clean.values()))
        if victim is not None:
            self._drop(victim)
            return False
        victim = next((e for e in self.dirty.values() if not e.busy), None)
        while victim is None:
            # only the idle daemon's block is left; it turns clean shortly
            self.lock.release()
            yield self.lat.metadata_ns
            yield self.lock
            if self.clean:
                self._drop(next(iter(self.clean.values())))
                return True
            victim = next((e for e in self.dirty.values() if not e.busy), None)
        yield from self._writeback(victim, lane, critical=True)
        self._drop(victim)
        return True

    def handle_write(self, lba, data, flags, ctx):
        # hot/cold classification comes before the cache proper
        yield self.lat.metadata_ns
        self.bloom.insert(lba)
        ctx.lap(METADATA)
        yield from super().handle_write(lba, data, flags, ctx)

    def flush_locked(self, lane):
        for e in list(self.dirty.values()):
            if not e.busy:
                yield from self._writeback(e, lane, critical=True)

    def handle_flush(self, flags, ctx):
        yield self.lock
        try:
            volume = len(self.dirty)
            while self.dirty:
                e = next((x for x in self.dirty.values() if not x.busy), None)
                if e is None:
                    # the idle daemon is mid write-back; let it finish
                    self.lock.release()
                    yield self.lat.metadata_ns
                    yield self.lock
                    continue
                yield from self._writeback(e, ctx.lane, critical=True)
        finally:
            self.lock.release()
        ctx.lap(FLUSH)
        ctx.disposition = "flush"
        self.flush_volumes.append(volume)
        return volume

    # -- idle write-back ------------------------------------------------------------
    def _cold_dirty(self) -> Entry | None:
        for n, e in enumerate(self.dirty.values()):
            if n >= SCAN_LIMIT:
                break
            if not e.busy and not self.bloom.is_hot(e.lba):
                return e
        return None

    def coactive_idle_step(self, lane: int):
        """Write back one cold dirty block if the device is idle.  Returns the
        lba written, or None."""
        if self.device.fg_inflight:
            return None
        yield self.lock
        e = self._cold_dirty()
        self.lock.release()
        if e is None:
            return None
        yield from self._writeback(e, lane, critical=False)
        self.idle_writebacks += 1
        return e.lba

    def idle_daemon(self):
        lane = self.lane_offset % self.device.lanes
        while True:
            if self.device.fg_inflight:
                self.idle_waits += 1
                yield self.device.idle_signal
                continue
            lba = yield from self.coactive_idle_step(lane)
            if lba is None and not self.device.fg_inflight:
                yield self.dirty_added

    def check_invariants(self):
        problems = super().check_invariants()
        d, c = set(self.dirty), set(self.clean)
        if d & c:
            problems.append(f"lbas on both lists: {sorted(d & c)[:5]}")
        if d | c != set(self.entries):
            problems.append("dirty and clean lists do not cover the cache")
        for lba, e in self.dirty.items():
            if not e.dirty and not e.busy:
                problems.append(f"clean entry {lba} on dirty list")
        return problems
