"""I/O transit caching: buffer, then immediately write back in the background;
bypass the cache when it is full instead of stalling."""

from __future__ import annotations

from ..cache import EVICTING, FREE, PENDING, VALID, CacheEngine
from ..sim import Event
from .base import BYPASS, ENQUEUE, EVICT_WRITE, FLUSH, METADATA, WRITE_ONLY, DIRECT, Policy


class CaitiPolicy(Policy):
    name = "caiti"

    def __init__(self, device, latency, num_slots: int, num_sets: int, workers: int = 4,
                 eager: bool = True, bypass: bool = True, strict: bool = False,
                 lane_offset: int = 1):
        super().__init__(device, latency)
        self.engine = CacheEngine(device, num_slots, num_sets, latency, workers=workers,
                                  eager=eager, strict=strict, lane_offset=lane_offset)
        self.bypass = bypass
        if not eager:
            self.name = "caiti-woee"
        elif not bypass:
            self.name = "caiti-wobp"

    def start(self, rt):
        return self.engine.start(rt)

    def handle_write(self, lba, data, flags, ctx):
        eng = self.engine
        set_id = eng.find_set_by_hash(lba)
        cs = eng.sets[set_id]
        yield self.lat.metadata_ns
        stalled = False
        while True:
            direct = eng.inflight_direct.get(lba)
            if direct is not None:
                # keep device commits for this lba in ack order
                yield direct
                continue
            sh = cs.resident.get(lba)
            if sh is not None:
                yield sh.guard
                if sh.lba != lba or sh.state == FREE:
                    sh.guard.release()
                    continue
                ctx.lap(METADATA)
                # Valid hit, or an Evicting slot handed over once its write-back finished
                eng.set_state(sh, PENDING)
                yield from eng.write_slot(set_id, sh, lba, data)
                ctx.lap(EVICT_WRITE if stalled else WRITE_ONLY)
                break
            if not eng.is_cache_full():
                sh = eng.allocate_slot_from_free_set(set_id)
                sh.lba = lba
                sh.seq = 0
                cs.resident[lba] = sh
                yield sh.guard
                eng.set_state(sh, PENDING)
                ctx.lap(METADATA)
                yield from eng.write_slot(set_id, sh, lba, data)
                ctx.lap(EVICT_WRITE if stalled else WRITE_ONLY)
                break
            if self.bypass:
                done = Event()
                eng.inflight_direct[lba] = done
                ctx.lap(METADATA)
                try:
                    yield from self.device.write(lba, data, ctx.lane, critical=True)
                finally:
                    del eng.inflight_direct[lba]
                    done.set()
                eng.durable_seq[lba] = eng.next_seq()
                self.counters["bypass"] += 1
                ctx.lap(BYPASS)
                ctx.disposition = "conditional_bypass"
                return
            # without bypass the write has to make room first
            stalled = True
            victim = eng.pick_victim()
            ctx.lap(METADATA)
            if victim is None:
                yield eng.free_signal
            else:
                yield from eng.evict(victim, ctx.lane, critical=True)
                self.counters["critical_evictions"] += 1
            ctx.lap(EVICT_WRITE)
        ctx.disposition = "cache_eviction_and_write" if stalled else "cache_write_only"
        seq = sh.seq
        yield self.lat.metadata_ns
        eng.enqueue(sh, set_id)
        sh.guard.release()
        ctx.lap(ENQUEUE)
        eng.notify_eager_eviction(sh, set_id)
        if flags.fua:
            yield from eng.flush_all(True, ctx.lane, targets={lba: seq})
            ctx.lap(FLUSH)

    def handle_read(self, lba, flags, ctx):
        eng = self.engine
        cs = eng.sets[eng.find_set_by_hash(lba)]
        yield self.lat.metadata_ns
        while True:
            sh = cs.resident.get(lba)
            if sh is not None and sh.state in (VALID, EVICTING):
                data = eng.slot_bytes(sh)
                ctx.lap(METADATA)
                yield self.lat.dram_read_ns_per_block
                ctx.disposition = "read_hit"
                return data
            if sh is not None and sh.state == PENDING and sh.seq > eng.durable_seq.get(lba, 0):
                # the slot still holds an acked version the device lacks
                yield sh.guard
                sh.guard.release()
                continue
            break
        ctx.lap(METADATA)
        data = yield from self.device.read(lba, ctx.lane)
        ctx.lap(DIRECT)
        ctx.disposition = "read_miss"
        return data

    def handle_flush(self, flags, ctx):
        ctx.disposition = "flush"
        volume = 0
        if flags.preflush or flags.fua:
            volume = yield from self.engine.flush_all(True, ctx.lane)
        ctx.lap(FLUSH)
        self.flush_volumes.append(volume)
        return volume

    def check_invariants(self):
        return self.engine.check_invariants()

    def cached_blocks(self):
        return self.engine.num_slots - len(self.engine.free)
