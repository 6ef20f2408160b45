"""DRAM cache substrate for I/O transit: slots, hashed cache sets with
write-back queues, a global free set and a pool of eviction workers.

Slot life cycle::

    Free -> Pending -> Valid -> Evicting -> Free
             ^           |         |
             +-----------+---------+   (write hits)

Every state change and slab copy of one slot happens while holding that
slot's guard.  WBQ and free-set updates happen between yields, which makes
them atomic under the actor runtime.
"""

from __future__ import annotations

from collections import OrderedDict, deque

from .pmem import MediumError
from .sim import Lock, Signal

FREE, PENDING, VALID, EVICTING = "Free", "Pending", "Valid", "Evicting"
OUTLIER = -1

LEGAL = {
    (FREE, PENDING), (PENDING, VALID), (VALID, EVICTING), (EVICTING, FREE),
    (VALID, PENDING), (EVICTING, PENDING),
    # device error during write-back: the slot keeps its data
    (EVICTING, VALID),
}


class CacheFull(RuntimeError):
    pass


class SlotHeader:
    __slots__ = ("slot_number", "lba", "state", "linked", "claimed", "guard", "seq")

    def __init__(self, slot_number: int):
        self.slot_number = slot_number
        self.lba = OUTLIER
        self.state = FREE
        self.linked = False     # sitting in its set's WBQ
        self.claimed = False    # an evictor owns the next write-back
        self.guard = Lock(f"slot{slot_number}")
        self.seq = 0            # write sequence of the bytes in the slab

    def __repr__(self):
        return f"<slot {self.slot_number} lba={self.lba} {self.state}>"


class CacheSet:
    __slots__ = ("set_id", "resident", "wbq", "ready")

    def __init__(self, set_id: int):
        self.set_id = set_id
        self.resident: dict[int, SlotHeader] = {}
        self.wbq: OrderedDict[int, SlotHeader] = OrderedDict()
        self.ready = False


class CacheEngine:
    def __init__(self, device, num_slots: int, num_sets: int, latency,
                 workers: int = 4, eager: bool = True, strict: bool = False,
                 lane_offset: int = 1):
        if num_slots < 1 or num_sets < 1:
            raise ValueError("need at least one slot and one set")
        self.device = device
        self.block_size = device.block_size
        self.lat = latency
        self.num_slots = num_slots
        self.num_sets = num_sets
        self.workers = workers
        self.eager = eager
        self.strict = strict
        # workers take the lanes after those of the foreground jobs
        self.lane_offset = lane_offset
        self.slab = bytearray(num_slots * self.block_size)
        self.headers = [SlotHeader(i) for i in range(num_slots)]
        self.free: list[SlotHeader] = list(reversed(self.headers))
        self.sets = [CacheSet(i) for i in range(num_sets)]
        self.ready_sets: deque[int] = deque()
        self.work_signal = Signal("eviction-work")
        self.progress = Signal("eviction-progress")
        self.free_signal = Signal("slot-freed")
        self.durable_seq: dict[int, int] = {}
        # lbas with a device write in flight that bypassed the cache
        self.inflight_direct: dict = {}
        self._seq = 0
        self.flush_demand = 0
        self.idle_notifies = 0
        self.evictions = 0
        self.eviction_errors = 0
        self.violations: list[str] = []
        self.transitions = 0

    # -- bookkeeping ----------------------------------------------------------
    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def set_state(self, sh: SlotHeader, new: str) -> None:
        if (sh.state, new) not in LEGAL:
            msg = f"illegal transition {sh.state}->{new} on slot {sh.slot_number}"
            self.violations.append(msg)
            if self.strict:
                raise AssertionError(msg)
        sh.state = new
        self.transitions += 1

    def find_set_by_hash(self, lba: int) -> int:
        return lba % self.num_sets

    def lookup(self, set_id: int, lba: int) -> SlotHeader | None:
        return self.sets[set_id].resident.get(lba)

    def is_cache_full(self) -> bool:
        return not self.free

    def allocate_slot_from_free_set(self, set_id: int) -> SlotHeader:
        if not self.free:
            raise CacheFull("free set empty")
        return self.free.pop()

    def slot_bytes(self, sh: SlotHeader) -> bytes:
        off = sh.slot_number * self.block_size
        return bytes(self.slab[off:off + self.block_size])

    def write_slot(self, set_id: int, sh: SlotHeader, lba: int, data, final_state: str = VALID):
        """Copy one block into the slot; caller holds the guard, slot is Pending."""
        assert sh.state == PENDING and sh.guard.owner is not None
        yield self.lat.dram_write_ns_per_block
        off = sh.slot_number * self.block_size
        self.slab[off:off + self.block_size] = data
        sh.lba = lba
        sh.seq = self.next_seq()
        self.set_state(sh, final_state)

    def enqueue(self, sh: SlotHeader, set_id: int) -> None:
        if sh.linked or sh.claimed:
            return
        cs = self.sets[set_id]
        cs.wbq[sh.slot_number] = sh
        sh.linked = True
        if not cs.ready:
            cs.ready = True
            self.ready_sets.append(set_id)

    def unlink(self, sh: SlotHeader) -> None:
        if sh.linked:
            del self.sets[sh.lba % self.num_sets].wbq[sh.slot_number]
            sh.linked = False

    def notify_eager_eviction(self, sh: SlotHeader | None = None, set_id: int | None = None) -> None:
        self.idle_notifies += 1
        if not self.eager or self.workers == 0:
            return
        self.work_signal.notify(1)

    def wbq_len(self) -> int:
        return sum(len(s.wbq) for s in self.sets)

    def dirty_count(self) -> int:
        return sum(1 for s in self.sets for sh in s.resident.values()
                   if sh.seq > self.durable_seq.get(sh.lba, 0))

    # -- eviction -------------------------------------------------------------
    def pick_victim(self) -> SlotHeader | None:
        """Claim the head of the next non-empty WBQ, round-robin over sets."""
        while self.ready_sets:
            set_id = self.ready_sets.popleft()
            cs = self.sets[set_id]
            if not cs.wbq:
                cs.ready = False
                continue
            _, sh = cs.wbq.popitem(last=False)
            sh.linked = False
            sh.claimed = True
            if cs.wbq:
                self.ready_sets.append(set_id)
            else:
                cs.ready = False
            return sh
        return None

    def claim(self, sh: SlotHeader) -> bool:
        if sh.claimed or sh.state == FREE:
            return False
        self.unlink(sh)
        sh.claimed = True
        return True

    def evict(self, sh: SlotHeader, lane: int, critical: bool = False):
        """Write a claimed slot back.  Returns True once its bytes are durable."""
        yield sh.guard
        lba = sh.lba
        self.set_state(sh, EVICTING)
        data = self.slot_bytes(sh)
        seq = sh.seq
        try:
            yield from self.device.write(lba, data, lane, critical=critical)
        except MediumError:
            self.eviction_errors += 1
            self.set_state(sh, VALID)
            sh.claimed = False
            self.enqueue(sh, lba % self.num_sets)
            sh.guard.release()
            self.progress.notify_all()
            return False
        self.evictions += 1
        if seq > self.durable_seq.get(lba, 0):
            self.durable_seq[lba] = seq
        sh.claimed = False
        if sh.guard.waiters:
            # a writer hit this slot while it was being written back; it
            # reclaims the slot (Evicting -> Pending) when the guard reaches it
            sh.guard.release()
        else:
            self.set_state(sh, FREE)
            del self.sets[lba % self.num_sets].resident[lba]
            sh.lba = OUTLIER
            self.free.append(sh)
            sh.guard.release()
            self.free_signal.notify(1)
        self.progress.notify_all()
        return True

    def eviction_worker_step(self, worker_id: int):
        """Evict one slot if any is queued; returns its lba or None."""
        sh = self.pick_victim()
        if sh is None:
            return None
        lba = sh.lba
        lane = (self.lane_offset + worker_id) % self.device.lanes
        yield from self.evict(sh, lane, critical=False)
        return lba

    def eviction_worker(self, worker_id: int):
        while True:
            if not self.eager and self.flush_demand == 0:
                yield self.work_signal
                continue
            lba = yield from self.eviction_worker_step(worker_id)
            if lba is None:
                yield self.work_signal

    def start(self, rt) -> list:
        return [rt.spawn(self.eviction_worker(w), f"evict{w}", kind="bg") for w in range(self.workers)]

    # -- flush ----------------------------------------------------------------
    def flush_targets(self) -> dict[int, int]:
        return {sh.lba: sh.seq for s in self.sets for sh in s.resident.values()
                if sh.seq > self.durable_seq.get(sh.lba, 0)}

    def flush_all(self, wait_for_device: bool = True, lane: int = 0, targets: dict | None = None):
        """Make every non-durable cached block at call time durable.

        Returns the number of such blocks.  The calling actor helps by
        writing back queued targets itself while workers are busy.
        """
        if targets is None:
            targets = self.flush_targets()
        volume = len(targets)
        if not targets:
            return 0
        self.flush_demand += 1
        self.work_signal.notify_all()
        try:
            while wait_for_device:
                remaining = [lba for lba, seq in targets.items() if self.durable_seq.get(lba, 0) < seq]
                if not remaining:
                    break
                mine = None
                for lba in remaining:
                    sh = self.sets[lba % self.num_sets].resident.get(lba)
                    if sh is not None and sh.linked and sh.state == VALID and not sh.claimed:
                        mine = sh
                        break
                if mine is not None and self.claim(mine):
                    yield from self.evict(mine, lane, critical=True)
                else:
                    yield self.progress
        finally:
            self.flush_demand -= 1
        return volume

    # -- invariants -------------------------------------------------------------
    def check_invariants(self) -> list[str]:
        problems = []
        seen: dict[int, int] = {}
        resident = 0
        for cs in self.sets:
            for lba, sh in cs.resident.items():
                resident += 1
                if sh.lba != lba:
                    problems.append(f"set {cs.set_id}: key {lba} holds slot with lba {sh.lba}")
                if lba % self.num_sets != cs.set_id:
                    problems.append(f"lba {lba} resident in wrong set {cs.set_id}")
                if lba in seen:
                    problems.append(f"lba {lba} in slots {seen[lba]} and {sh.slot_number}")
                seen[lba] = sh.slot_number
                if sh.state == FREE:
                    problems.append(f"free slot {sh.slot_number} resident")
            for sh in cs.wbq.values():
                if sh.state not in (VALID, PENDING) or not sh.linked:
                    problems.append(f"wbq of set {cs.set_id} links {sh!r}")
        for sh in self.free:
            if sh.state != FREE or sh.lba != OUTLIER:
                problems.append(f"free set holds {sh!r}")
        if len(self.free) + resident != self.num_slots:
            problems.append(f"conservation: free {len(self.free)} + resident {resident} != {self.num_slots}")
        if len({sh.slot_number for sh in self.free}) != len(self.free):
            problems.append("slot listed twice in free set")
        return problems + self.violations
