"""Block Translation Table over a :class:`PmemImage`.

Per-arena image layout (little-endian)::

    [InfoHead | map | flog | data blocks | InfoTail]

* map: one u32 pba per external lba
* flog: two 32-byte slots per lane, each ``lba, old_pba, new_pba`` (u64) and
  a trailing u64 commit word = ``seq | crc32(fields, seq) << 2``.  The commit
  word is the last 8 bytes of the entry, so a torn entry never validates.
* every lane owns exactly one free data block

A write goes data -> flog -> map, then the lane adopts the old pba as its new
free block.  Recovery redoes the map update of a lane's newest valid flog
entry when the map still points at that entry's old pba.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Callable

from .pmem import LatencyConfig, MediumError, PmemImage
from .sim import Lock, Signal, run_sync

MAGIC = b"TCLBTT01"
INFO_SIZE = 128
MAP_ENTRY = 4
FLOG_ENTRY = 32
FLOG_SLOTS = 2
MAX_LANES = 256
ARENA_MAX_BYTES = 512 << 30
MAP_LOCKS = 64

_INFO = struct.Struct("<8sIIQQQQQQ")  # magic, block_size, lanes, nblocks, nlba, map, flog, data, tail
_FLOG = struct.Struct("<QQQQ")


class InvalidGeometry(ValueError):
    pass


class CorruptMetadata(RuntimeError):
    pass


DeviceIOError = MediumError


def lanes_for_cores(cores: int) -> int:
    return max(1, min(cores, MAX_LANES))


def _next_seq(seq: int) -> int:
    return seq % 3 + 1


def _commit_word(lba: int, old: int, new: int, seq: int) -> int:
    crc = zlib.crc32(struct.pack("<QQQB", lba, old, new, seq))
    return seq | (crc << 2)


@dataclass(frozen=True)
class FlogEntry:
    lba: int
    old_pba: int
    new_pba: int
    seq: int

    def pack(self) -> bytes:
        return _FLOG.pack(self.lba, self.old_pba, self.new_pba,
                          _commit_word(self.lba, self.old_pba, self.new_pba, self.seq))

    @classmethod
    def unpack(cls, raw: bytes) -> "FlogEntry | None":
        lba, old, new, commit = _FLOG.unpack(raw)
        seq = commit & 3
        if seq == 0 or commit != _commit_word(lba, old, new, seq):
            return None
        return cls(lba, old, new, seq)


def newest(a: FlogEntry | None, b: FlogEntry | None) -> FlogEntry | None:
    if a is None or b is None:
        return a or b
    return b if b.seq == _next_seq(a.seq) else a


@dataclass(frozen=True)
class ArenaLayout:
    base: int
    block_size: int
    lanes: int
    nblocks: int      # data blocks (pbas)
    nlba: int         # external blocks served by this arena
    map_off: int
    flog_off: int
    data_off: int
    tail_off: int

    @property
    def size(self) -> int:
        return self.tail_off + INFO_SIZE - self.base

    @classmethod
    def plan(cls, base: int, nblocks: int, lanes: int, block_size: int) -> "ArenaLayout":
        def up(x, a=64):
            return (x + a - 1) // a * a
        nlba = nblocks - lanes
        map_off = base + INFO_SIZE
        flog_off = up(map_off + nlba * MAP_ENTRY)
        data_off = up(flog_off + lanes * FLOG_SLOTS * FLOG_ENTRY, max(64, min(block_size, 4096)))
        tail_off = data_off + nblocks * block_size
        return cls(base, block_size, lanes, nblocks, nlba, map_off, flog_off, data_off, tail_off)

    def info_bytes(self) -> bytes:
        body = _INFO.pack(MAGIC, self.block_size, self.lanes, self.nblocks, self.nlba,
                          self.map_off - self.base, self.flog_off - self.base,
                          self.data_off - self.base, self.tail_off - self.base)
        return body + struct.pack("<I", zlib.crc32(body)) + bytes(INFO_SIZE - len(body) - 4)

    @classmethod
    def parse_info(cls, raw: bytes, base: int) -> "ArenaLayout | None":
        body = raw[:_INFO.size]
        (crc,) = struct.unpack_from("<I", raw, _INFO.size)
        if crc != zlib.crc32(body):
            return None
        magic, bs, lanes, nblocks, nlba, m, f, d, t = _INFO.unpack(body)
        if magic != MAGIC:
            return None
        return cls(base, bs, lanes, nblocks, nlba, base + m, base + f, base + d, base + t)


def plan_arenas(total_blocks: int, lanes: int, block_size: int,
                arena_max_bytes: int = ARENA_MAX_BYTES) -> list[ArenaLayout]:
    per_arena = max(lanes + 1, arena_max_bytes // block_size)
    layouts = []
    base = 0
    left = total_blocks
    while left > 0:
        n = min(left, per_arena)
        if n < lanes + 1:
            if not layouts:
                raise InvalidGeometry(f"{total_blocks} blocks cannot host {lanes} lanes")
            break  # tail too small for its own arena: left unused
        lay = ArenaLayout.plan(base, n, lanes, block_size)
        layouts.append(lay)
        base += lay.size
        left -= n
    return layouts


def image_bytes_for(total_blocks: int, lanes: int, block_size: int,
                    arena_max_bytes: int = ARENA_MAX_BYTES) -> int:
    lays = plan_arenas(total_blocks, lanes, block_size, arena_max_bytes)
    return lays[-1].base + lays[-1].size


class Arena:
    def __init__(self, pmem: PmemImage, layout: ArenaLayout, first_lba: int):
        self.pmem = pmem
        self.layout = layout
        self.first_lba = first_lba
        lanes = layout.lanes
        self.free = [0] * lanes
        self.flog_next = [0] * lanes      # slot index the next entry goes to
        self.flog_seq = [0] * lanes       # seq of the newest entry
        self.lane_locks = [Lock(f"lane{i}") for i in range(lanes)]
        self.map_locks = [Lock(f"map{i}") for i in range(MAP_LOCKS)]
        self.rtt: list[int | None] = [None] * lanes
        self.rtt_signal = Signal("rtt")

    # -- raw metadata access ---------------------------------------------
    def map_get(self, lba: int) -> int:
        (pba,) = struct.unpack("<I", self.pmem.peek(self.layout.map_off + lba * MAP_ENTRY, MAP_ENTRY))
        return pba

    def _map_bytes(self, pba: int) -> bytes:
        return struct.pack("<I", pba)

    def flog_off(self, lane: int, slot: int) -> int:
        return self.layout.flog_off + (lane * FLOG_SLOTS + slot) * FLOG_ENTRY

    def data_off(self, pba: int) -> int:
        return self.layout.data_off + pba * self.layout.block_size

    def read_flog(self, lane: int) -> tuple[FlogEntry | None, FlogEntry | None]:
        return tuple(FlogEntry.unpack(self.pmem.peek(self.flog_off(lane, s), FLOG_ENTRY))
                     for s in range(FLOG_SLOTS))

    # -- format / recovery --------------------------------------------------
    def format(self) -> None:
        lay = self.layout
        pm = self.pmem
        info = lay.info_bytes()
        pm.write(lay.base, info)
        pm.write(lay.map_off, b"".join(struct.pack("<I", i) for i in range(lay.nlba)))
        for lane in range(lay.lanes):
            free = lay.nlba + lane
            pm.write(self.flog_off(lane, 0), FlogEntry(0, free, free, 1).pack())
            pm.write(self.flog_off(lane, 1), bytes(FLOG_ENTRY))
            self.free[lane] = free
            self.flog_next[lane] = 1
            self.flog_seq[lane] = 1
        pm.write(lay.tail_off, info)

    def recover(self) -> list[int]:
        """Rebuild lane state from the flog; returns the lbas whose map was redone."""
        redone = []
        for lane in range(self.layout.lanes):
            a, b = self.read_flog(lane)
            ent = newest(a, b)
            if ent is None:
                raise CorruptMetadata(f"lane {lane}: no valid flog entry")
            if ent.lba < self.layout.nlba and ent.old_pba != ent.new_pba:
                cur = self.map_get(ent.lba)
                if cur != ent.new_pba and cur == ent.old_pba:
                    self.pmem.write(self.layout.map_off + ent.lba * MAP_ENTRY, self._map_bytes(ent.new_pba))
                    redone.append(self.first_lba + ent.lba)
            self.free[lane] = ent.old_pba
            self.flog_seq[lane] = ent.seq
            self.flog_next[lane] = 1 if ent is a else 0
        return redone

    # -- timed data path (generators) ---------------------------------------
    def write(self, lba: int, data, lane: int, on_commit: Callable | None = None):
        lay = self.layout
        pm = self.pmem
        lane_lock = self.lane_locks[lane]
        yield lane_lock
        try:
            free = self.free[lane]
            # a reader may still be loading the block we are about to reuse
            while free in self.rtt:
                yield self.rtt_signal
            off = self.data_off(free)
            pm.begin(lane, off, data)
            yield pm.write_cost(len(data))
            pm.write(off, data)
            pm.end(lane)
            mlock = self.map_locks[lba % MAP_LOCKS]
            yield mlock
            try:
                old = self.map_get(lba)
                seq = _next_seq(self.flog_seq[lane])
                slot = self.flog_next[lane]
                entry = FlogEntry(lba, old, free, seq).pack()
                foff = self.flog_off(lane, slot)
                pm.begin(lane, foff, entry)
                yield pm.write_cost(FLOG_ENTRY)
                pm.write(foff, entry)
                pm.end(lane)
                self.flog_seq[lane] = seq
                self.flog_next[lane] = 1 - slot
                moff = lay.map_off + lba * MAP_ENTRY
                mbytes = self._map_bytes(free)
                pm.begin(lane, moff, mbytes)
                yield pm.write_cost(MAP_ENTRY)
                pm.write(moff, mbytes)
                pm.end(lane)
                self.free[lane] = old
                if on_commit is not None:
                    on_commit(self.first_lba + lba, data)
            finally:
                mlock.release()
        finally:
            lane_lock.release()

    def read(self, lba: int, lane: int):
        lane_lock = self.lane_locks[lane]
        yield lane_lock
        try:
            while True:
                pba = self.map_get(lba)
                self.rtt[lane] = pba
                if self.map_get(lba) == pba:
                    break
            n = self.layout.block_size
            yield self.pmem.read_cost(n)
            data = self.pmem.read(self.data_off(pba), n)
            self.rtt[lane] = None
            self.rtt_signal.notify_all()
            return data
        finally:
            if self.rtt[lane] is not None:
                self.rtt[lane] = None
                self.rtt_signal.notify_all()
            lane_lock.release()


@dataclass
class DeviceLedger:
    writes_critical: int = 0
    writes_background: int = 0
    reads_critical: int = 0
    reads_background: int = 0
    errors: int = 0

    @property
    def writes(self) -> int:
        return self.writes_critical + self.writes_background


class BttDevice:
    """lba-indexed block device with block-level write atomicity."""

    def __init__(self, pmem: PmemImage, layouts: list[ArenaLayout]):
        self.pmem = pmem
        self.layouts = layouts
        self.block_size = layouts[0].block_size
        self.lanes = layouts[0].lanes
        self.arenas: list[Arena] = []
        first = 0
        for lay in layouts:
            self.arenas.append(Arena(pmem, lay, first))
            first += lay.nlba
        self.nlba = first
        self._arena_span = layouts[0].nlba
        self.ledger = DeviceLedger()
        self.fg_inflight = 0
        self.idle_signal = Signal("device-idle")
        self.on_commit: Callable | None = None

    # -- construction -------------------------------------------------------
    @classmethod
    def format(cls, pmem: PmemImage | None, total_blocks: int, lane_count: int,
               cores: int | None = None, block_size: int = 4096,
               latency: LatencyConfig | None = None,
               arena_max_bytes: int = ARENA_MAX_BYTES) -> "BttDevice":
        if lane_count < 1:
            raise InvalidGeometry("need at least one lane")
        limit = lanes_for_cores(cores) if cores is not None else MAX_LANES
        lane_count = min(lane_count, limit)
        if total_blocks < lane_count + 1:
            raise InvalidGeometry(f"total_blocks={total_blocks} < lanes+1={lane_count + 1}")
        layouts = plan_arenas(total_blocks, lane_count, block_size, arena_max_bytes)
        need = layouts[-1].base + layouts[-1].size
        if pmem is None:
            pmem = PmemImage(need, block_size=block_size, latency=latency)
        elif pmem.capacity_bytes < need:
            raise InvalidGeometry(f"image of {pmem.capacity_bytes} B too small, need {need} B")
        dev = cls(pmem, layouts)
        for arena in dev.arenas:
            arena.format()
        return dev

    @classmethod
    def recover(cls, pmem: PmemImage, check: bool = True) -> "BttDevice":
        layouts = []
        base = 0
        while base + INFO_SIZE <= pmem.capacity_bytes:
            head = ArenaLayout.parse_info(pmem.peek(base, INFO_SIZE), base)
            lay = head
            if head is None and layouts:
                break  # no further arena
            if head is None:
                lay = cls._find_tail(pmem, base)
                if lay is None:
                    raise CorruptMetadata("both info blocks fail validation")
                pmem.write(base, lay.info_bytes())
            else:
                tail = ArenaLayout.parse_info(pmem.peek(head.tail_off, INFO_SIZE), base) \
                    if head.tail_off + INFO_SIZE <= pmem.capacity_bytes else None
                if tail != head:
                    pmem.write(head.tail_off, head.info_bytes())
            layouts.append(lay)
            base += lay.size
        if not layouts:
            raise CorruptMetadata("no arena found")
        dev = cls(pmem, layouts)
        dev.redone = []
        for arena in dev.arenas:
            dev.redone.extend(arena.recover())
        if check:
            problems = dev.check_permutation()
            if problems:
                raise CorruptMetadata("; ".join(problems))
        return dev

    @staticmethod
    def _find_tail(pmem: PmemImage, base: int) -> ArenaLayout | None:
        # the head is unreadable; scan for a tail whose recorded base matches
        step = 64
        off = base + INFO_SIZE
        while off + INFO_SIZE <= pmem.capacity_bytes:
            lay = ArenaLayout.parse_info(pmem.peek(off, INFO_SIZE), base)
            if lay is not None and lay.tail_off == off:
                return lay
            off += step
        return None

    def manifest(self) -> dict:
        return {
            "block_size": self.block_size,
            "lanes": self.lanes,
            "user_blocks": self.nlba,
            "image_bytes": self.pmem.capacity_bytes,
            "arenas": [asdict(lay) for lay in self.layouts],
        }

    # -- helpers --------------------------------------------------------------
    def _locate(self, lba: int) -> tuple[Arena, int]:
        if not 0 <= lba < self.nlba:
            raise IndexError(f"lba {lba} out of range 0..{self.nlba - 1}")
        if len(self.arenas) == 1:
            return self.arenas[0], lba
        idx = lba // self._arena_span
        arena = self.arenas[idx]
        return arena, lba - arena.first_lba

    def lane_of(self, worker: int) -> int:
        return worker % self.lanes

    # -- timed operations -------------------------------------------------------
    def write(self, lba: int, data, lane: int, critical: bool = True):
        if len(data) != self.block_size:
            raise ValueError(f"btt_write needs exactly one {self.block_size} B block")
        arena, local = self._locate(lba)
        if critical:
            self.fg_inflight += 1
        try:
            yield from arena.write(local, data, lane % self.lanes, self.on_commit)
        except MediumError:
            self.ledger.errors += 1
            raise
        finally:
            if critical:
                self.fg_inflight -= 1
                if self.fg_inflight == 0:
                    self.idle_signal.notify_all()
        if critical:
            self.ledger.writes_critical += 1
        else:
            self.ledger.writes_background += 1

    def read(self, lba: int, lane: int, critical: bool = True):
        arena, local = self._locate(lba)
        if critical:
            self.fg_inflight += 1
        try:
            data = yield from arena.read(local, lane % self.lanes)
        finally:
            if critical:
                self.fg_inflight -= 1
                if self.fg_inflight == 0:
                    self.idle_signal.notify_all()
        if critical:
            self.ledger.reads_critical += 1
        else:
            self.ledger.reads_background += 1
        return data

    # untimed conveniences for tools and tests
    def write_sync(self, lba: int, data, lane: int = 0) -> None:
        run_sync(self.write(lba, data, lane))

    def read_sync(self, lba: int, lane: int = 0) -> bytes:
        return run_sync(self.read(lba, lane))

    def peek_block(self, lba: int) -> bytes:
        arena, local = self._locate(lba)
        return self.pmem.peek(arena.data_off(arena.map_get(local)), self.block_size)

    # -- invariants -------------------------------------------------------------
    def check_permutation(self) -> list[str]:
        problems = []
        for i, arena in enumerate(self.arenas):
            lay = arena.layout
            mapped = [arena.map_get(l) for l in range(lay.nlba)]
            everything = mapped + list(arena.free)
            if sorted(everything) != list(range(lay.nblocks)):
                seen = set()
                dup = sorted({p for p in everything if p in seen or seen.add(p)})
                missing = sorted(set(range(lay.nblocks)) - set(everything))
                problems.append(f"arena {i}: map+free not a permutation (dup={dup[:5]}, missing={missing[:5]})")
        return problems

    def check_info(self) -> list[str]:
        problems = []
        for i, lay in enumerate(self.layouts):
            if self.pmem.peek(lay.base, INFO_SIZE) != self.pmem.peek(lay.tail_off, INFO_SIZE):
                problems.append(f"arena {i}: info blocks differ")
        return problems
