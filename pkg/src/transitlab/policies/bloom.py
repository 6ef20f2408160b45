"""Two-stage Bloom filter used as a hot/cold detector.

An lba is hot once it has been inserted at least twice: the first insert
sets its bits in ``seen``, a later one sets them in ``hot``.  False
positives make some cold lbas look hot, never the reverse.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class HotColdBloom:
    def __init__(self, nbits: int, hashes: int = 2, reset_interval: int = 0):
        if nbits < 8:
            nbits = 8
        self.nbits = nbits
        self.hashes = hashes
        self.reset_interval = reset_interval
        self.seen = bytearray(nbits)
        self.hot = bytearray(nbits)
        self.inserts = 0
        self.resets = 0

    @classmethod
    def for_slots(cls, num_slots: int, reset_interval: int = 0) -> "HotColdBloom":
        # one byte per slot per stage: the 2 B/slot budget
        return cls(8 * num_slots, 2, reset_interval)

    def _positions(self, lba: int) -> list[int]:
        h = splitmix64(lba)
        h1, h2 = h & 0xFFFFFFFF, (h >> 32) | 1
        return [(h1 + i * h2) % self.nbits for i in range(self.hashes)]

    def insert(self, lba: int) -> None:
        pos = self._positions(lba)
        if all(self.seen[p] for p in pos):
            for p in pos:
                self.hot[p] = 1
        else:
            for p in pos:
                self.seen[p] = 1
        self.inserts += 1
        if self.reset_interval and self.inserts % self.reset_interval == 0:
            self.reset()

    def is_hot(self, lba: int) -> bool:
        return all(self.hot[p] for p in self._positions(lba))

    def reset(self) -> None:
        self.seen = bytearray(self.nbits)
        self.hot = bytearray(self.nbits)
        self.resets += 1
