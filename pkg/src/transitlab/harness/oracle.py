"""Shadow bookkeeping of every version written, acknowledged and promised
durable, checked against what a recovered device holds."""

from __future__ import annotations

from collections import defaultdict

from ..workload import TORN, decode_payload


class ShadowOracle:
    def __init__(self):
        self.history: dict[int, list[int]] = defaultdict(list)   # dispatch order
        self.acked: dict[int, int] = {}
        self.ack_order: dict[int, list[int]] = defaultdict(list)
        self.acked_durable: dict[int, int] = {}

    def issue(self, lba: int, version: int) -> None:
        self.history[lba].append(version)

    def ack(self, lba: int, version: int, durable: bool = False) -> None:
        if version > self.acked.get(lba, 0):
            self.acked[lba] = version
        self.ack_order[lba].append(version)
        if durable:
            self.mark_durable(lba, version)

    def mark_durable(self, lba: int, version: int) -> None:
        if version > self.acked_durable.get(lba, 0):
            self.acked_durable[lba] = version

    def flush_begin(self) -> dict[int, int]:
        return dict(self.acked)

    def flush_ack(self, snapshot: dict[int, int]) -> None:
        for lba, v in snapshot.items():
            self.mark_durable(lba, v)

    # -- validation ---------------------------------------------------------------
    def check_block(self, lba: int, block: bytes) -> str | None:
        got = decode_payload(block)
        version = 0
        if got is not None:
            stamped, version = got
            if version == TORN:
                return f"lba {lba}: torn block"
            if stamped != lba:
                return f"lba {lba}: holds a block stamped for lba {stamped}"
            if version not in self.history.get(lba, ()):
                return f"lba {lba}: version {version} never written"
        need = self.acked_durable.get(lba, 0)
        if version < need:
            return f"lba {lba}: version {version} older than durable {need}"
        return None

    def validate(self, read_block) -> list[str]:
        """``read_block(lba)`` returns the recovered device's block."""
        problems = []
        for lba in sorted(set(self.history) | set(self.acked_durable)):
            msg = self.check_block(lba, read_block(lba))
            if msg:
                problems.append(msg)
        return problems


def linearization_violations(commits: dict[int, list[int]], ack_order: dict[int, list[int]]) -> list[str]:
    """Every lba's sequence of device commits must be a subsequence of the
    order in which its writes were acknowledged."""
    problems = []
    for lba, seq in commits.items():
        acks = ack_order.get(lba, [])
        pos = {v: i for i, v in enumerate(acks)}
        last = -1
        for v in seq:
            i = pos.get(v)
            if i is None or i <= last:
                # a version may legitimately be committed twice (e.g. written
                # back, then flushed again while still cached)
                if i is not None and i == last:
                    continue
                problems.append(f"lba {lba}: commit of version {v} out of ack order {acks[:8]}")
                break
            last = i
    return problems
