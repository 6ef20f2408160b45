"""Crash-injection testing.

Two drivers share the same check (recover, then compare every block with
the shadow oracle):

* ``btt_crash_enumeration`` explores every interleaving of a few concurrent
  BTT writers and, for each schedule, every prefix of the medium's write
  sequence with every aligned tear of the interrupted write.
* ``crash_test`` runs a full policy stack on a small seeded workload and
  cuts power at a random medium write.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..btt import BttDevice, CorruptMetadata
from ..pmem import PmemImage
from ..sim import explore
from ..workload import make_payload
from .config import Config
from .oracle import ShadowOracle


@dataclass
class CrashVerdict:
    runs: int = 0
    crash_points: int = 0
    images_checked: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def merge(self, other: "CrashVerdict") -> "CrashVerdict":
        return CrashVerdict(self.runs + other.runs, self.crash_points + other.crash_points,
                            self.images_checked + other.images_checked, self.violations + other.violations)


def recover_and_check(image: bytes, block_size: int, oracle: ShadowOracle, check_idempotent: bool = True) -> list[str]:
    pm = PmemImage(len(image), block_size)
    pm.persisted[:] = image
    try:
        dev = BttDevice.recover(pm)
    except CorruptMetadata as exc:
        return [f"recovery failed: {exc}"]
    problems = oracle.validate(dev.peek_block)
    problems += dev.check_info()
    if check_idempotent:
        once = pm.snapshot()
        BttDevice.recover(pm)
        if pm.snapshot() != once:
            problems.append("recovery is not idempotent")
    return problems


def aligned_tears(nbytes: int, unit: int) -> list[int]:
    """Distinct amounts of an interrupted write that may have landed."""
    if nbytes <= unit:
        return [0]
    return list(range(0, nbytes, unit))


def btt_crash_enumeration(writes: tuple[tuple[int, ...], ...] = ((0, 1), (1, 0)), nlba: int = 4,
                          block_size: int = 64, max_preemptions: int | None = None,
                          max_runs: int | None = None) -> CrashVerdict:
    """``writes[i]`` is the lba sequence lane ``i`` writes."""
    lanes = len(writes)
    base = BttDevice.format(None, nlba + lanes, lanes, block_size=block_size)
    base_img = base.pmem.snapshot()
    unit = base.pmem.atomic_unit

    oracle = ShadowOracle()
    plan = []
    counters: dict[int, int] = {}
    for lane, lbas in enumerate(writes):
        ops = []
        for lba in lbas:
            counters[lba] = counters.get(lba, 0) + 1
            oracle.issue(lba, counters[lba])
            ops.append((lba, counters[lba]))
        plan.append(ops)

    def writer(dev, lane, ops):
        for lba, version in ops:
            yield from dev.write(lba, make_payload(lba, version, block_size), lane)

    def program(sched):
        pm = PmemImage(len(base_img), block_size)
        pm.persisted[:] = base_img
        dev = BttDevice.recover(pm, check=False)
        pm.journal = []
        for lane, ops in enumerate(plan):
            sched.spawn(writer(dev, lane, ops), f"lane{lane}")
        sched.run()
        final = {lba: dev.read_sync(lba) for lba in range(nlba)}
        return pm.journal, final

    verdict = CrashVerdict()
    seen: dict[bytes, bool] = {}
    for taken, (journal, final) in explore(program, max_preemptions=max_preemptions, max_runs=max_runs):
        verdict.runs += 1
        img = bytearray(base_img)
        for k, (off, data) in enumerate(journal):
            for tear in aligned_tears(len(data), unit):
                crashed = bytearray(img)
                crashed[off:off + tear] = data[:tear]
                verdict.crash_points += 1
                key = bytes(crashed)
                if key in seen:
                    continue
                problems = recover_and_check(key, block_size, oracle)
                seen[key] = not problems
                verdict.images_checked += 1
                for p in problems:
                    verdict.violations.append(f"schedule {taken} write #{k + 1} tear {tear}: {p}")
            img[off:off + len(data)] = data
        # without a crash, the last committed version of every lba must win
        for lba, block in final.items():
            msg = oracle.check_block(lba, block)
            if msg:
                verdict.violations.append(f"schedule {taken} no crash: {msg}")
    return verdict


def small_config(policy: str, seed: int, ops: int = 80, slots: int = 8, fsync_every: int = 8,
                 block_size: int = 256) -> Config:
    return Config().override(
        device__block_size=block_size, device__cores=2, device__address_space_blocks=4 * slots,
        cache__capacity_bytes=slots * block_size, cache__workers=1, cache__num_sets=2,
        policy__name=policy,
        workload__total_ops=ops, workload__iodepth=4, workload__fsync_every_n_writes=fsync_every,
        workload__periodic_preflush_interval_s=float("inf"),
        run__seed=seed, run__linearization_check=False,
    )


def crash_test(cfg: Config, crash_at: int | None = None, tear: int = 0, rng: random.Random | None = None) -> CrashVerdict:
    """Run ``cfg`` and cut power during medium write ``crash_at`` (random when
    None).  Recover and validate against the oracle."""
    from .runner import System

    rng = rng or random.Random(cfg.run.seed)
    sys_ = System(cfg)
    if crash_at is None:
        crash_at = rng.randint(1, 3 * cfg.workload.total_ops)
    sys_.pmem.arm_crash(crash_at, tear)
    sys_.start()
    completed = sys_.rt.run(until=sys_.fg)
    sys_.rt.stop()
    sys_.pmem.crash(None)
    problems = recover_and_check(sys_.pmem.snapshot(), cfg.device.block_size, sys_.oracle, check_idempotent=False)
    return CrashVerdict(runs=1, crash_points=0 if completed else 1, images_checked=1,
                        violations=[f"{cfg.policy.name} seed {cfg.run.seed} crash@{crash_at}: {p}" for p in problems])


def randomized_crash_tests(policy: str, trials: int = 1000, seed: int = 0, **small) -> CrashVerdict:
    rng = random.Random(f"{policy}:{seed}")
    verdict = CrashVerdict()
    for t in range(trials):
        cfg = small_config(policy, seed * 100_003 + t, **small)
        tear = rng.choice((0, 8, 64, 128))
        verdict = verdict.merge(crash_test(cfg, tear=tear, rng=rng))
    return verdict
