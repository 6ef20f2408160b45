"""Builds a device, a policy and workload jobs from a Config, runs them and
summarises the outcome."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from ..btt import BttDevice, image_bytes_for
from ..pmem import PmemImage
from ..policies import RequestContext, make_policy, metadata_overhead_bytes_per_slot
from ..policies.base import PERIODIC_FLUSH
from ..sim import ThreadedRuntime, VirtualScheduler
from ..workload import (
    FLUSH,
    READ,
    WRITE,
    IoRequest,
    TraceStream,
    VersionClock,
    WorkloadSpec,
    job_streams,
    load_trace,
)
from .config import Config
from .metrics import WorkerBuffer, breakdown_report, latency_summary, merge, write_trace_csv
from .oracle import ShadowOracle, linearization_violations


@dataclass
class ExperimentReport:
    policy: str
    workload_digest: str
    config_digest: str
    ops: int
    measured_ops: int
    avg_ns: float
    p50_ns: int
    p99_ns: int
    p9999_ns: int
    max_ns: int
    avg_queue_ns: float
    breakdown: dict
    device_writes: dict
    flush: dict
    metadata_overhead_bytes: int
    metadata_ratio_percent: float
    virtual_time_ns: int
    cache: dict
    invariant_violations: list = field(default_factory=list)
    linearization_violations: list = field(default_factory=list)

    @property
    def violations(self) -> list:
        return self.invariant_violations + self.linearization_violations

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        rows = [
            ("policy", self.policy),
            ("ops (measured)", f"{self.ops} ({self.measured_ops})"),
            ("avg latency", f"{self.avg_ns / 1000:.3f} us"),
            ("avg queue wait", f"{self.avg_queue_ns / 1000:.3f} us"),
            ("p50 / p99 / p99.99", f"{self.p50_ns / 1000:.3f} / {self.p99_ns / 1000:.3f} / {self.p9999_ns / 1000:.3f} us"),
            ("device writes critical", str(self.device_writes["critical"])),
            ("device writes background", str(self.device_writes["background"])),
            ("flushes (blocks flushed)", f"{self.flush['count']} ({self.flush['total_volume']})"),
            ("metadata per slot", f"{self.metadata_overhead_bytes} B ({self.metadata_ratio_percent:.2f}%)"),
            ("virtual time", f"{self.virtual_time_ns / 1e6:.3f} ms"),
            ("violations", str(len(self.violations))),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
        lines.append("")
        lines.append(breakdown_table(self.breakdown))
        return "\n".join(lines)


def breakdown_table(bd: dict) -> str:
    lines = [f"{'category':<26}{'share %':>9}{'mean ns':>12}{'count':>10}"]
    for cat, pct in bd["percent"].items():
        lines.append(f"{cat:<26}{pct:>9.2f}{bd['mean_ns'][cat]:>12.1f}{bd['occurrences'][cat]:>10}")
    lines.append("")
    lines.append(f"{'write disposition':<26}{'share %':>9}")
    for k, v in bd["write_dispositions_percent"].items():
        lines.append(f"{k:<26}{v:>9.2f}")
    return "\n".join(lines)


class System:
    """Everything one run needs, wired together but not yet started."""

    def __init__(self, cfg: Config, rt=None, strict: bool = False):
        self.cfg = cfg
        d = cfg.device
        self.lat = cfg.latency_config()
        self.lanes = cfg.lanes()
        self.slots = cfg.num_slots()
        self.space = cfg.address_space()
        total_blocks = self.space + self.lanes
        size = image_bytes_for(total_blocks, self.lanes, d.block_size, d.arena_max_bytes)
        self.pmem = PmemImage(size, d.block_size, self.lat, d.atomic_unit)
        self.device = BttDevice.format(self.pmem, total_blocks, self.lanes, d.cores, d.block_size,
                                       arena_max_bytes=d.arena_max_bytes)
        if rt is None:
            rt = VirtualScheduler(cfg.run.seed, cfg.run.perturb) if cfg.run.clock == "virtual" else ThreadedRuntime()
        self.rt = rt
        p = cfg.policy
        reset = None if p.bloom_reset_interval < 0 else p.bloom_reset_interval
        self.policy = make_policy(p.name, self.device, self.lat, self.slots, cfg.num_sets(), cfg.workers(),
                                  lane_offset=cfg.workload.numjobs, eager=p.eager_eviction,
                                  bypass=p.conditional_bypass, bloom_reset_interval=reset,
                                  pmbd70_watermark=p.pmbd70_watermark, strict=strict)
        self.oracle = ShadowOracle()
        self.versions = VersionClock()
        self.commits: dict[int, list[int]] = defaultdict(list)
        if cfg.run.linearization_check:
            self.device.on_commit = self._on_commit
        self.background = []
        self.fg = []
        self.buffers: list[WorkerBuffer] = []
        self.completed = 0
        self.invariant_problems: list[str] = []

    def _on_commit(self, lba: int, data) -> None:
        stamped, version = int.from_bytes(data[:8], "little"), int.from_bytes(data[8:16], "little")
        if stamped == lba:
            self.commits[lba].append(version)

    def workload_spec(self) -> WorkloadSpec:
        w = self.cfg.workload
        return WorkloadSpec(
            pattern=w.pattern, address_space_blocks=self.space, io_size_blocks=w.io_size_blocks,
            iodepth=w.iodepth, numjobs=w.numjobs, total_ops=w.total_ops,
            fsync_every_n_writes=w.fsync_every_n_writes,
            periodic_preflush_interval_ns=w.periodic_preflush_interval_s * 1e9,
            distribution=w.distribution, zipf_theta=w.zipf_theta, read_ratio=w.read_ratio,
            burst_blocks=w.burst_blocks, seed=self.cfg.run.seed,
        )

    def streams(self):
        w = self.cfg.workload
        if w.trace_path:
            reqs = load_trace(w.trace_path)
            return [TraceStream(reqs[j::w.numjobs], j) for j in range(w.numjobs)]
        return job_streams(self.workload_spec(), self.versions)

    # -- request execution -------------------------------------------------------
    def execute(self, req: IoRequest, ctx: RequestContext):
        """Run one request through the policy, keeping the oracle in step."""
        pol = self.policy
        bs = self.device.block_size
        oracle = self.oracle
        if req.kind == WRITE:
            for i in range(req.nblocks):
                oracle.issue(req.lba + i, req.version)
            for i in range(req.nblocks):
                yield from pol.handle_write(req.lba + i, req.payload(bs, i), req.flags, ctx)
            for i in range(req.nblocks):
                oracle.ack(req.lba + i, req.version, durable=req.flags.fua)
            return None
        if req.kind == READ:
            data = None
            for i in range(req.nblocks):
                data = yield from pol.handle_read(req.lba + i, req.flags, ctx)
            return data
        snap = oracle.flush_begin()
        yield from pol.handle_flush(req.flags, ctx)
        oracle.flush_ack(snap)
        return None

    def job(self, stream, j: int, buf: WorkerBuffer, ramp: int):
        """One fio-style job: requests are served one at a time while up to
        ``iodepth`` of them are outstanding.  A request's latency runs from
        dispatch to completion; the time it sat queued is kept apart."""
        rt = self.rt
        depth = self.cfg.workload.iodepth
        lane = j % self.lanes
        done_at: list[int] = []
        n = 0
        for req in stream:
            # a queue slot opens when the request depth places back completes
            issue = done_at[n - depth] if n >= depth else 0
            start = rt.now
            ctx = RequestContext(rt, j, lane)
            yield from self.execute(req, ctx)
            end = rt.now
            done_at.append(end)
            total = end - start
            buf.add(req, issue, total, ctx.close(total), ctx.disposition, measured=n >= ramp,
                    queue_ns=start - issue)
            n += 1
            self.completed += 1

    def journal(self, interval_ns: float, buf: WorkerBuffer):
        """The file system's periodic preflush, issued on its own cadence."""
        k = 0
        while True:
            k += 1
            yield max(0, int(k * interval_ns) - self.rt.now)
            if all(a.done for a in self.fg):
                return
            req = IoRequest(-k, FLUSH, flags=PERIODIC_FLUSH)
            ctx = RequestContext(self.rt, -1, 0)
            start = self.rt.now
            yield from self.execute(req, ctx)
            total = self.rt.now - start
            buf.add(req, start, total, ctx.close(total), ctx.disposition)

    def checker(self, every_ns: int):
        while not all(a.done for a in self.fg):
            yield every_ns
            problems = self.policy.check_invariants()
            if problems:
                self.invariant_problems.extend(problems[:5])
                return

    def start(self, keep_records: bool = False) -> None:
        cfg = self.cfg
        self.background = self.policy.start(self.rt)
        for j, stream in enumerate(self.streams()):
            buf = WorkerBuffer(keep_records)
            self.buffers.append(buf)
            self.fg.append(self.rt.spawn(self.job(stream, j, buf, cfg.workload.ramp_ops // cfg.workload.numjobs),
                                         f"job{j}", kind="fg"))
        interval = cfg.workload.periodic_preflush_interval_s * 1e9
        if math.isfinite(interval):
            buf = WorkerBuffer(keep_records)
            self.buffers.append(buf)
            self.background.append(self.rt.spawn(self.journal(interval, buf), "journal", kind="bg"))
        if cfg.run.check_every_ns:
            self.background.append(self.rt.spawn(self.checker(cfg.run.check_every_ns), "checker", kind="bg"))


def run_experiment(cfg: Config, keep_records: bool | None = None, system: System | None = None) -> ExperimentReport:
    if keep_records is None:
        keep_records = bool(cfg.run.trace_csv)
    sys_ = system or System(cfg)
    sys_.start(keep_records)
    rt = sys_.rt
    max_time = cfg.run.max_virtual_ns or None
    rt.run(until=sys_.fg, max_time=max_time)
    end_ns = rt.now
    rt.stop()
    report = build_report(sys_, end_ns)
    if cfg.run.trace_csv:
        write_trace_csv(merge(sys_.buffers).records, cfg.run.trace_csv)
    if cfg.run.report_json:
        with open(cfg.run.report_json, "w") as fh:
            fh.write(report.to_json())
    return report


def build_report(sys_: System, end_ns: int) -> ExperimentReport:
    cfg = sys_.cfg
    pol = sys_.policy
    merged = merge(sys_.buffers)
    lat = latency_summary(merged.latencies)
    led = sys_.device.ledger
    try:
        bd = breakdown_report(merged)
    except ValueError:
        bd = {"percent": {}, "mean_ns": {}, "occurrences": {}, "write_dispositions_percent": {}, "dispositions": {}}
    vols = pol.flush_volumes
    problems = list(sys_.invariant_problems) + pol.check_invariants()
    if merged.closure_errors:
        problems.append(f"{merged.closure_errors} records whose categories do not sum to their total")
    lin = linearization_violations(sys_.commits, sys_.oracle.ack_order) if cfg.run.linearization_check else []
    per_slot = metadata_overhead_bytes_per_slot(cfg.policy.name)
    cache = {"slots": sys_.slots, "num_sets": cfg.num_sets(), "workers": cfg.workers(),
             "lanes": sys_.lanes, "address_space_blocks": sys_.space,
             "cached_at_end": pol.cached_blocks()}
    cache.update({k: v for k, v in pol.counters.items()})
    for attr in ("idle_writebacks", "background_writebacks", "drains"):
        if hasattr(pol, attr):
            cache[attr] = getattr(pol, attr)
    if hasattr(pol, "engine"):
        cache["evictions"] = pol.engine.evictions
    return ExperimentReport(
        policy=pol.name,
        workload_digest=cfg.digest("workload"),
        config_digest=cfg.digest(),
        ops=sys_.completed,
        measured_ops=lat["count"],
        avg_ns=round(lat["avg_ns"], 3),
        p50_ns=lat["p50_ns"],
        p99_ns=lat["p99_ns"],
        p9999_ns=lat["p9999_ns"],
        max_ns=lat["max_ns"],
        avg_queue_ns=round(sum(merged.queue_ns) / len(merged.queue_ns), 3) if merged.queue_ns else 0.0,
        breakdown=bd,
        device_writes={"critical": led.writes_critical, "background": led.writes_background,
                       "total": led.writes, "errors": led.errors,
                       "reads_critical": led.reads_critical},
        flush={"count": len(vols), "total_volume": sum(vols), "max_volume": max(vols, default=0),
               "mean_volume": round(sum(vols) / len(vols), 3) if vols else 0.0, "volumes": vols[:1000]},
        metadata_overhead_bytes=per_slot,
        metadata_ratio_percent=round(100.0 * per_slot / cfg.device.block_size, 4),
        virtual_time_ns=end_ns,
        cache=cache,
        invariant_violations=problems,
        linearization_violations=lin,
    )
