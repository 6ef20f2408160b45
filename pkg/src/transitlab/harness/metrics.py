"""Latency records, nearest-rank percentiles and time breakdowns."""

from __future__ import annotations

import csv
import math
from array import array
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..policies.base import CATEGORIES, DISPOSITIONS, OTHERS


class EmptyInput(ValueError):
    pass


def percentile(latencies, p: float) -> int:
    """Nearest-rank percentile: the value at sorted index ceil(p/100 * n) - 1."""
    n = len(latencies)
    if n == 0:
        raise EmptyInput("percentile of an empty list")
    frac = Fraction(str(p))
    if not 0 < frac <= 100:
        raise ValueError(f"p must lie in (0, 100], got {p}")
    rank = max(1, math.ceil(frac * n / 100))
    arr = np.asarray(latencies)
    return arr[np.argpartition(arr, rank - 1)[rank - 1]].item()


@dataclass
class LatencyRecord:
    id: int
    kind: str
    lba: int
    issue_ns: int
    total_ns: int
    category_ns: dict

    def check_closure(self) -> bool:
        return sum(self.category_ns.values()) == self.total_ns


class WorkerBuffer:
    """Append-only per-worker metrics; merged once the run ends."""

    def __init__(self, keep_records: bool = False):
        self.latencies = array("q")
        self.queue_ns = array("q")
        self.cat_sum = [0] * len(CATEGORIES)
        self.cat_hits = [0] * len(CATEGORIES)
        self.dispositions = dict.fromkeys(DISPOSITIONS, 0)
        self.flush_latencies = array("q")
        self.closure_errors = 0
        self.records: list[LatencyRecord] | None = [] if keep_records else None

    def add(self, req, issue_ns: int, total_ns: int, cats: list[int], disposition: str | None,
            measured: bool = True, queue_ns: int = 0) -> None:
        if self.records is not None:
            self.records.append(LatencyRecord(req.id, req.kind, req.lba, issue_ns, total_ns,
                                              dict(zip(CATEGORIES, cats))))
        if not measured:
            return
        if sum(cats) != total_ns:
            self.closure_errors += 1
        if disposition:
            self.dispositions[disposition] = self.dispositions.get(disposition, 0) + 1
        if req.kind == "FLUSH":
            self.flush_latencies.append(total_ns)
        else:
            self.latencies.append(total_ns)
            self.queue_ns.append(queue_ns)
        for i, v in enumerate(cats):
            if v:
                self.cat_sum[i] += v
                self.cat_hits[i] += 1


def merge(buffers: list[WorkerBuffer]) -> WorkerBuffer:
    out = WorkerBuffer(keep_records=any(b.records is not None for b in buffers))
    for b in buffers:
        out.latencies.extend(b.latencies)
        out.queue_ns.extend(b.queue_ns)
        out.flush_latencies.extend(b.flush_latencies)
        out.closure_errors += b.closure_errors
        for i in range(len(CATEGORIES)):
            out.cat_sum[i] += b.cat_sum[i]
            out.cat_hits[i] += b.cat_hits[i]
        for k, v in b.dispositions.items():
            out.dispositions[k] = out.dispositions.get(k, 0) + v
        if b.records is not None:
            out.records.extend(b.records)
    if out.records is not None:
        out.records.sort(key=lambda r: (r.issue_ns, r.id))
    return out


def write_disposition(category_ns: dict) -> str:
    """Recover how a write was served from where its time went."""
    for cat in ("cache_eviction_and_write", "conditional_bypass", "device_direct"):
        if category_ns.get(cat):
            return cat
    return "cache_write_only"


def breakdown_report(source) -> dict:
    """Per-category share of total time, per-category mean over requests and
    write-disposition shares.  ``source`` is a merged buffer or a list of
    LatencyRecords."""
    if isinstance(source, WorkerBuffer):
        sums, hits = source.cat_sum, source.cat_hits
        n = len(source.latencies) + len(source.flush_latencies)
        disp = source.dispositions
    else:
        records = list(source)
        if not records:
            raise EmptyInput("breakdown of an empty trace")
        sums = [0] * len(CATEGORIES)
        hits = [0] * len(CATEGORIES)
        disp = dict.fromkeys(DISPOSITIONS, 0)
        for r in records:
            for i, c in enumerate(CATEGORIES):
                v = r.category_ns.get(c, 0)
                sums[i] += v
                hits[i] += 1 if v else 0
            if r.kind == "WRITE":
                d = write_disposition(r.category_ns)
                disp[d] = disp.get(d, 0) + 1
        n = len(records)
    if n == 0:
        raise EmptyInput("breakdown of an empty trace")
    total = sum(sums)
    writes = sum(disp.get(k, 0) for k in ("cache_write_only", "cache_eviction_and_write", "conditional_bypass", "device_direct"))
    return {
        "percent": {c: (100.0 * s / total if total else 0.0) for c, s in zip(CATEGORIES, sums)},
        "mean_ns": {c: s / n for c, s in zip(CATEGORIES, sums)},
        "occurrences": dict(zip(CATEGORIES, hits)),
        "write_dispositions_percent": {
            k: (100.0 * disp.get(k, 0) / writes if writes else 0.0)
            for k in ("cache_write_only", "cache_eviction_and_write", "conditional_bypass", "device_direct")
        },
        "dispositions": {k: disp.get(k, 0) for k in sorted(disp)},
    }


def largest_category(breakdown: dict, exclude=("others",)) -> str:
    pct = {k: v for k, v in breakdown["percent"].items() if k not in exclude}
    return max(pct, key=pct.get)


def latency_summary(latencies) -> dict:
    if len(latencies) == 0:
        return {"count": 0, "avg_ns": 0.0, "p50_ns": 0, "p99_ns": 0, "p9999_ns": 0, "max_ns": 0}
    arr = np.frombuffer(latencies, dtype=np.int64) if isinstance(latencies, array) else np.asarray(latencies)
    return {
        "count": int(arr.size),
        "avg_ns": float(arr.sum()) / arr.size,
        "p50_ns": int(percentile(arr, 50)),
        "p99_ns": int(percentile(arr, 99)),
        "p9999_ns": int(percentile(arr, 99.99)),
        "max_ns": int(arr.max()),
    }


TRACE_COLUMNS = ("id", "kind", "lba", "issue_ns", "total_ns") + tuple(f"cat_{c}" for c in CATEGORIES)


def write_trace_csv(records: list[LatencyRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow([r.id, r.kind, r.lba, r.issue_ns, r.total_ns] + [r.category_ns[c] for c in CATEGORIES])


def read_trace_csv(path) -> list[LatencyRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cats = {c: int(row[f"cat_{c}"]) for c in CATEGORIES}
            out.append(LatencyRecord(int(row["id"]), row["kind"], int(row["lba"]),
                                     int(row["issue_ns"]), int(row["total_ns"]), cats))
    return out


__all__ = [
    "EmptyInput", "percentile", "LatencyRecord", "WorkerBuffer", "merge", "breakdown_report",
    "largest_category", "write_disposition", "latency_summary", "write_trace_csv", "read_trace_csv", "OTHERS",
]
