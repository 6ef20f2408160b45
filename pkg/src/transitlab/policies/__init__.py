from .base import (
    CATEGORIES,
    DISPOSITIONS,
    FSYNC,
    NO_FLAGS,
    PERIODIC_FLUSH,
    POLICY_NAMES,
    BioFlags,
    Passthrough,
    Policy,
    RequestContext,
    UnknownPolicy,
    metadata_overhead_bytes_per_slot,
)
from .bloom import HotColdBloom
from .caiti import CaitiPolicy
from .coactive import CoactivePolicy
from .staging import LruPolicy, Pmbd70Policy, PmbdPolicy

__all__ = [
    "CATEGORIES", "DISPOSITIONS", "FSYNC", "NO_FLAGS", "PERIODIC_FLUSH", "POLICY_NAMES",
    "BioFlags", "Passthrough", "Policy", "RequestContext", "UnknownPolicy",
    "metadata_overhead_bytes_per_slot", "HotColdBloom", "CaitiPolicy", "CoactivePolicy",
    "LruPolicy", "Pmbd70Policy", "PmbdPolicy", "make_policy",
]


def make_policy(name: str, device, latency, num_slots: int, num_sets: int = 1, workers: int = 4,
                lane_offset: int = 1, eager: bool = True, bypass: bool = True,
                bloom_reset_interval: int | None = None, pmbd70_watermark: float = 0.7,
                strict: bool = False) -> Policy:
    if name == "caiti":
        return CaitiPolicy(device, latency, num_slots, num_sets, workers, eager=eager,
                           bypass=bypass, strict=strict, lane_offset=lane_offset)
    if name == "lru":
        return LruPolicy(device, latency, num_slots, lane_offset)
    if name == "pmbd":
        return PmbdPolicy(device, latency, num_slots, lane_offset)
    if name == "pmbd70":
        return Pmbd70Policy(device, latency, num_slots, lane_offset, watermark=pmbd70_watermark)
    if name == "coactive":
        return CoactivePolicy(device, latency, num_slots, lane_offset, bloom_reset_interval)
    if name == "none":
        return Passthrough(device, latency)
    raise UnknownPolicy(name)
