"""Experiment configuration: TOML file, defaults, and TCL_* environment overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..pmem import LatencyConfig
from ..policies.base import POLICY_NAMES
from ..workload import DISTRIBUTIONS, PATTERNS

ENV_PREFIX = "TCL_"


class ConfigError(ValueError):
    pass


@dataclass
class DeviceSection:
    block_size: int = 4096
    # 0 = eight times the cache slot count
    address_space_blocks: int = 0
    cores: int = 8
    # 0 = min(cores, 256)
    lanes: int = 0
    atomic_unit: int = 8
    arena_max_bytes: int = 512 << 30


@dataclass
class CacheSection:
    capacity_bytes: int = 16 << 20
    # 0 = 16 x worker pool, at least the lane count
    num_sets: int = 0
    # -1 = min(4, cores - numjobs)
    workers: int = -1


@dataclass
class PolicySection:
    name: str = "caiti"
    eager_eviction: bool = True
    conditional_bypass: bool = True
    # -1 = reset every num_slots insertions, 0 = never reset
    bloom_reset_interval: int = -1
    pmbd70_watermark: float = 0.7


@dataclass
class WorkloadSection:
    pattern: str = "randwrite"
    total_ops: int = 200_000
    ramp_ops: int = 0
    iodepth: int = 32
    numjobs: int = 1
    io_size_blocks: int = 1
    fsync_every_n_writes: int = 0
    periodic_preflush_interval_s: float = 5.0
    distribution: str = "uniform"
    zipf_theta: float = 0.99
    read_ratio: float = 0.5
    burst_blocks: int = 1024
    # replay this CSV trace instead of generating requests
    trace_path: str = ""


@dataclass
class LatencySection:
    pmem_write_ns_per_block: int = 3000
    pmem_read_ns_per_block: int = 1500
    dram_write_ns_per_block: int = 1000
    dram_read_ns_per_block: int = 500
    pmem_small_write_ns: int = 500
    metadata_ns: int = 50


@dataclass
class RunSection:
    seed: int = 0
    clock: str = "virtual"
    perturb: bool = True
    # 0 = off; otherwise check cache invariants every this many virtual ns
    check_every_ns: int = 0
    linearization_check: bool = True
    trace_csv: str = ""
    report_json: str = ""
    max_virtual_ns: int = 0


SECTIONS = {
    "device": DeviceSection,
    "cache": CacheSection,
    "policy": PolicySection,
    "workload": WorkloadSection,
    "latency": LatencySection,
    "run": RunSection,
}


@dataclass
class Config:
    device: DeviceSection = field(default_factory=DeviceSection)
    cache: CacheSection = field(default_factory=CacheSection)
    policy: PolicySection = field(default_factory=PolicySection)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    latency: LatencySection = field(default_factory=LatencySection)
    run: RunSection = field(default_factory=RunSection)

    # -- construction ---------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cfg = cls()
        for sect, values in data.items():
            if sect not in SECTIONS:
                raise ConfigError(f"unknown section [{sect}]")
            if not isinstance(values, dict):
                raise ConfigError(f"[{sect}] must be a table")
            target = getattr(cfg, sect)
            known = {f.name: f for f in fields(target)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown key {sect}.{key}")
                setattr(target, key, _coerce(value, known[key].type, f"{sect}.{key}"))
        return cfg.validate()

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, env: dict | None = None) -> "Config":
        data = {}
        if path:
            try:
                with open(path, "rb") as fh:
                    data = tomllib.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"bad TOML in {path}: {exc}") from exc
        cfg = cls.from_dict(data)
        return cfg.with_env(os.environ if env is None else env)

    def with_env(self, env) -> "Config":
        """Apply TCL_<SECTION>_<KEY>=value overrides."""
        data = self.to_dict()
        for name, raw in env.items():
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX):].lower()
            sect, _, key = rest.partition("_")
            if sect not in SECTIONS:
                continue  # e.g. TCL_LIBRARY from a Tcl install
            if key not in data[sect]:
                raise ConfigError(f"{name} does not name a config key")
            data[sect][key] = raw
        return Config.from_dict(data)

    def override(self, **dotted) -> "Config":
        data = self.to_dict()
        for k, v in dotted.items():
            sect, _, key = k.partition("__")
            if sect not in data or key not in data[sect]:
                raise ConfigError(f"unknown key {sect}.{key}")
            data[sect][key] = v
        return Config.from_dict(data)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self, section: str | None = None) -> str:
        payload = self.to_dict() if section is None else self.to_dict()[section]
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    # -- validation and derived values -------------------------------------------
    def validate(self) -> "Config":
        d, c, p, w, r = self.device, self.cache, self.policy, self.workload, self.run
        if d.block_size < 16 or d.block_size % 16:
            raise ConfigError("device.block_size must be a positive multiple of 16")
        if d.cores < 1:
            raise ConfigError("device.cores must be >= 1")
        if d.lanes < 0 or d.address_space_blocks < 0:
            raise ConfigError("device.lanes and device.address_space_blocks must be >= 0")
        if c.capacity_bytes < d.block_size:
            raise ConfigError("cache.capacity_bytes must hold at least one block")
        if c.num_sets < 0:
            raise ConfigError("cache.num_sets must be >= 0")
        if p.name not in POLICY_NAMES:
            raise ConfigError(f"unknown policy {p.name!r}; choose from {', '.join(POLICY_NAMES)}")
        if not 0 < p.pmbd70_watermark <= 1:
            raise ConfigError("policy.pmbd70_watermark must lie in (0, 1]")
        if w.pattern not in PATTERNS:
            raise ConfigError(f"unknown workload pattern {w.pattern!r}")
        if w.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {w.distribution!r}")
        for key in ("total_ops", "iodepth", "numjobs", "io_size_blocks", "burst_blocks"):
            if getattr(w, key) < 1:
                raise ConfigError(f"workload.{key} must be >= 1")
        if w.ramp_ops < 0 or w.ramp_ops >= w.total_ops:
            raise ConfigError("workload.ramp_ops must lie in [0, total_ops)")
        if not 0 < w.zipf_theta < 1:
            raise ConfigError("workload.zipf_theta must lie in (0, 1)")
        if w.periodic_preflush_interval_s <= 0:
            raise ConfigError("workload.periodic_preflush_interval_s must be > 0 (inf disables it)")
        if r.clock not in ("virtual", "real"):
            raise ConfigError("run.clock must be 'virtual' or 'real'")
        try:
            LatencyConfig(**dataclasses.asdict(self.latency))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.num_sets() < self.lanes():
            raise ConfigError("cache.num_sets must be >= the lane count")
        return self

    def num_slots(self) -> int:
        return self.cache.capacity_bytes // self.device.block_size

    def lanes(self) -> int:
        return self.device.lanes or max(1, min(self.device.cores, 256))

    def workers(self) -> int:
        if self.cache.workers >= 0:
            return self.cache.workers
        return max(0, min(4, self.device.cores - self.workload.numjobs))

    def num_sets(self) -> int:
        return self.cache.num_sets or max(16 * max(1, self.workers()), self.lanes())

    def address_space(self) -> int:
        return self.device.address_space_blocks or 8 * self.num_slots()

    def latency_config(self) -> LatencyConfig:
        return LatencyConfig(**dataclasses.asdict(self.latency))


def _coerce(value, tp, where: str):
    tp = str(tp)
    try:
        if tp == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if tp == "int":
            if isinstance(value, bool):
                raise ValueError(value)
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if tp == "float":
            if isinstance(value, str) and value.strip().lower() in ("inf", "infinity"):
                return math.inf
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot use {value!r} as {tp}") from None


def variant_toggle(cfg: Config, eager: bool | None = None, bypass: bool | None = None) -> Config:
    """Copy of ``cfg`` with caiti's eager eviction and/or conditional bypass switched."""
    kw = {}
    if eager is not None:
        kw["policy__eager_eviction"] = eager
    if bypass is not None:
        kw["policy__conditional_bypass"] = bypass
    return cfg.override(**kw)
