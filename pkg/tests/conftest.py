import pytest

from transitlab.btt import BttDevice
from transitlab.pmem import LatencyConfig
from transitlab.policies import RequestContext, make_policy
from transitlab.sim import VirtualScheduler
from transitlab.workload import make_payload

BS = 256


def small_device(nlba=64, lanes=4, block_size=BS):
    return BttDevice.format(None, nlba + lanes, lanes, block_size=block_size)


def block(lba, version, bs=BS):
    return make_payload(lba, version, bs)


class Bench:
    """A policy on a small device with a virtual clock, for driving requests by hand."""

    def __init__(self, policy="caiti", slots=8, nlba=64, lanes=4, workers=0, num_sets=4, start=True, **kw):
        self.lat = LatencyConfig()
        self.dev = small_device(nlba, lanes)
        self.pol = make_policy(policy, self.dev, self.lat, slots, num_sets=num_sets, workers=workers, **kw)
        self.rt = VirtualScheduler(seed=0, perturb=False)
        self.bg = self.pol.start(self.rt) if start else []

    def ctx(self, lane=0):
        return RequestContext(self.rt, 0, lane)

    def spawn(self, gen, name=""):
        return self.rt.spawn(gen, name)

    def run(self, *gens):
        actors = [self.rt.spawn(g) for g in gens]
        self.rt.run(until=actors)
        return [a.result for a in actors]

    def write(self, lba, version, flags=None):
        from transitlab.policies import NO_FLAGS

        ctx = self.ctx()
        t0 = self.rt.now
        self.run(self.pol.handle_write(lba, block(lba, version), flags or NO_FLAGS, ctx))
        return ctx, self.rt.now - t0

    def read(self, lba):
        from transitlab.policies import NO_FLAGS

        ctx = self.ctx()
        (data,) = self.run(self.pol.handle_read(lba, NO_FLAGS, ctx))
        return data

    def flush(self):
        from transitlab.policies import FSYNC

        ctx = self.ctx()
        (vol,) = self.run(self.pol.handle_flush(FSYNC, ctx))
        return vol

    def settle(self, ns=10_000_000):
        self.rt.run(max_time=self.rt.now + ns)


@pytest.fixture
def bench():
    return Bench


# acceptance verdicts, printed once at the end of the session
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
