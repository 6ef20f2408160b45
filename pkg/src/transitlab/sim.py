"""Cooperative actor runtime shared by every simulated component.

Actors are plain generators.  Whatever an actor yields tells the runtime
what it is waiting for:

``int``
    charge that many nanoseconds, then resume
``Lock``
    acquire it (FIFO hand-off) and resume once owned
``Event``
    resume once the event is set (immediately if it already is)
``Signal``
    park until somebody calls ``notify``/``notify_all``

Code between two yields runs atomically with respect to every other actor.
That is the only atomicity the simulated components rely on, and it is what
the threaded runtime reproduces with a single big lock.
"""

from __future__ import annotations

import heapq
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Generator, Iterable, Iterator


class PowerFailure(Exception):
    """Raised by the medium when an armed crash point is reached."""


class ActorStopped(Exception):
    pass


class Lock:
    __slots__ = ("name", "owner", "waiters")

    def __init__(self, name: str = ""):
        self.name = name
        self.owner = None
        self.waiters: deque = deque()

    def locked(self) -> bool:
        return self.owner is not None

    def try_acquire(self, actor) -> bool:
        if self.owner is None:
            self.owner = actor
            return True
        return False

    def release(self) -> None:
        if self.waiters:
            nxt = self.waiters.popleft()
            self.owner = nxt
            nxt.rt.wake(nxt)
        else:
            self.owner = None

    def __repr__(self):
        return f"Lock({self.name!r}, owner={getattr(self.owner, 'name', None)})"


class Event:
    __slots__ = ("is_set", "waiters")

    def __init__(self):
        self.is_set = False
        self.waiters: list = []

    def set(self) -> None:
        self.is_set = True
        if self.waiters:
            waiters, self.waiters = self.waiters, []
            for a in waiters:
                a.rt.wake(a)

    def clear(self) -> None:
        self.is_set = False


class Signal:
    """Condition-variable style wake-up; a yield on it always parks."""

    __slots__ = ("name", "waiters", "notifications")

    def __init__(self, name: str = ""):
        self.name = name
        self.waiters: deque = deque()
        self.notifications = 0

    def notify(self, n: int = 1) -> int:
        woken = 0
        while self.waiters and woken < n:
            a = self.waiters.popleft()
            a.rt.wake(a)
            woken += 1
        self.notifications += 1
        return woken

    def notify_all(self) -> int:
        return self.notify(len(self.waiters))


class Actor:
    __slots__ = ("aid", "name", "gen", "rt", "done", "result", "kind", "wake_t", "ready")

    def __init__(self, aid: int, name: str, gen: Generator, rt, kind: str):
        self.aid = aid
        self.name = name
        self.gen = gen
        self.rt = rt
        self.kind = kind
        self.done = False
        self.result = None
        self.wake_t = 0
        self.ready = False

    def __repr__(self):
        return f"<Actor {self.aid}:{self.name}>"


class VirtualScheduler:
    """Deterministic discrete-event stepper over a logical nanosecond clock.

    Ties between actors runnable at the same instant are broken by a seeded
    random key when ``perturb`` is on, otherwise by arrival order.
    """

    mode = "virtual"

    def __init__(self, seed: int = 0, perturb: bool = True):
        self.now = 0
        self.steps = 0
        self.actors: list[Actor] = []
        self.current: Actor | None = None
        self.crashed: PowerFailure | None = None
        self._heap: list = []
        self._seq = 0
        self._rng = random.Random(seed)
        self._perturb = perturb
        self._watch: set[int] = set()

    # -- actor management -------------------------------------------------
    def spawn(self, gen: Generator, name: str = "", kind: str = "fg") -> Actor:
        actor = Actor(len(self.actors), name or f"actor{len(self.actors)}", gen, self, kind)
        self.actors.append(actor)
        self._push(actor, self.now)
        return actor

    def wake(self, actor: Actor) -> None:
        self._push(actor, self.now)

    def _push(self, actor: Actor, t: int) -> None:
        self._seq += 1
        key = self._rng.random() if self._perturb else 0.0
        heapq.heappush(self._heap, (t, key, self._seq, actor))

    def stop(self) -> None:
        for a in self.actors:
            if not a.done:
                a.gen.close()
                a.done = True
        self._heap.clear()

    # -- main loop --------------------------------------------------------
    def run(self, until: Iterable[Actor] | None = None, max_time: int | None = None,
            max_steps: int | None = None) -> bool:
        """Run actors.  Returns False if the run stopped on a power failure.

        With ``until`` the loop ends as soon as all those actors finished,
        leaving background actors parked.
        """
        heap = self._heap
        pop = heapq.heappop
        watch = None
        if until is not None:
            watch = {a.aid for a in until if not a.done}
            if not watch:
                return True
        while heap:
            if max_time is not None and heap[0][0] > max_time:
                self.now = max_time
                break
            if max_steps is not None and self.steps >= max_steps:
                break
            t, _, _, actor = pop(heap)
            self.now = t
            self.steps += 1
            try:
                self._advance(actor, None)
            except PowerFailure as exc:
                self.crashed = exc
                return False
            if watch is not None and actor.done and actor.aid in watch:
                watch.discard(actor.aid)
                if not watch:
                    break
        return True

    def _advance(self, actor: Actor, value: Any) -> None:
        self.current = actor
        send = actor.gen.send
        while True:
            try:
                eff = send(value)
            except StopIteration as stop:
                actor.done = True
                actor.result = stop.value
                return
            value = None
            tp = type(eff)
            if tp is int:
                self._push(actor, self.now + eff)
                return
            if tp is Lock:
                if eff.owner is None:
                    eff.owner = actor
                    continue
                eff.waiters.append(actor)
                return
            if tp is Signal:
                eff.waiters.append(actor)
                return
            if tp is Event:
                if eff.is_set:
                    continue
                eff.waiters.append(actor)
                return
            raise TypeError(f"actor {actor.name} yielded unsupported effect {eff!r}")


@dataclass
class Decision:
    options: tuple
    chosen: int
    last: int | None
    preemptions: int


class ExploreScheduler(VirtualScheduler):
    """Scheduler whose every interleaving choice comes from a replayable prefix.

    Time still advances (an actor resumes no earlier than its wake time) but
    ordering between ready actors is entirely up to the choice sequence.
    """

    def __init__(self, prefix: tuple = ()):
        super().__init__(seed=0, perturb=False)
        self.prefix = prefix
        self.decisions: list[Decision] = []
        self._ready: list[Actor] = []
        self._last: int | None = None

    def _push(self, actor: Actor, t: int) -> None:
        actor.wake_t = t
        self._ready.append(actor)

    def stop(self) -> None:
        super().stop()
        self._ready.clear()

    def run(self, until=None, max_time=None, max_steps=None) -> bool:
        ready = self._ready
        preempt = 0
        while ready:
            if max_steps is not None and self.steps >= max_steps:
                break
            ready.sort(key=lambda a: a.aid)
            if len(ready) > 1:
                ids = tuple(a.aid for a in ready)
                k = len(self.decisions)
                if k < len(self.prefix):
                    chosen = self.prefix[k]
                elif self._last in ids:
                    chosen = self._last
                else:
                    chosen = ids[0]
                if self._last in ids and chosen != self._last:
                    preempt += 1
                self.decisions.append(Decision(ids, chosen, self._last, preempt))
                idx = ids.index(chosen)
            else:
                idx = 0
            actor = ready.pop(idx)
            self.now = max(self.now, actor.wake_t)
            self.steps += 1
            self._last = actor.aid
            try:
                self._advance(actor, None)
            except PowerFailure as exc:
                self.crashed = exc
                return False
        return True


def explore(program: Callable[[ExploreScheduler], Any], max_preemptions: int | None = None,
            max_runs: int | None = None) -> Iterator[tuple[tuple, Any]]:
    """Enumerate schedules of ``program`` depth-first by re-execution.

    ``program`` builds its actors on the scheduler it is given, runs it, and
    returns an outcome.  With ``max_preemptions`` only schedules switching away
    from a still-runnable actor at most that many times are explored.
    """
    stack: list[tuple] = [()]
    runs = 0
    while stack:
        prefix = stack.pop()
        sched = ExploreScheduler(prefix)
        outcome = program(sched)
        runs += 1
        taken = tuple(d.chosen for d in sched.decisions)
        yield taken, outcome
        if max_runs is not None and runs >= max_runs:
            return
        for i in range(len(prefix), len(sched.decisions)):
            d = sched.decisions[i]
            base = sched.decisions[i - 1].preemptions if i else 0
            for alt in d.options:
                if alt == d.chosen:
                    continue
                cost = base + (1 if d.last in d.options and alt != d.last else 0)
                if max_preemptions is not None and cost > max_preemptions:
                    continue
                stack.append(taken[:i] + (alt,))


def run_sync(gen: Generator, rt: VirtualScheduler | None = None):
    """Drive one generator to completion on a private virtual scheduler."""
    rt = rt or VirtualScheduler(perturb=False)
    actor = rt.spawn(gen, "sync")
    rt.run(until=[actor])
    if rt.crashed is not None:
        raise rt.crashed
    if not actor.done:
        raise RuntimeError("run_sync: generator blocked forever")
    return actor.result


class ThreadedRuntime:
    """Runs each actor on an OS thread against the wall clock.

    One big lock is held while actor code runs, so the atomic-between-yields
    contract holds exactly as in the virtual scheduler; it is released while
    an actor spins or sleeps out a charge or waits on a primitive.
    """

    mode = "real"

    def __init__(self, spin_below_ns: int = 200_000):
        self._cond = threading.Condition(threading.Lock())
        self._t0 = time.perf_counter_ns()
        self._spin_below = spin_below_ns
        self._local = threading.local()
        self.actors: list[Actor] = []
        self.threads: list[threading.Thread] = []
        self.crashed: PowerFailure | None = None
        self.stopping = False
        self.steps = 0
        self._errors: list[BaseException] = []

    @property
    def now(self) -> int:
        return time.perf_counter_ns() - self._t0

    @property
    def current(self):
        return getattr(self._local, "actor", None)

    def spawn(self, gen: Generator, name: str = "", kind: str = "fg") -> Actor:
        actor = Actor(len(self.actors), name or f"actor{len(self.actors)}", gen, self, kind)
        self.actors.append(actor)
        th = threading.Thread(target=self._body, args=(actor,), name=actor.name, daemon=True)
        self.threads.append(th)
        th.start()
        return actor

    def wake(self, actor: Actor) -> None:
        # caller holds the big lock (it is running actor code)
        actor.ready = True
        self._cond.notify_all()

    def _sleep(self, ns: int) -> None:
        if ns <= 0:
            return
        if ns >= self._spin_below:
            time.sleep(ns / 1e9)
            return
        end = time.perf_counter_ns() + ns
        while time.perf_counter_ns() < end:
            pass

    def _park(self, actor: Actor) -> None:
        while not actor.ready:
            if self.stopping:
                raise ActorStopped()
            self._cond.wait(0.05)

    def _body(self, actor: Actor) -> None:
        self._local.actor = actor
        cond = self._cond
        with cond:
            value = None
            try:
                while True:
                    if self.stopping or self.crashed is not None:
                        raise ActorStopped()
                    try:
                        eff = actor.gen.send(value)
                    except StopIteration as stop:
                        actor.result = stop.value
                        break
                    self.steps += 1
                    tp = type(eff)
                    if tp is int:
                        cond.release()
                        try:
                            self._sleep(eff)
                        finally:
                            cond.acquire()
                    elif tp is Lock:
                        if eff.owner is None:
                            eff.owner = actor
                        else:
                            actor.ready = False
                            eff.waiters.append(actor)
                            self._park(actor)
                    elif tp is Signal:
                        actor.ready = False
                        eff.waiters.append(actor)
                        self._park(actor)
                    elif tp is Event:
                        if not eff.is_set:
                            actor.ready = False
                            eff.waiters.append(actor)
                            self._park(actor)
                    else:
                        raise TypeError(f"unsupported effect {eff!r}")
            except ActorStopped:
                pass
            except PowerFailure as exc:
                self.crashed = exc
                cond.notify_all()
            except BaseException as exc:  # surfaced by run()
                self._errors.append(exc)
                self.stopping = True
                cond.notify_all()
            finally:
                actor.done = True
                cond.notify_all()

    def run(self, until: Iterable[Actor] | None = None, max_time=None, max_steps=None) -> bool:
        watch = list(until) if until is not None else list(self.actors)
        deadline = None if max_time is None else self._t0 + max_time
        with self._cond:
            while not all(a.done for a in watch):
                if self.crashed is not None or self._errors:
                    break
                if deadline is not None and time.perf_counter_ns() >= deadline:
                    break
                self._cond.wait(0.05)
        if self._errors:
            self.stop()
            raise self._errors[0]
        return self.crashed is None

    def stop(self) -> None:
        with self._cond:
            self.stopping = True
            self._cond.notify_all()
        for th in self.threads:
            th.join(timeout=2.0)
