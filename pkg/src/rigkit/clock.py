"""Session time sources.

All timestamps in this package are integer nanoseconds since a per-session
epoch. Two interchangeable sources exist: a wall clock backed by the OS
monotonic timer, and a virtual clock that advances logically so multi-second
recordings and benchmarks run in milliseconds while staying deterministic.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager

NS_PER_S = 1_000_000_000
NS_PER_US = 1_000


class Clock:
    """Interface shared by :class:`RealClock` and :class:`VirtualClock`."""

    def now_ns(self) -> int:
        raise NotImplementedError

    def sleep_ns(self, duration_ns: int) -> None:
        if duration_ns > 0:
            self.sleep_until_ns(self.now_ns() + duration_ns)

    def sleep_until_ns(self, deadline_ns: int) -> None:
        raise NotImplementedError

    def register_task(self, name: str = "") -> "TaskHandle":
        """Declare a concurrent task that will sleep on this clock.

        Real clocks ignore registration. The virtual clock uses the set of
        registered tasks to decide when logical time may advance, so every
        task must be registered before any of them starts sleeping.
        """
        return TaskHandle(self, name)

    def _bind_thread(self, handle: "TaskHandle") -> None:
        pass

    def current_binding(self) -> "TaskHandle | None":
        """The live task handle bound to the calling thread, if any."""
        return None


class TaskHandle:
    """Registration token for one clock-driven task.

    Register from the orchestrating thread before any task starts sleeping,
    call :meth:`bind` from the task's own thread so the clock can attribute
    its sleeps, and close when the task exits.
    """

    def __init__(self, clock: Clock, name: str = ""):
        self.clock = clock
        self.name = name
        self._closed = False

    def bind(self) -> "TaskHandle":
        self.clock._bind_thread(self)  # type: ignore[attr-defined]
        return self

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.clock._release_task(self)  # type: ignore[attr-defined]

    def __enter__(self) -> "TaskHandle":
        self.bind()
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class RealClock(Clock):
    """Wall time relative to an epoch captured at construction."""

    def __init__(self):
        self._epoch = time.monotonic_ns()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self._epoch

    def sleep_until_ns(self, deadline_ns: int) -> None:
        # coarse sleep, then short naps: OS sleeps overshoot by a timer slack
        # that would otherwise eat most of a 60 Hz tick budget
        while True:
            remaining = deadline_ns - self.now_ns()
            if remaining <= 0:
                return
            if remaining > 2_000_000:
                time.sleep((remaining - 1_500_000) / NS_PER_S)
            else:
                time.sleep(50e-6)

    def _release_task(self, handle: TaskHandle) -> None:
        pass


class VirtualClock(Clock):
    """Discrete-event clock shared by cooperating threads.

    Time advances only when every registered task is blocked in a sleep call;
    it then jumps to the earliest pending deadline. When several tasks share
    that deadline they are woken one at a time in registration order, so runs
    are reproducible regardless of OS thread scheduling. Threads doing work
    (anything between two sleeps) hold logical time still, which makes
    computation free and sleeps exact.
    """

    def __init__(self, start_ns: int = 0):
        self._now = start_ns
        self._cond = threading.Condition()
        self._tasks: dict[int, TaskHandle] = {}
        self._order: dict[int, int] = {}
        self._next_priority = 0
        # handle id -> wake deadline for tasks currently sleeping
        self._sleeping: dict[int, int] = {}
        self._running_turn: int | None = None
        self._local = threading.local()

    def _bind_thread(self, handle: TaskHandle) -> None:
        self._local.handle = handle

    def current_binding(self) -> TaskHandle | None:
        handle = getattr(self._local, "handle", None)
        if handle is None:
            return None
        with self._cond:
            return handle if id(handle) in self._tasks else None

    def now_ns(self) -> int:
        with self._cond:
            return self._now

    def register_task(self, name: str = "") -> TaskHandle:
        handle = TaskHandle(self, name)
        with self._cond:
            self._tasks[id(handle)] = handle
            self._order[id(handle)] = self._next_priority
            self._next_priority += 1
        return handle

    def _release_task(self, handle: TaskHandle) -> None:
        with self._cond:
            self._tasks.pop(id(handle), None)
            self._order.pop(id(handle), None)
            self._sleeping.pop(id(handle), None)
            self._advance_if_idle()
            self._cond.notify_all()

    def sleep_until_ns(self, deadline_ns: int) -> None:
        # Sleeps from a thread bound to a registered task count toward the
        # everyone-is-asleep condition; anything else is an anonymous sleeper.
        handle = getattr(self._local, "handle", None)
        if handle is not None:
            with self._cond:
                registered = id(handle) in self._tasks
            if registered:
                self._sleep(handle, deadline_ns)
                return
        self._sleep(None, deadline_ns)

    def task_sleep_until_ns(self, handle: TaskHandle, deadline_ns: int) -> None:
        """Sleep as a registered task; other tasks may run while we wait."""
        self._sleep(handle, deadline_ns)

    def task_sleep_ns(self, handle: TaskHandle, duration_ns: int) -> None:
        with self._cond:
            deadline = self._now + max(0, duration_ns)
        self._sleep(handle, deadline)

    def _sleep(self, handle: TaskHandle | None, deadline_ns: int) -> None:
        if handle is None:
            # Anonymous sleeper (no registration): advance time directly once
            # no registered tasks exist, otherwise wait for them to catch up.
            with self._cond:
                while self._now < deadline_ns:
                    if not self._tasks:
                        self._now = deadline_ns
                        self._cond.notify_all()
                        return
                    self._cond.wait(timeout=1.0)
            return
        key = id(handle)
        with self._cond:
            if deadline_ns <= self._now:
                return
            self._sleeping[key] = deadline_ns
            self._advance_if_idle()
            while not (self._now >= deadline_ns and self._running_turn == key):
                self._cond.wait()
            # Our turn: leave the sleeping set before other same-instant
            # tasks are considered, so they wake only after we sleep again.
            self._running_turn = None
            del self._sleeping[key]

    def _advance_if_idle(self) -> None:
        # Caller holds the lock. Advance when every registered task sleeps
        # and nobody currently holds the wake turn.
        if self._running_turn is not None:
            return
        if not self._tasks or len(self._sleeping) < len(self._tasks):
            return
        wake_at = min(self._sleeping.values())
        due = [k for k, t in self._sleeping.items() if t <= max(self._now, wake_at)]
        if wake_at > self._now:
            self._now = wake_at
            due = [k for k, t in self._sleeping.items() if t <= self._now]
        chosen = min(due, key=lambda k: self._order.get(k, 1 << 60))
        self._running_turn = chosen
        self._cond.notify_all()


@contextmanager
def ensure_task(clock: Clock, name: str = ""):
    """Make the calling thread a registered clock task for the block's span.

    A thread already bound to a live handle keeps it; otherwise a handle is
    registered, bound, and closed on exit. Loops that must participate in
    virtual-clock scheduling wrap themselves in this.
    """
    if clock.current_binding() is not None:
        yield
        return
    handle = clock.register_task(name)
    handle.bind()
    try:
        yield
    finally:
        handle.close()
