"""Synchronized multi-rate acquisition.

Two scheduling modes share one frame-assembly rule. Serial mode reads every
device inside the tick loop, so device latency eats into the tick budget;
parallel mode gives each device its own poller at the device's native rate
and the tick loop only associates the freshest buffered samples. Tick
timestamps are scheduled grid boundaries, never read-completion times, and
an overrunning tick skips the boundaries it missed instead of bursting to
catch up.
"""

from __future__ import annotations

import bisect
import queue
import threading
import uuid
from dataclasses import dataclass, field
from fractions import Fraction

from .clock import Clock, NS_PER_S, ensure_task
from .core import (
    ConfigError,
    Episode,
    Frame,
    PAYLOAD_JOINTS,
    Sample,
)
from .registry import CommandTap, RobotHandle

SERIAL = "serial"
PARALLEL = "parallel"


@dataclass(frozen=True)
class CollectorConfig:
    """One acquisition run: target cadence, mode, and exactly one stop rule."""

    target_rate_hz: float
    mode: str
    duration_s: float | None = None
    frame_count: int | None = None
    staleness_limit_ns: int | None = None  # None: 2 native periods of the slowest device

    def __post_init__(self):
        if not (self.target_rate_hz > 0):
            raise ConfigError(f"target rate must be > 0, got {self.target_rate_hz}")
        if self.mode not in (SERIAL, PARALLEL):
            raise ConfigError(f"mode must be {SERIAL!r} or {PARALLEL!r}, got {self.mode!r}")
        stops = (self.duration_s is not None) + (self.frame_count is not None)
        if stops != 1:
            raise ConfigError("exactly one of duration_s / frame_count must be set")
        if self.duration_s is not None and not (self.duration_s > 0):
            raise ConfigError(f"duration must be > 0, got {self.duration_s}")
        if self.frame_count is not None and self.frame_count < 1:
            raise ConfigError(f"frame count must be >= 1, got {self.frame_count}")


@dataclass
class StalenessStats:
    min_ns: int
    mean_ns: float
    max_ns: int
    count: int


@dataclass
class CollectorMetrics:
    mode: str
    target_rate_hz: float
    frames_emitted: int
    effective_rate_hz: float
    tick_overruns: int
    degraded_frames: int
    read_errors: int
    staleness: dict[str, StalenessStats] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "target_hz": self.target_rate_hz,
            "frames": self.frames_emitted,
            "effective_hz": self.effective_rate_hz,
            "overruns": self.tick_overruns,
            "degraded": self.degraded_frames,
            "streams": {
                sid: {
                    "stale_min_ns": s.min_ns,
                    "stale_mean_ns": s.mean_ns,
                    "stale_max_ns": s.max_ns,
                }
                for sid, s in self.staleness.items()
            },
        }


def associate_latest(samples, tick_ts: int) -> int | None:
    """Index of the newest sample with capture_ts <= tick_ts, None if none.

    The input must be ordered by capture_ts; unordered input is a contract
    violation and raises.
    """
    best = None
    prev = None
    for i, sample in enumerate(samples):
        if prev is not None and sample.capture_ts < prev:
            raise ValueError(f"samples unordered at index {i}")
        prev = sample.capture_ts
        if sample.capture_ts <= tick_ts:
            best = i
    return best


def effective_rate(frames) -> float:
    """Delivery cadence (N-1)/(last - first) in Hz over frame timestamps."""
    if len(frames) < 2:
        raise ValueError(f"effective rate needs >= 2 frames, got {len(frames)}")
    span = frames[-1].tick_ts - frames[0].tick_ts
    return (len(frames) - 1) * NS_PER_S / span


class RateGrid:
    """Integer-exact tick boundaries t0 + floor(k * 1e9 / rate)."""

    def __init__(self, rate_hz: float, t0_ns: int):
        rate = Fraction(str(rate_hz))
        self._num = rate.numerator
        self._den = rate.denominator
        self.t0_ns = t0_ns

    def ts(self, index: int) -> int:
        return self.t0_ns + (index * NS_PER_S * self._den) // self._num

    def next_index_at(self, t_ns: int) -> int:
        """Smallest index whose boundary is >= t_ns."""
        offset = max(0, t_ns - self.t0_ns)
        k = offset * self._num // (NS_PER_S * self._den)
        while self.ts(k) < t_ns:
            k += 1
        while k > 0 and self.ts(k - 1) >= t_ns:
            k -= 1
        return k


class StreamBuffer:
    """Append-only sample record for one stream; safe for one writer, many readers."""

    def __init__(self, stream_id: str):
        self.stream_id = stream_id
        self._samples: list[Sample] = []
        self._ts: list[int] = []
        self._lock = threading.Lock()

    def append(self, sample: Sample) -> int:
        """Record a sample, collapsing exact repeats (same timestamp and payload)."""
        with self._lock:
            if self._ts and sample.capture_ts < self._ts[-1]:
                raise ValueError(
                    f"stream {self.stream_id!r}: capture_ts {sample.capture_ts} "
                    f"before {self._ts[-1]}"
                )
            if (
                self._ts
                and sample.capture_ts == self._ts[-1]
                and self._samples[-1].payload == sample.payload
            ):
                return len(self._samples) - 1
            self._samples.append(sample)
            self._ts.append(sample.capture_ts)
            return len(self._samples) - 1

    def latest_at(self, tick_ts: int) -> int | None:
        with self._lock:
            i = bisect.bisect_right(self._ts, tick_ts) - 1
        return i if i >= 0 else None

    def sample(self, index: int) -> Sample:
        with self._lock:
            return self._samples[index]

    def up_to(self, max_ts: int) -> list[Sample]:
        """Samples with capture_ts <= max_ts, in order."""
        with self._lock:
            k = bisect.bisect_right(self._ts, max_ts)
            return self._samples[:k]


class _RunState:
    """Streams, frames, and counters shared by both scheduling modes."""

    def __init__(self, robot: RobotHandle, cfg: CollectorConfig):
        self.robot = robot
        self.cfg = cfg
        self.taps: dict[str, CommandTap] = {}
        self.stream_order: list[str] = []
        self.buffers: dict[str, StreamBuffer] = {}
        self.schemas: dict[str, str] = {}
        for device_id in robot.all_ids():
            self.stream_order.append(device_id)
            self.schemas[device_id] = robot.registry.descriptor(device_id).schema
        for device_id in robot.controllers:
            driver = robot.device(device_id)
            if isinstance(driver, CommandTap):
                self.taps[device_id] = driver
                self.stream_order.append(driver.stream_id)
                self.schemas[driver.stream_id] = PAYLOAD_JOINTS
        for sid in self.stream_order:
            self.buffers[sid] = StreamBuffer(sid)
        self.frames: list[Frame] = []
        self.tick_overruns = 0
        self.read_errors = 0

    def staleness_limit_ns(self) -> int:
        if self.cfg.staleness_limit_ns is not None:
            return self.cfg.staleness_limit_ns
        slowest = min(
            self.robot.registry.descriptor(d).nominal_rate_hz for d in self.robot.all_ids()
        )
        return int(2 * NS_PER_S / slowest)

    def drain_taps(self) -> None:
        for tap in self.taps.values():
            for sample in tap.drain_commands():
                self.buffers[tap.stream_id].append(sample)

    def assemble_frame(self, tick_ts: int, failed: set[str]) -> None:
        slots: dict[str, int | None] = {}
        staleness: dict[str, int] = {}
        for sid in self.stream_order:
            if sid in failed:
                slots[sid] = None
                continue
            idx = self.buffers[sid].latest_at(tick_ts)
            slots[sid] = idx
            if idx is not None:
                staleness[sid] = tick_ts - self.buffers[sid].sample(idx).capture_ts
        self.frames.append(
            Frame(
                tick_index=len(self.frames),
                tick_ts=tick_ts,
                slots=slots,
                staleness=staleness,
            )
        )

    def should_stop(self, next_tick_ts: int, t0_ns: int) -> bool:
        if self.cfg.frame_count is not None:
            return len(self.frames) >= self.cfg.frame_count
        return next_tick_ts - t0_ns >= int(self.cfg.duration_s * NS_PER_S)

    def finish(self, episode_id: str | None, task: str) -> tuple[Episode, CollectorMetrics]:
        limit = self.staleness_limit_ns()
        degraded = 0
        acc: dict[str, list[int]] = {sid: [] for sid in self.stream_order}
        for frame in self.frames:
            bad = any(v is None for v in frame.slots.values())
            for sid, stale in frame.staleness.items():
                acc[sid].append(stale)
                if stale > limit:
                    bad = True
            if bad:
                degraded += 1
        stats = {
            sid: StalenessStats(
                min_ns=min(vals),
                mean_ns=sum(vals) / len(vals),
                max_ns=max(vals),
                count=len(vals),
            )
            for sid, vals in acc.items()
            if vals
        }
        metrics = CollectorMetrics(
            mode=self.cfg.mode,
            target_rate_hz=self.cfg.target_rate_hz,
            frames_emitted=len(self.frames),
            effective_rate_hz=effective_rate(self.frames) if len(self.frames) >= 2 else 0.0,
            tick_overruns=self.tick_overruns,
            degraded_frames=degraded,
            read_errors=self.read_errors,
            staleness=stats,
        )
        last_ts = self.frames[-1].tick_ts if self.frames else 0
        episode = Episode(
            id=episode_id or uuid.uuid4().hex[:12],
            task=task,
            config=self.robot.config,
            frames=self.frames,
            streams={sid: self.buffers[sid].up_to(last_ts) for sid in self.stream_order},
            schemas=dict(self.schemas),
            meta={"mode": self.cfg.mode, "target_hz": repr(self.cfg.target_rate_hz)},
        )
        return episode, metrics


def run_serial(
    robot: RobotHandle,
    cfg: CollectorConfig,
    clock: Clock,
    *,
    episode_id: str | None = None,
    task: str = "",
    stop: threading.Event | None = None,
) -> tuple[Episode, CollectorMetrics]:
    """Poll every device inside the tick loop; latency eats the tick budget.

    An optional stop event ends the run at the next tick boundary before the
    configured stop rule is reached.
    """
    if cfg.mode != SERIAL:
        raise ConfigError(f"run_serial needs mode {SERIAL!r}, got {cfg.mode!r}")
    state = _RunState(robot, cfg)
    with ensure_task(clock, "serial-tick"):
        grid = RateGrid(cfg.target_rate_hz, clock.now_ns())
        index = 0
        sleep_first = True
        while True:
            tick_ts = grid.ts(index)
            if stop is not None and stop.is_set():
                break
            if state.should_stop(tick_ts, grid.t0_ns):
                break
            if sleep_first:
                clock.sleep_until_ns(tick_ts)
            failed: set[str] = set()
            for device_id in robot.all_ids():
                try:
                    sample = robot.device(device_id).read()
                except Exception:
                    state.read_errors += 1
                    failed.add(device_id)
                else:
                    state.buffers[device_id].append(sample)
            state.drain_taps()
            state.assemble_frame(tick_ts, failed)
            end = clock.now_ns()
            if end > grid.ts(index + 1):
                # missed the next boundary: skip to the first future one and
                # start that tick immediately
                state.tick_overruns += 1
                index = grid.next_index_at(end)
                sleep_first = False
            else:
                index += 1
                sleep_first = True
    return state.finish(episode_id, task)


def _poller(
    clock: Clock,
    handle,
    device_id: str,
    driver,
    buffer: StreamBuffer,
    grid: RateGrid,
    stop: threading.Event,
    errors: queue.SimpleQueue,
) -> None:
    with handle:
        index = 0
        while True:
            clock.sleep_until_ns(grid.ts(index))
            if stop.is_set():
                return
            try:
                sample = driver.read()
            except Exception as exc:
                errors.put((device_id, repr(exc)))
            else:
                buffer.append(sample)
            index = max(index + 1, grid.next_index_at(clock.now_ns()))


def run_parallel(
    robot: RobotHandle,
    cfg: CollectorConfig,
    clock: Clock,
    *,
    episode_id: str | None = None,
    task: str = "",
    stop: threading.Event | None = None,
) -> tuple[Episode, CollectorMetrics]:
    """One poller per device at its native rate; the tick loop never blocks
    on device latency, it only associates buffered samples.

    An optional stop event ends the run at the next tick boundary before the
    configured stop rule is reached.
    """
    if cfg.mode != PARALLEL:
        raise ConfigError(f"run_parallel needs mode {PARALLEL!r}, got {cfg.mode!r}")
    state = _RunState(robot, cfg)
    poller_stop = threading.Event()
    errors: queue.SimpleQueue = queue.SimpleQueue()
    t0 = clock.now_ns()
    # poller registration precedes the tick task: at a shared instant pollers
    # wake first, so the tick sees every sample captured at or before it
    pollers = []
    for device_id in robot.all_ids():
        handle = clock.register_task(f"poll-{device_id}")
        grid = RateGrid(robot.registry.descriptor(device_id).nominal_rate_hz, t0)
        thread = threading.Thread(
            target=_poller,
            args=(
                clock,
                handle,
                device_id,
                robot.device(device_id),
                state.buffers[device_id],
                grid,
                poller_stop,
                errors,
            ),
            name=f"poll-{device_id}",
            daemon=True,
        )
        pollers.append(thread)
    with ensure_task(clock, "parallel-tick"):
        for thread in pollers:
            thread.start()
        grid = RateGrid(cfg.target_rate_hz, t0)
        index = 0
        while True:
            tick_ts = grid.ts(index)
            if stop is not None and stop.is_set():
                break
            if state.should_stop(tick_ts, t0):
                break
            clock.sleep_until_ns(tick_ts)
            failed: set[str] = set()
            while True:
                try:
                    device_id, _ = errors.get_nowait()
                except queue.Empty:
                    break
                state.read_errors += 1
                failed.add(device_id)
            state.drain_taps()
            state.assemble_frame(tick_ts, failed)
            end = clock.now_ns()
            if end > grid.ts(index + 1):
                state.tick_overruns += 1
                index = grid.next_index_at(end)
            else:
                index += 1
        poller_stop.set()
    for thread in pollers:
        thread.join()
    return state.finish(episode_id, task)


def run_collection(
    robot: RobotHandle,
    cfg: CollectorConfig,
    clock: Clock,
    *,
    episode_id: str | None = None,
    task: str = "",
    stop: threading.Event | None = None,
) -> tuple[Episode, CollectorMetrics]:
    runner = run_serial if cfg.mode == SERIAL else run_parallel
    return runner(robot, cfg, clock, episode_id=episode_id, task=task, stop=stop)
