"""Simulated hardware: arms, cameras, and scripted leader motion.

Drivers here satisfy the device contract against any clock, so the same
collector and control code runs wall-time or inside a virtual-clock test.
Dynamics are deterministic given a seed; measurement noise only perturbs
reported positions, never the internal state.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from .clock import Clock, NS_PER_S, NS_PER_US
from .core import (
    ArmSpec,
    CameraSpec,
    ConfigError,
    ImagePayload,
    JointVector,
    Sample,
)
from .registry import (
    CommandTap,
    Device,
    DeviceDescriptor,
    DeviceKind,
    Registry,
    RigSpec,
    RobotHandle,
    build_robot,
    parse_rig_spec,
    register,
)

# -- arm dynamics -------------------------------------------------------------


@dataclass(frozen=True)
class SimArmState:
    """Pure arm state: actual position and the commanded target."""

    q: tuple[float, ...]
    target: tuple[float, ...]


def sim_arm_step(state: SimArmState, spec: ArmSpec, dt_s: float) -> SimArmState:
    """Advance rate-limited first-order tracking by ``dt_s`` seconds.

    Each dim moves toward its target at most ``v_max * dt`` and is clamped
    into its position limits. Because the target is constant over the step,
    one call over a long interval lands exactly where many short calls would.
    """
    if dt_s <= 0:
        raise ConfigError(f"dt must be > 0, got {dt_s}")
    q = np.asarray(state.q)
    target = np.asarray(state.target)
    limit = np.asarray(spec.v_max) * dt_s
    q = q + np.clip(target - q, -limit, limit)
    q = np.clip(q, spec.q_min, spec.q_max)
    return SimArmState(q=tuple(q.tolist()), target=state.target)


class SimArm(Device):
    """Controller driver with lazy dynamics.

    State is integrated on demand from the last touch time to now, so the
    arm needs no stepper thread and is exact under a virtual clock. Reads
    block for the descriptor's latency model; writes acknowledge instantly.
    """

    def __init__(
        self,
        descriptor: DeviceDescriptor,
        spec: ArmSpec,
        clock: Clock,
        home: JointVector | None = None,
        noise_sigma: float = 0.0,
        seed: int = 0,
    ):
        if descriptor.kind != DeviceKind.CONTROLLER:
            raise ConfigError(f"arm driver needs a controller descriptor, got {descriptor.kind}")
        self._desc = descriptor
        self._spec = spec
        self._clock = clock
        if home is None:
            home = JointVector([0.0] * len(spec.v_max))
        q0 = tuple(min(max(v, lo), hi) for v, lo, hi in zip(home, spec.q_min, spec.q_max))
        self._state = SimArmState(q=q0, target=q0)
        self._t_ns = clock.now_ns()
        self._noise_sigma = float(noise_sigma)
        self._rng = np.random.default_rng(seed)
        self._reads = 0
        self._lock = threading.Lock()

    def descriptor(self) -> DeviceDescriptor:
        return self._desc

    def _advance_locked(self, now_ns: int) -> None:
        if now_ns > self._t_ns:
            self._state = sim_arm_step(self._state, self._spec, (now_ns - self._t_ns) / NS_PER_S)
            self._t_ns = now_ns

    def read(self) -> Sample:
        with self._lock:
            now = self._clock.now_ns()
            self._advance_locked(now)
            q = np.asarray(self._state.q)
            if self._noise_sigma > 0:
                q = q + self._noise_sigma * self._rng.standard_normal(q.size)
            sample = Sample(self._desc.id, now, JointVector(q))
            index = self._reads
            self._reads += 1
        lat_us = self._desc.latency.read_latency_us(index)
        if lat_us:
            self._clock.sleep_ns(lat_us * NS_PER_US)
        return sample

    def write(self, command) -> bool:
        if not isinstance(command, JointVector):
            raise ConfigError(f"arm command must be a joint vector, got {type(command).__name__}")
        if command.dim != len(self._spec.v_max):
            raise ConfigError(
                f"arm {self._desc.id!r} takes {len(self._spec.v_max)} dims, got {command.dim}"
            )
        with self._lock:
            self._advance_locked(self._clock.now_ns())
            self._state = SimArmState(q=self._state.q, target=command.values)
        return True

    def position(self) -> JointVector:
        """Noise-free actual position at the current instant."""
        with self._lock:
            self._advance_locked(self._clock.now_ns())
            return JointVector(self._state.q)


# -- camera -------------------------------------------------------------------


def camera_frame_ts(rate_hz: float, index: int) -> int:
    """Generation instant of frame ``index`` on the camera's native grid."""
    rate = Fraction(str(rate_hz))
    return (index * NS_PER_S * rate.denominator) // rate.numerator


def camera_frame_index(rate_hz: float, t_ns: int) -> int:
    """Index of the newest frame generated at or before ``t_ns``."""
    if t_ns < 0:
        raise ConfigError(f"time must be >= 0, got {t_ns}")
    k = int(t_ns * rate_hz / NS_PER_S)
    while camera_frame_ts(rate_hz, k + 1) <= t_ns:
        k += 1
    while k > 0 and camera_frame_ts(rate_hz, k) > t_ns:
        k -= 1
    return k


def camera_frame_bytes(spec: CameraSpec, index: int) -> bytes:
    """Row-major synthetic image: pixel (x, y, c) = (x + y + index + c) mod 256."""
    x = np.arange(spec.width, dtype=np.int64)[None, :, None]
    y = np.arange(spec.height, dtype=np.int64)[:, None, None]
    c = np.arange(spec.channels, dtype=np.int64)[None, None, :]
    return ((x + y + c + index) % 256).astype(np.uint8).tobytes()


class SimCamera(Device):
    """Sensor driver producing deterministic frames on a fixed native grid.

    A read returns the newest frame generated at or before the read instant,
    stamped with its generation time, so two reads inside one frame period
    return byte-identical payloads with equal timestamps.
    """

    def __init__(self, descriptor: DeviceDescriptor, spec: CameraSpec, clock: Clock):
        if descriptor.kind != DeviceKind.SENSOR:
            raise ConfigError(f"camera driver needs a sensor descriptor, got {descriptor.kind}")
        self._desc = descriptor
        self._spec = spec
        self._clock = clock
        self._reads = 0
        self._cached: tuple[int, bytes] | None = None
        self._lock = threading.Lock()

    def descriptor(self) -> DeviceDescriptor:
        return self._desc

    def read(self) -> Sample:
        with self._lock:
            now = self._clock.now_ns()
            k = camera_frame_index(self._spec.rate_hz, now)
            if self._cached is None or self._cached[0] != k:
                self._cached = (k, camera_frame_bytes(self._spec, k))
            payload = ImagePayload(
                width=self._spec.width,
                height=self._spec.height,
                channels=self._spec.channels,
                pixels=self._cached[1],
            )
            sample = Sample(self._desc.id, camera_frame_ts(self._spec.rate_hz, k), payload)
            index = self._reads
            self._reads += 1
        lat_us = self._desc.latency.read_latency_us(index)
        if lat_us:
            self._clock.sleep_ns(lat_us * NS_PER_US)
        return sample


# -- scripted leader ----------------------------------------------------------


@dataclass(frozen=True)
class SineChannel:
    amplitude: float
    freq_hz: float
    phase_rad: float = 0.0

    def value_at(self, t_s: float) -> float:
        return self.amplitude * math.sin(2 * math.pi * self.freq_hz * t_s + self.phase_rad)


@dataclass(frozen=True)
class HoldChannel:
    value: float

    def value_at(self, t_s: float) -> float:
        return self.value


@dataclass(frozen=True)
class ScriptSegment:
    duration_s: float
    channels: tuple

    def __post_init__(self):
        if not (self.duration_s > 0):
            raise ConfigError(f"segment duration must be > 0, got {self.duration_s}")
        if not self.channels:
            raise ConfigError("segment needs at least one channel")


@dataclass(frozen=True)
class LeaderScript:
    """Piecewise per-joint motion: sines and holds over timed segments."""

    segments: tuple[ScriptSegment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ConfigError("leader script needs at least one segment")
        dims = {len(seg.channels) for seg in self.segments}
        if len(dims) != 1:
            raise ConfigError(f"all segments must share one dimension, got {sorted(dims)}")

    @property
    def dim(self) -> int:
        return len(self.segments[0].channels)

    @property
    def duration_s(self) -> float:
        return sum(seg.duration_s for seg in self.segments)


def leader_position(script: LeaderScript, t_ns: int) -> JointVector:
    """Leader pose at session time; past the final segment the end pose holds."""
    t = max(0, t_ns) / NS_PER_S
    start = 0.0
    seg = script.segments[-1]
    local = seg.duration_s
    for candidate in script.segments:
        if t < start + candidate.duration_s:
            seg = candidate
            local = t - start
            break
        start += candidate.duration_s
    return JointVector(ch.value_at(local) for ch in seg.channels)


def parse_leader_script(data: dict) -> LeaderScript:
    try:
        segments = []
        for seg in data["segments"]:
            kind = seg["kind"]
            channels = []
            for ch in seg["per_joint"]:
                if kind == "sine":
                    channels.append(
                        SineChannel(
                            amplitude=float(ch["A"]),
                            freq_hz=float(ch["f"]),
                            phase_rad=float(ch.get("phi", 0.0)),
                        )
                    )
                elif kind == "hold":
                    channels.append(HoldChannel(value=float(ch["value"])))
                else:
                    raise ConfigError(f"unknown segment kind {kind!r}")
            segments.append(
                ScriptSegment(duration_s=float(seg["duration_s"]), channels=tuple(channels))
            )
    except KeyError as exc:
        raise ConfigError(f"leader script missing field {exc.args[0]!r}") from None
    return LeaderScript(segments=tuple(segments))


def load_leader_script(path: str | Path) -> LeaderScript:
    with open(path, encoding="utf-8") as fh:
        return parse_leader_script(json.load(fh))


# -- rig assembly -------------------------------------------------------------


def reference_rig() -> RigSpec:
    """The packaged dual-arm benchmark rig: two 200 Hz arm-state buses plus
    one 30 Hz camera whose read latency spikes periodically."""
    text = (
        resources.files("rigkit").joinpath("configs/reference_rig.json").read_text("utf-8")
    )
    return parse_rig_spec(json.loads(text))


def build_sim_rig(
    rig: RigSpec,
    clock: Clock,
    *,
    tap_commands: bool = True,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> tuple[Registry, RobotHandle]:
    """Instantiate simulated drivers for every device of a parsed rig file.

    Controllers bind to arms in declaration order and, when ``tap_commands``
    is set, are wrapped so their accepted writes surface as command streams.
    Each sensor id must name a camera from the same file.
    """
    registry = Registry()
    cameras = {cam.id: cam for cam in rig.config.cameras}
    controller_ids = [d.id for d in rig.devices if d.kind == DeviceKind.CONTROLLER]
    sensor_ids = [d.id for d in rig.devices if d.kind == DeviceKind.SENSOR]
    if len(controller_ids) != len(rig.config.arms):
        raise ConfigError(
            f"rig {rig.config.name!r} declares {len(rig.config.arms)} arm(s) "
            f"but {len(controller_ids)} controller device(s)"
        )
    arm_index = 0
    for dev in rig.devices:
        if dev.kind == DeviceKind.CONTROLLER:
            desc = DeviceDescriptor(
                id=dev.id,
                kind=DeviceKind.CONTROLLER,
                schema="joints",
                nominal_rate_hz=dev.rate_hz,
                latency=dev.latency,
            )
            driver: Device = SimArm(
                desc,
                rig.config.arms[arm_index],
                clock,
                noise_sigma=noise_sigma,
                seed=seed + arm_index,
            )
            arm_index += 1
            if tap_commands:
                driver = CommandTap(driver, clock)
        else:
            if dev.id not in cameras:
                raise ConfigError(f"sensor {dev.id!r} has no matching camera entry")
            desc = DeviceDescriptor(
                id=dev.id,
                kind=DeviceKind.SENSOR,
                schema="image",
                nominal_rate_hz=dev.rate_hz,
                latency=dev.latency,
            )
            driver = SimCamera(desc, cameras[dev.id], clock)
        register(registry, desc, driver)
    handle = build_robot(registry, rig.config, controller_ids, sensor_ids)
    return registry, handle
