"""Uniform device contract and rig assembly.

Every controller and sensor implements the same two-method surface
(:meth:`Device.read`, :meth:`Device.write`) plus a descriptor; a registry
collects drivers under unique ids and :func:`build_robot` binds a validated
set of them to a :class:`~rigkit.core.RobotConfig`. All binding errors
surface before any control loop starts.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .clock import Clock
from .core import (
    ArmSpec,
    CameraSpec,
    ConfigError,
    JOINTS_PER_ARM,
    RobotConfig,
    Sample,
)

COMMAND_STREAM_SUFFIX = ".cmd"


class DeviceKind(str, Enum):
    CONTROLLER = "controller"
    SENSOR = "sensor"


@dataclass(frozen=True)
class LatencyModel:
    """Read cost: a base duration plus a periodic spike.

    Every ``spike_period``-th read (indices 0, k, 2k, ...) takes
    ``base_us + spike_us``; ``spike_period = 0`` disables spikes.
    """

    base_us: int = 0
    spike_us: int = 0
    spike_period: int = 0

    def __post_init__(self):
        if self.base_us < 0 or self.spike_us < 0 or self.spike_period < 0:
            raise ConfigError("latency model fields must be >= 0")

    def read_latency_us(self, read_index: int) -> int:
        if self.spike_period > 0 and read_index % self.spike_period == 0:
            return self.base_us + self.spike_us
        return self.base_us


@dataclass(frozen=True)
class DeviceDescriptor:
    id: str
    kind: DeviceKind
    schema: str  # payload kind tag: joints | image | scalar
    nominal_rate_hz: float
    latency: LatencyModel = field(default_factory=LatencyModel)

    def __post_init__(self):
        if not self.id:
            raise ConfigError("device id must be non-empty")
        if not (self.nominal_rate_hz > 0):
            raise ConfigError(f"device {self.id!r}: nominal rate must be > 0")


class RegistryError(ValueError):
    """Registration or robot-assembly failure."""


class WriteNotSupported(RuntimeError):
    """write() called on a device without a command path (sensors)."""


class Device:
    """Abstract driver contract.

    ``read`` blocks for the device's simulated latency and returns a sample
    whose ``capture_ts`` is when the underlying value became valid, not when
    the call returned. ``write`` accepts a command and acknowledges;
    sensors raise :class:`WriteNotSupported`. Drivers must tolerate one
    concurrent reader plus one concurrent writer.
    """

    def descriptor(self) -> DeviceDescriptor:
        raise NotImplementedError

    def read(self) -> Sample:
        raise NotImplementedError

    def write(self, command) -> bool:
        raise WriteNotSupported(f"{self.descriptor().id} does not accept commands")


class CommandTap(Device):
    """Controller wrapper that records every acknowledged write.

    Commands become samples on the stream ``<device id>.cmd`` stamped at
    write time, so a collector draining the tap stores the actions alongside
    the observations they caused. Reads pass straight through.
    """

    def __init__(self, inner: Device, clock: Clock):
        self._inner = inner
        self._clock = clock
        self._lock = threading.Lock()
        self._pending: list[Sample] = []
        self.stream_id = inner.descriptor().id + COMMAND_STREAM_SUFFIX

    def descriptor(self) -> DeviceDescriptor:
        return self._inner.descriptor()

    def read(self) -> Sample:
        return self._inner.read()

    def write(self, command) -> bool:
        ack = self._inner.write(command)
        if ack:
            sample = Sample(self.stream_id, self._clock.now_ns(), command)
            with self._lock:
                self._pending.append(sample)
        return ack

    def drain_commands(self) -> list[Sample]:
        with self._lock:
            out = self._pending
            self._pending = []
        return out


class Registry:
    """Id-keyed device table; insertion order is preserved for listing."""

    def __init__(self):
        self._devices: dict[str, tuple[DeviceDescriptor, Device]] = {}

    def __len__(self) -> int:
        return len(self._devices)

    def __contains__(self, device_id: str) -> bool:
        return device_id in self._devices

    def get(self, device_id: str) -> Device:
        try:
            return self._devices[device_id][1]
        except KeyError:
            raise RegistryError(f"unknown device id {device_id!r}") from None

    def descriptor(self, device_id: str) -> DeviceDescriptor:
        try:
            return self._devices[device_id][0]
        except KeyError:
            raise RegistryError(f"unknown device id {device_id!r}") from None


def register(reg: Registry, desc: DeviceDescriptor, driver: Device) -> str:
    if desc.id in reg:
        raise RegistryError(f"device id {desc.id!r} already registered")
    if driver.descriptor() != desc:
        raise RegistryError(
            f"driver descriptor mismatch for {desc.id!r}: "
            f"driver reports {driver.descriptor()!r}"
        )
    reg._devices[desc.id] = (desc, driver)
    return desc.id


def list_devices(reg: Registry) -> list[DeviceDescriptor]:
    return [desc for desc, _ in reg._devices.values()]


@dataclass(frozen=True)
class RobotHandle:
    """Validated binding of registered devices to a robot configuration."""

    config: RobotConfig
    controllers: tuple[str, ...]
    sensors: tuple[str, ...]
    registry: Registry

    def controller(self, index: int) -> Device:
        return self.registry.get(self.controllers[index])

    def device(self, device_id: str) -> Device:
        return self.registry.get(device_id)

    def all_ids(self) -> list[str]:
        return list(self.controllers) + list(self.sensors)


def build_robot(
    reg: Registry,
    config: RobotConfig,
    controller_ids,
    sensor_ids,
) -> RobotHandle:
    controller_ids = tuple(controller_ids)
    sensor_ids = tuple(sensor_ids)
    for device_id in (*controller_ids, *sensor_ids):
        if device_id not in reg:
            raise RegistryError(f"unknown device id {device_id!r}")
    for device_id in controller_ids:
        kind = reg.descriptor(device_id).kind
        if kind != DeviceKind.CONTROLLER:
            raise RegistryError(
                f"device {device_id!r} is a {kind.value}, expected a controller"
            )
    for device_id in sensor_ids:
        kind = reg.descriptor(device_id).kind
        if kind != DeviceKind.SENSOR:
            raise RegistryError(
                f"device {device_id!r} is a {kind.value}, expected a sensor"
            )
    if len(controller_ids) != len(config.arms):
        raise RegistryError(
            f"config {config.name!r} has {len(config.arms)} arm(s) but "
            f"{len(controller_ids)} controller(s) were bound"
        )
    return RobotHandle(
        config=config,
        controllers=controller_ids,
        sensors=sensor_ids,
        registry=reg,
    )


# -- robot configuration files ------------------------------------------------
#
# UTF-8 JSON:
# {
#   "name": str,
#   "arms": [{"joints": 6, "gripper": true,
#             "v_max": [...7], "q_min": [...7], "q_max": [...7]}],
#   "cameras": [{"id": str, "width": int, "height": int,
#                "channels": int, "rate_hz": float}],
#   "devices": [{"id": str, "kind": "controller"|"sensor", "rate_hz": float,
#                "latency": {"base_us": int, "spike_us": int,
#                            "spike_period": int}}]
# }


@dataclass(frozen=True)
class DeviceSpec:
    """One entry of the config file's device table."""

    id: str
    kind: DeviceKind
    rate_hz: float
    latency: LatencyModel


@dataclass(frozen=True)
class RigSpec:
    """Parsed robot configuration file: the rig shape plus its device table."""

    config: RobotConfig
    devices: tuple[DeviceSpec, ...]


def parse_rig_spec(data: dict) -> RigSpec:
    try:
        name = data["name"]
        arms = []
        for arm in data["arms"]:
            joints = arm.get("joints", JOINTS_PER_ARM)
            if joints != JOINTS_PER_ARM:
                raise ConfigError(f"arms must have {JOINTS_PER_ARM} joints, got {joints}")
            if not arm.get("gripper", True):
                raise ConfigError("arms must declare a gripper dimension")
            arms.append(
                ArmSpec(
                    v_max=arm["v_max"], q_min=arm["q_min"], q_max=arm["q_max"]
                )
            )
        cameras = [
            CameraSpec(
                id=cam["id"],
                width=cam.get("width", 64),
                height=cam.get("height", 48),
                channels=cam.get("channels", 1),
                rate_hz=cam.get("rate_hz", 30.0),
            )
            for cam in data.get("cameras", [])
        ]
        devices = []
        for dev in data.get("devices", []):
            lat = dev.get("latency", {})
            devices.append(
                DeviceSpec(
                    id=dev["id"],
                    kind=DeviceKind(dev["kind"]),
                    rate_hz=float(dev["rate_hz"]),
                    latency=LatencyModel(
                        base_us=int(lat.get("base_us", 0)),
                        spike_us=int(lat.get("spike_us", 0)),
                        spike_period=int(lat.get("spike_period", 0)),
                    ),
                )
            )
    except KeyError as exc:
        raise ConfigError(f"robot config missing field {exc.args[0]!r}") from None
    config = RobotConfig(name=name, arms=tuple(arms), cameras=tuple(cameras))
    return RigSpec(config=config, devices=tuple(devices))


def load_rig_spec(path: str | Path) -> RigSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_rig_spec(json.load(fh))
