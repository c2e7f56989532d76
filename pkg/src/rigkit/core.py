"""Shared domain vocabulary: time, joint vectors, samples, frames, episodes.

Everything here is immutable after construction and safe to share across
threads. Validation happens at construction for local invariants; whole
episode consistency is checked by :func:`validate_episode`, which reports
violations as data instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

JOINTS_PER_ARM = 6
DIMS_PER_ARM = 7  # 6 joints + 1 normalized gripper aperture

MISSING = None


class ConfigError(ValueError):
    """Raised when a robot configuration or joint vector is malformed."""


@dataclass(frozen=True)
class JointVector:
    """Ordered joint positions in radians; gripper dims are [0, 1] aperture."""

    values: tuple[float, ...]

    def __init__(self, values):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ConfigError("joint vector must have at least one dimension")
        for i, v in enumerate(vals):
            if not math.isfinite(v):
                raise ConfigError(f"joint {i} is not finite: {v!r}")
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return len(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, idx: int) -> float:
        return self.values[idx]

    def __iter__(self):
        return iter(self.values)


@dataclass(frozen=True)
class ArmSpec:
    """One arm: six revolute joints plus a gripper, with motion limits."""

    v_max: tuple[float, ...]  # rad/s (aperture/s for the gripper dim)
    q_min: tuple[float, ...]
    q_max: tuple[float, ...]

    def __post_init__(self):
        for name in ("v_max", "q_min", "q_max"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        n = len(self.v_max)
        if n != DIMS_PER_ARM:
            raise ConfigError(f"arm limits must cover {DIMS_PER_ARM} dims, got {n}")
        if len(self.q_min) != n or len(self.q_max) != n:
            raise ConfigError("q_min/q_max length mismatch with v_max")
        for j, v in enumerate(self.v_max):
            if not (v > 0):
                raise ConfigError(f"velocity limit for dim {j} must be > 0, got {v}")
        for j, (lo, hi) in enumerate(zip(self.q_min, self.q_max)):
            if not (lo < hi):
                raise ConfigError(f"position limits for dim {j} need min < max, got [{lo}, {hi}]")


@dataclass(frozen=True)
class CameraSpec:
    id: str
    width: int = 64
    height: int = 48
    channels: int = 1
    rate_hz: float = 30.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"camera {self.id}: dimensions must be positive")
        if self.channels not in (1, 3):
            raise ConfigError(f"camera {self.id}: channels must be 1 or 3")
        if not (self.rate_hz > 0):
            raise ConfigError(f"camera {self.id}: rate must be > 0")


@dataclass(frozen=True)
class RobotConfig:
    """A rig shape: arms with limits plus camera ids."""

    name: str
    arms: tuple[ArmSpec, ...]
    cameras: tuple[CameraSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.name:
            raise ConfigError("robot config needs a name")
        if not self.arms:
            raise ConfigError("robot config needs at least one arm")
        seen = set()
        for cam in self.cameras:
            if cam.id in seen:
                raise ConfigError(f"duplicate camera id {cam.id!r}")
            seen.add(cam.id)

    @property
    def v_max(self) -> tuple[float, ...]:
        return tuple(v for arm in self.arms for v in arm.v_max)

    @property
    def q_min(self) -> tuple[float, ...]:
        return tuple(v for arm in self.arms for v in arm.q_min)

    @property
    def q_max(self) -> tuple[float, ...]:
        return tuple(v for arm in self.arms for v in arm.q_max)

    def clamp(self, q: JointVector) -> JointVector:
        return JointVector(
            min(max(v, lo), hi) for v, lo, hi in zip(q.values, self.q_min, self.q_max)
        )

    def check_joints(self, q: JointVector) -> list[str]:
        """Limit violations for a joint vector, empty when in range."""
        out = []
        if q.dim != action_dim(self):
            out.append(f"dim {q.dim} != action dim {action_dim(self)}")
            return out
        for j, (v, lo, hi) in enumerate(zip(q.values, self.q_min, self.q_max)):
            if not (lo <= v <= hi):
                out.append(f"dim {j}: {v} outside [{lo}, {hi}]")
        return out


def action_dim(config: RobotConfig) -> int:
    """Dimension of one action/state vector: 7 per arm (6 joints + gripper)."""
    return DIMS_PER_ARM * len(config.arms)


def default_arm(
    v_max: float = 2.0, q_min: float = -3.1, q_max: float = 3.1
) -> ArmSpec:
    """An arm with uniform joint limits and a [0, 1] gripper dimension."""
    return ArmSpec(
        v_max=(v_max,) * JOINTS_PER_ARM + (1.5,),
        q_min=(q_min,) * JOINTS_PER_ARM + (0.0,),
        q_max=(q_max,) * JOINTS_PER_ARM + (1.0,),
    )


@dataclass(frozen=True)
class ImagePayload:
    """Row-major pixel block; length must equal width*height*channels."""

    width: int
    height: int
    channels: int
    pixels: bytes

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image dimensions must be positive")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        expected = self.width * self.height * self.channels
        if len(self.pixels) != expected:
            raise ConfigError(
                f"pixel buffer is {len(self.pixels)} bytes, expected {expected}"
            )

    def at(self, x: int, y: int, c: int = 0) -> int:
        return self.pixels[(y * self.width + x) * self.channels + c]


Payload = JointVector | ImagePayload | float

PAYLOAD_JOINTS = "joints"
PAYLOAD_IMAGE = "image"
PAYLOAD_SCALAR = "scalar"


def payload_kind(payload: Payload) -> str:
    if isinstance(payload, JointVector):
        return PAYLOAD_JOINTS
    if isinstance(payload, ImagePayload):
        return PAYLOAD_IMAGE
    return PAYLOAD_SCALAR


@dataclass(frozen=True)
class Sample:
    """One timestamped device reading."""

    stream_id: str
    capture_ts: int  # ns since session epoch
    payload: Payload

    def __post_init__(self):
        if self.capture_ts < 0:
            raise ConfigError(f"capture_ts must be >= 0, got {self.capture_ts}")


@dataclass(frozen=True)
class Frame:
    """One synchronized multi-stream snapshot at a collector tick.

    ``slots`` maps every declared stream to the index of the associated
    sample in that stream's record list, or ``None`` when no sample with
    ``capture_ts <= tick_ts`` existed yet.
    """

    tick_index: int
    tick_ts: int
    slots: dict[str, int | None]
    staleness: dict[str, int] = field(default_factory=dict)


@dataclass
class Episode:
    """One recording: frames plus the raw per-stream samples behind them."""

    id: str
    task: str
    config: RobotConfig
    frames: list[Frame]
    streams: dict[str, list[Sample]]
    schemas: dict[str, str] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def stream_ids(self) -> list[str]:
        return list(self.streams.keys())


def staleness_of(frame: Frame, stream_id: str) -> int | None:
    """Tick timestamp minus capture timestamp for one slot; None if empty."""
    if stream_id not in frame.slots:
        raise KeyError(f"stream {stream_id!r} not present in frame slots")
    if frame.slots[stream_id] is None:
        return None
    return frame.staleness[stream_id]


def validate_episode(ep: Episode) -> list[str]:
    """Check every episode invariant; returns violations, empty when valid."""
    problems: list[str] = []

    if not ep.frames:
        problems.append("episode has no frames")

    for i, frame in enumerate(ep.frames):
        if frame.tick_index != i:
            problems.append(
                f"frame {i}: tick_index {frame.tick_index} breaks 0..N-1 sequence"
            )
    for prev, cur in zip(ep.frames, ep.frames[1:]):
        if cur.tick_ts <= prev.tick_ts:
            problems.append(
                f"frame {cur.tick_index}: tick_ts {cur.tick_ts} not after {prev.tick_ts}"
            )

    for sid, samples in ep.streams.items():
        for a, b in zip(samples, samples[1:]):
            if b.capture_ts < a.capture_ts:
                problems.append(f"stream {sid!r}: capture_ts not non-decreasing")
                break
        kinds = {payload_kind(s.payload) for s in samples}
        declared = ep.schemas.get(sid)
        if declared is not None and kinds - {declared}:
            problems.append(
                f"stream {sid!r}: payload kinds {sorted(kinds)} != declared {declared!r}"
            )
        elif len(kinds) > 1:
            problems.append(f"stream {sid!r}: mixed payload kinds {sorted(kinds)}")

    for frame in ep.frames:
        for sid, ref in frame.slots.items():
            if sid not in ep.streams:
                problems.append(
                    f"frame {frame.tick_index}: slot for undeclared stream {sid!r}"
                )
                continue
            if ref is None:
                continue
            samples = ep.streams[sid]
            if not (0 <= ref < len(samples)):
                problems.append(
                    f"frame {frame.tick_index}: slot {sid!r} references record {ref} "
                    f"but stream has {len(samples)}"
                )
                continue
            stale = frame.tick_ts - samples[ref].capture_ts
            if stale < 0:
                problems.append(
                    f"frame {frame.tick_index}: slot {sid!r} staleness {stale} < 0"
                )
            recorded = frame.staleness.get(sid)
            if recorded is not None and recorded != stale:
                problems.append(
                    f"frame {frame.tick_index}: slot {sid!r} recorded staleness "
                    f"{recorded} != actual {stale}"
                )
    return problems


def config_to_json_dict(config: RobotConfig) -> dict:
    return {
        "name": config.name,
        "arms": [
            {"v_max": list(a.v_max), "q_min": list(a.q_min), "q_max": list(a.q_max)}
            for a in config.arms
        ],
        "cameras": [
            {
                "id": c.id,
                "width": c.width,
                "height": c.height,
                "channels": c.channels,
                "rate_hz": c.rate_hz,
            }
            for c in config.cameras
        ],
    }


def config_from_json_dict(data: dict) -> RobotConfig:
    try:
        return RobotConfig(
            name=data["name"],
            arms=tuple(
                ArmSpec(v_max=a["v_max"], q_min=a["q_min"], q_max=a["q_max"])
                for a in data["arms"]
            ),
            cameras=tuple(
                CameraSpec(
                    id=c["id"],
                    width=c["width"],
                    height=c["height"],
                    channels=c["channels"],
                    rate_hz=c["rate_hz"],
                )
                for c in data.get("cameras", [])
            ),
        )
    except KeyError as exc:
        raise ConfigError(f"robot config missing field {exc.args[0]!r}") from None


def stream_values_at_frames(
    ep: Episode, stream_id: str, backfill: bool = False
) -> list[Payload | None]:
    """Per-frame payloads for one stream, following each frame's slot.

    With ``backfill``, frames before the first sample take the first
    available value so every entry is populated (used by consumers that
    need a total per-frame series, like action replay).
    """
    if stream_id not in ep.streams:
        raise KeyError(f"stream {stream_id!r} not in episode")
    samples = ep.streams[stream_id]
    out: list[Payload | None] = []
    for frame in ep.frames:
        ref = frame.slots.get(stream_id)
        out.append(samples[ref].payload if ref is not None else None)
    if backfill:
        first = next((v for v in out if v is not None), None)
        if first is None and samples:
            first = samples[0].payload
        filled = first
        for i, v in enumerate(out):
            if v is None:
                out[i] = filled
            else:
                filled = v
    return out
