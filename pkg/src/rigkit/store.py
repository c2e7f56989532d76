"""On-disk episode container and training-set export.

An episode directory holds one binary file per stream (columnar, so mixed
rates and payload sizes stay homogeneous), a frame index file that
references stream records instead of duplicating payloads, and a meta.json
manifest written last as the commit point. All binary layouts are
little-endian.

Stream file (``<stream id>.cyr``)::

    "CYRS" | version u16 = 1 | reserved u16 = 0
    then per record: capture_ts u64 | payload_len u32 | payload bytes

Frame index (``frames.cyr``)::

    "CYRF" | version u16 = 1 | stream_count u16
    then per frame: tick_index u32 | tick_ts u64
    | per stream in manifest order: record_index u64 (all-ones = missing)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from random import Random

from .core import (
    Episode,
    Frame,
    ImagePayload,
    JointVector,
    PAYLOAD_IMAGE,
    PAYLOAD_JOINTS,
    PAYLOAD_SCALAR,
    Payload,
    Sample,
    config_from_json_dict,
    config_to_json_dict,
    stream_values_at_frames,
    validate_episode,
)
from .registry import COMMAND_STREAM_SUFFIX

STREAM_MAGIC = b"CYRS"
FRAMES_MAGIC = b"CYRF"
SCHEMA_VERSION = 1
MISSING_INDEX = 0xFFFF_FFFF_FFFF_FFFF

_STREAM_HEADER = struct.Struct("<4sHH")
_RECORD_HEADER = struct.Struct("<QI")
_FRAMES_HEADER = struct.Struct("<4sHH")
_FRAME_FIXED = struct.Struct("<IQ")
_IMAGE_HEADER = struct.Struct("<III")

MANIFEST_NAME = "meta.json"
FRAMES_NAME = "frames.cyr"


class StoreError(Exception):
    """Base for storage failures."""


class DirectoryNotEmpty(StoreError):
    """Refused to write into a directory that already has contents."""


class MagicMismatch(StoreError):
    def __init__(self, path, found: bytes, expected: bytes):
        super().__init__(f"{path}: magic {found!r}, expected {expected!r}")
        self.path = str(path)
        self.found = found
        self.expected = expected


class VersionMismatch(StoreError):
    def __init__(self, path, found: int, expected: int):
        super().__init__(f"{path}: version {found}, expected {expected}")
        self.path = str(path)
        self.found = found
        self.expected = expected


class TruncatedRecord(StoreError):
    """A record extends past the end of its file; offset points at the record."""

    def __init__(self, path, offset: int, detail: str):
        super().__init__(f"{path}: truncated record at byte {offset}: {detail}")
        self.path = str(path)
        self.offset = offset


class PayloadError(StoreError):
    """Stored payload bytes do not decode as the stream's declared type."""


class RecordCountMismatch(StoreError):
    def __init__(self, path, declared: int, found: int):
        super().__init__(f"{path}: manifest declares {declared} records, file has {found}")
        self.path = str(path)
        self.declared = declared
        self.found = found


# -- payload codecs -----------------------------------------------------------


def encode_payload(payload: Payload) -> bytes:
    if isinstance(payload, JointVector):
        return struct.pack(f"<{payload.dim}d", *payload.values)
    if isinstance(payload, ImagePayload):
        return (
            _IMAGE_HEADER.pack(payload.width, payload.height, payload.channels)
            + payload.pixels
        )
    return struct.pack("<d", float(payload))


def decode_payload(kind: str, data: bytes) -> Payload:
    if kind == PAYLOAD_JOINTS:
        if len(data) == 0 or len(data) % 8:
            raise PayloadError(f"joint payload length {len(data)} not a multiple of 8")
        return JointVector(struct.unpack(f"<{len(data) // 8}d", data))
    if kind == PAYLOAD_IMAGE:
        if len(data) < _IMAGE_HEADER.size:
            raise PayloadError(f"image payload too short: {len(data)} bytes")
        width, height, channels = _IMAGE_HEADER.unpack_from(data)
        pixels = data[_IMAGE_HEADER.size :]
        if len(pixels) != width * height * channels:
            raise PayloadError(
                f"image {width}x{height}x{channels} needs {width * height * channels} "
                f"pixel bytes, got {len(pixels)}"
            )
        return ImagePayload(width=width, height=height, channels=channels, pixels=pixels)
    if kind == PAYLOAD_SCALAR:
        if len(data) != 8:
            raise PayloadError(f"scalar payload must be 8 bytes, got {len(data)}")
        return struct.unpack("<d", data)[0]
    raise PayloadError(f"unknown payload kind {kind!r}")


# -- raw record files ---------------------------------------------------------


def write_stream_file(path: Path, records: list[tuple[int, bytes]]) -> None:
    """Write (capture_ts, payload bytes) records; layout per module docstring."""
    parts = [_STREAM_HEADER.pack(STREAM_MAGIC, SCHEMA_VERSION, 0)]
    for ts, payload in records:
        parts.append(_RECORD_HEADER.pack(ts, len(payload)))
        parts.append(payload)
    path.write_bytes(b"".join(parts))


def read_stream_records(path: Path) -> list[tuple[int, bytes]]:
    data = path.read_bytes()
    if len(data) < _STREAM_HEADER.size:
        raise TruncatedRecord(path, 0, "file shorter than header")
    magic, version, _ = _STREAM_HEADER.unpack_from(data)
    if magic != STREAM_MAGIC:
        raise MagicMismatch(path, magic, STREAM_MAGIC)
    if version != SCHEMA_VERSION:
        raise VersionMismatch(path, version, SCHEMA_VERSION)
    records = []
    offset = _STREAM_HEADER.size
    while offset < len(data):
        start = offset
        if len(data) - offset < _RECORD_HEADER.size:
            raise TruncatedRecord(path, start, "record header cut short")
        ts, length = _RECORD_HEADER.unpack_from(data, offset)
        offset += _RECORD_HEADER.size
        if len(data) - offset < length:
            raise TruncatedRecord(
                path, start, f"payload needs {length} bytes, {len(data) - offset} left"
            )
        records.append((ts, data[offset : offset + length]))
        offset += length
    return records


def write_frames_file(path: Path, frames: list[Frame], stream_order: list[str]) -> None:
    parts = [_FRAMES_HEADER.pack(FRAMES_MAGIC, SCHEMA_VERSION, len(stream_order))]
    for frame in frames:
        parts.append(_FRAME_FIXED.pack(frame.tick_index, frame.tick_ts))
        refs = [
            MISSING_INDEX if frame.slots.get(sid) is None else frame.slots[sid]
            for sid in stream_order
        ]
        parts.append(struct.pack(f"<{len(refs)}Q", *refs))
    path.write_bytes(b"".join(parts))


def read_frames_file(path: Path) -> tuple[int, list[tuple[int, int, list[int | None]]]]:
    data = path.read_bytes()
    if len(data) < _FRAMES_HEADER.size:
        raise TruncatedRecord(path, 0, "file shorter than header")
    magic, version, stream_count = _FRAMES_HEADER.unpack_from(data)
    if magic != FRAMES_MAGIC:
        raise MagicMismatch(path, magic, FRAMES_MAGIC)
    if version != SCHEMA_VERSION:
        raise VersionMismatch(path, version, SCHEMA_VERSION)
    frame_size = _FRAME_FIXED.size + 8 * stream_count
    frames = []
    offset = _FRAMES_HEADER.size
    while offset < len(data):
        if len(data) - offset < frame_size:
            raise TruncatedRecord(
                path, offset, f"frame record needs {frame_size} bytes, {len(data) - offset} left"
            )
        tick_index, tick_ts = _FRAME_FIXED.unpack_from(data, offset)
        refs_raw = struct.unpack_from(f"<{stream_count}Q", data, offset + _FRAME_FIXED.size)
        refs = [None if r == MISSING_INDEX else r for r in refs_raw]
        frames.append((tick_index, tick_ts, refs))
        offset += frame_size
    return stream_count, frames


# -- episode directory --------------------------------------------------------


@dataclass(frozen=True)
class StreamTableEntry:
    id: str
    payload_type: str
    record_count: int
    file_name: str


@dataclass(frozen=True)
class EpisodeManifest:
    episode_id: str
    task: str
    schema_version: int
    streams: tuple[StreamTableEntry, ...]
    frame_count: int
    session_epoch: str
    collection_config: dict

    def to_json_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "task": self.task,
            "schema_version": self.schema_version,
            "streams": [
                {
                    "id": s.id,
                    "payload_type": s.payload_type,
                    "record_count": s.record_count,
                    "file_name": s.file_name,
                }
                for s in self.streams
            ],
            "frame_count": self.frame_count,
            "session_epoch": self.session_epoch,
            "collection_config": self.collection_config,
        }

    @staticmethod
    def from_json_dict(data: dict) -> "EpisodeManifest":
        try:
            return EpisodeManifest(
                episode_id=data["episode_id"],
                task=data["task"],
                schema_version=data["schema_version"],
                streams=tuple(
                    StreamTableEntry(
                        id=s["id"],
                        payload_type=s["payload_type"],
                        record_count=s["record_count"],
                        file_name=s["file_name"],
                    )
                    for s in data["streams"]
                ),
                frame_count=data["frame_count"],
                session_epoch=data["session_epoch"],
                collection_config=data["collection_config"],
            )
        except KeyError as exc:
            raise StoreError(f"manifest missing field {exc.args[0]!r}") from None


def _safe_name(stream_id: str) -> str:
    if not stream_id or os.sep in stream_id or stream_id.startswith("."):
        raise StoreError(f"stream id {stream_id!r} is not a safe file name")
    return stream_id + ".cyr"


def write_episode(ep: Episode, directory: str | Path) -> EpisodeManifest:
    """Persist an episode; meta.json lands last so readers never see a torn dir."""
    problems = validate_episode(ep)
    if problems:
        raise StoreError("episode invalid: " + "; ".join(problems[:5]))
    directory = Path(directory)
    created_dir = not directory.exists()
    if created_dir:
        directory.mkdir(parents=True)
    elif any(directory.iterdir()):
        raise DirectoryNotEmpty(f"{directory} is not empty; refusing to overwrite")
    written: list[Path] = []
    try:
        table = []
        for sid, samples in ep.streams.items():
            file_name = _safe_name(sid)
            path = directory / file_name
            write_stream_file(
                path, [(s.capture_ts, encode_payload(s.payload)) for s in samples]
            )
            written.append(path)
            table.append(
                StreamTableEntry(
                    id=sid,
                    payload_type=ep.schemas.get(
                        sid, _infer_payload_type(samples)
                    ),
                    record_count=len(samples),
                    file_name=file_name,
                )
            )
        frames_path = directory / FRAMES_NAME
        write_frames_file(frames_path, ep.frames, list(ep.streams.keys()))
        written.append(frames_path)
        manifest = EpisodeManifest(
            episode_id=ep.id,
            task=ep.task,
            schema_version=SCHEMA_VERSION,
            streams=tuple(table),
            frame_count=len(ep.frames),
            session_epoch=datetime.now(timezone.utc).isoformat(),
            collection_config={
                "robot": config_to_json_dict(ep.config),
                "meta": dict(ep.meta),
            },
        )
        manifest_path = directory / MANIFEST_NAME
        manifest_path.write_text(json.dumps(manifest.to_json_dict(), indent=2) + "\n")
        written.append(manifest_path)
        return manifest
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        if created_dir:
            try:
                directory.rmdir()
            except OSError:
                pass
        raise


def _infer_payload_type(samples: list[Sample]) -> str:
    if not samples:
        return PAYLOAD_SCALAR
    payload = samples[0].payload
    if isinstance(payload, JointVector):
        return PAYLOAD_JOINTS
    if isinstance(payload, ImagePayload):
        return PAYLOAD_IMAGE
    return PAYLOAD_SCALAR


def read_manifest(directory: str | Path) -> EpisodeManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise StoreError(f"{path} not found; not an episode directory")
    manifest = EpisodeManifest.from_json_dict(json.loads(path.read_text()))
    if manifest.schema_version != SCHEMA_VERSION:
        raise VersionMismatch(path, manifest.schema_version, SCHEMA_VERSION)
    return manifest


def read_episode(directory: str | Path) -> Episode:
    directory = Path(directory)
    manifest = read_manifest(directory)
    streams: dict[str, list[Sample]] = {}
    schemas: dict[str, str] = {}
    for entry in manifest.streams:
        path = directory / entry.file_name
        records = read_stream_records(path)
        if len(records) != entry.record_count:
            raise RecordCountMismatch(path, entry.record_count, len(records))
        try:
            streams[entry.id] = [
                Sample(entry.id, ts, decode_payload(entry.payload_type, blob))
                for ts, blob in records
            ]
        except PayloadError as exc:
            raise PayloadError(f"{path}: {exc}") from None
        schemas[entry.id] = entry.payload_type
    frames_path = directory / FRAMES_NAME
    stream_count, raw_frames = read_frames_file(frames_path)
    if stream_count != len(manifest.streams):
        raise StoreError(
            f"{frames_path}: {stream_count} stream slots, manifest has {len(manifest.streams)}"
        )
    if len(raw_frames) != manifest.frame_count:
        raise RecordCountMismatch(frames_path, manifest.frame_count, len(raw_frames))
    order = [entry.id for entry in manifest.streams]
    frames = []
    for tick_index, tick_ts, refs in raw_frames:
        slots: dict[str, int | None] = {}
        staleness: dict[str, int] = {}
        for sid, ref in zip(order, refs):
            slots[sid] = ref
            if ref is not None:
                if ref >= len(streams[sid]):
                    raise StoreError(
                        f"{frames_path}: frame {tick_index} references record {ref} "
                        f"of stream {sid!r} which has {len(streams[sid])}"
                    )
                staleness[sid] = tick_ts - streams[sid][ref].capture_ts
        frames.append(
            Frame(tick_index=tick_index, tick_ts=tick_ts, slots=slots, staleness=staleness)
        )
    cfg = manifest.collection_config
    episode = Episode(
        id=manifest.episode_id,
        task=manifest.task,
        config=config_from_json_dict(cfg["robot"]),
        frames=frames,
        streams=streams,
        schemas=schemas,
        meta=dict(cfg.get("meta", {})),
    )
    problems = validate_episode(episode)
    if problems:
        raise StoreError(f"{directory}: stored episode violates invariants: {problems[0]}")
    return episode


def list_episodes(root: str | Path) -> list[EpisodeManifest]:
    """Manifests of every episode directory directly under ``root``."""
    root = Path(root)
    if not root.exists():
        return []
    out = []
    for child in sorted(root.iterdir()):
        if child.is_dir() and (child / MANIFEST_NAME).exists():
            out.append(read_manifest(child))
    return out


# -- training-set export ------------------------------------------------------


@dataclass(frozen=True)
class TrainingEntry:
    episode_id: str
    frame_range: tuple[int, int]
    action_stream_id: str
    observation_stream_ids: tuple[str, ...]


@dataclass(frozen=True)
class TrainingIndex:
    seed: int
    entries: tuple[TrainingEntry, ...]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "entries": [
                {
                    "episode_id": e.episode_id,
                    "frame_range": list(e.frame_range),
                    "action_stream_id": e.action_stream_id,
                    "observation_stream_ids": list(e.observation_stream_ids),
                }
                for e in self.entries
            ],
        }

    @staticmethod
    def from_json_dict(data: dict) -> "TrainingIndex":
        return TrainingIndex(
            seed=data["seed"],
            entries=tuple(
                TrainingEntry(
                    episode_id=e["episode_id"],
                    frame_range=tuple(e["frame_range"]),
                    action_stream_id=e["action_stream_id"],
                    observation_stream_ids=tuple(e["observation_stream_ids"]),
                )
                for e in data["entries"]
            ),
        )


ACTION_STREAM = "action"


def episode_actions(ep: Episode) -> list[JointVector]:
    """Per-frame action vectors: command streams concatenated in arm order.

    Frames before the first command backfill from it, later gaps hold the
    previous command, mirroring how a follower would execute the record.
    """
    cmd_ids = [sid for sid in ep.streams if sid.endswith(COMMAND_STREAM_SUFFIX)]
    if not cmd_ids:
        raise StoreError(f"episode {ep.id!r} has no command streams to use as actions")
    per_stream = [stream_values_at_frames(ep, sid, backfill=True) for sid in cmd_ids]
    actions = []
    for row in zip(*per_stream):
        if any(v is None for v in row):
            raise StoreError(f"episode {ep.id!r}: empty command stream")
        actions.append(JointVector([x for v in row for x in v.values]))
    return actions


def export_training_set(
    episodes: list[Episode], k: int, seed: int, out: str | Path
) -> TrainingIndex:
    """Seeded uniform sample of k episodes, flattened for training input.

    Selection is without replacement and preserves input order (k = n keeps
    the list as given). Writes ``index.json`` plus one records file per
    selected episode with per-frame tick_ts, the action vector, and
    observation record references.
    """
    if not (0 <= k <= len(episodes)):
        raise StoreError(f"cannot sample {k} of {len(episodes)} episodes")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chosen = sorted(Random(seed).sample(range(len(episodes)), k))
    entries = []
    for idx in chosen:
        ep = episodes[idx]
        obs_ids = tuple(
            sid for sid in ep.streams if not sid.endswith(COMMAND_STREAM_SUFFIX)
        )
        actions = episode_actions(ep)
        records = []
        for frame, action in zip(ep.frames, actions):
            records.append(
                {
                    "tick_ts": frame.tick_ts,
                    "action": list(action.values),
                    "observations": {sid: frame.slots.get(sid) for sid in obs_ids},
                }
            )
        (out / f"{ep.id}.records.json").write_text(
            json.dumps(records, separators=(",", ":")) + "\n"
        )
        entries.append(
            TrainingEntry(
                episode_id=ep.id,
                frame_range=(0, len(ep.frames)),
                action_stream_id=ACTION_STREAM,
                observation_stream_ids=obs_ids,
            )
        )
    index = TrainingIndex(seed=seed, entries=tuple(entries))
    (out / "index.json").write_text(json.dumps(index.to_json_dict(), indent=2) + "\n")
    return index


def load_training_index(path: str | Path) -> TrainingIndex:
    return TrainingIndex.from_json_dict(json.loads(Path(path).read_text()))
