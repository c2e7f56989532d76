"""Policy wire protocol, deterministic replay server, and the execution loop.

Observations travel to a policy server and action chunks come back over a
stream socket.  The envelope is little-endian ``total_len u32 | type u8 |
body`` where total_len counts the type byte plus the body.  Type 1 is an
observation (``meta_len u32 | meta JSON | pixel bytes``), type 2 an action
chunk (JSON), type 3 an error (JSON).  JSON carries everything except pixels,
which dominate the byte count and stay binary.

The replay server answers each request with the next slice of a recorded
expert action sequence, which makes closed-loop runs reproducible enough to
measure executor fidelity rather than model behavior.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import time
from dataclasses import dataclass

from .clock import NS_PER_S, Clock, ensure_task
from .collector import RateGrid
from .control import ArmGroup, ExecutionLog
from .core import ConfigError, Episode, ImagePayload, JointVector, action_dim
from .registry import RobotHandle
from .store import episode_actions

MSG_OBSERVATION = 1
MSG_ACTION = 2
MSG_ERROR = 3

MAX_BODY_BYTES = 32 * 1024 * 1024

DEFAULT_HORIZON = 8
DEFAULT_POLICY_RATE_HZ = 30.0

HOLD = "hold"
ABORT = "abort"


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class ImageAttachment:
    """One camera frame riding along with an observation."""

    id: str
    image: ImagePayload


@dataclass(frozen=True)
class ObservationMessage:
    seq: int
    tick_ts: int
    joints: JointVector
    images: tuple[ImageAttachment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if self.seq < 0 or self.tick_ts < 0:
            raise ConfigError(f"seq and tick_ts must be >= 0, got {self.seq}, {self.tick_ts}")


@dataclass(frozen=True)
class ActionMessage:
    seq: int
    actions: tuple[JointVector, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if not self.actions:
            raise ConfigError("action chunk needs at least one row")
        dim = self.actions[0].dim
        for i, row in enumerate(self.actions):
            if row.dim != dim:
                raise ConfigError(f"action row {i} has dim {row.dim}, expected {dim}")

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class ErrorMessage:
    seq: int
    code: str
    message: str


@dataclass(frozen=True)
class PolicyEndpoint:
    """Where a policy server lives and how long to wait for it."""

    host: str
    port: int
    connect_timeout_ms: int = 1000
    read_timeout_ms: int = 1000

    def __post_init__(self):
        if self.connect_timeout_ms <= 0 or self.read_timeout_ms <= 0:
            raise ConfigError(
                f"timeouts must be positive, got {self.connect_timeout_ms}, "
                f"{self.read_timeout_ms}"
            )


# -- codec --------------------------------------------------------------------


class DecodeError(ValueError):
    """A byte buffer does not parse as a protocol message."""


class TruncatedMessage(DecodeError):
    """Buffer ends before the declared message does."""


class LengthMismatch(DecodeError):
    """Declared length disagrees with the bytes present."""


class LengthOverflow(DecodeError):
    """Declared length exceeds the protocol cap."""


class UnknownTypeTag(DecodeError):
    """Type byte is not a known message kind."""


class MalformedBody(DecodeError):
    """Envelope is sound but the body does not parse."""


def _encode_body(msg) -> tuple[int, bytes]:
    if isinstance(msg, ObservationMessage):
        meta_images = []
        pixels = []
        offset = 0
        for att in msg.images:
            img = att.image
            meta_images.append(
                {
                    "id": att.id,
                    "w": img.width,
                    "h": img.height,
                    "c": img.channels,
                    "offset": offset,
                    "len": len(img.pixels),
                }
            )
            pixels.append(img.pixels)
            offset += len(img.pixels)
        meta = json.dumps(
            {
                "seq": msg.seq,
                "tick_ts": msg.tick_ts,
                "joints": list(msg.joints.values),
                "images": meta_images,
            },
            separators=(",", ":"),
        ).encode()
        return MSG_OBSERVATION, struct.pack("<I", len(meta)) + meta + b"".join(pixels)
    if isinstance(msg, ActionMessage):
        body = json.dumps(
            {
                "seq": msg.seq,
                "horizon": msg.horizon,
                "actions": [list(row.values) for row in msg.actions],
            },
            separators=(",", ":"),
        ).encode()
        return MSG_ACTION, body
    if isinstance(msg, ErrorMessage):
        body = json.dumps(
            {"seq": msg.seq, "code": msg.code, "message": msg.message},
            separators=(",", ":"),
        ).encode()
        return MSG_ERROR, body
    raise ConfigError(f"cannot encode {type(msg).__name__}")


def encode_message(msg) -> bytes:
    """Full wire envelope for a message."""
    tag, body = _encode_body(msg)
    return struct.pack("<IB", 1 + len(body), tag) + body


def _decode_observation(body: bytes) -> ObservationMessage:
    if len(body) < 4:
        raise MalformedBody("observation body shorter than its meta length field")
    (meta_len,) = struct.unpack_from("<I", body)
    if 4 + meta_len > len(body):
        raise MalformedBody(f"meta length {meta_len} overruns body of {len(body)} bytes")
    try:
        meta = json.loads(body[4 : 4 + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedBody(f"observation meta is not JSON: {e}") from None
    pixels = body[4 + meta_len :]
    try:
        images = []
        for entry in meta["images"]:
            off, ln = int(entry["offset"]), int(entry["len"])
            if off < 0 or ln < 0 or off + ln > len(pixels):
                raise MalformedBody(
                    f"image {entry.get('id')!r} slice [{off}, {off + ln}) outside "
                    f"{len(pixels)} pixel bytes"
                )
            images.append(
                ImageAttachment(
                    id=str(entry["id"]),
                    image=ImagePayload(
                        width=int(entry["w"]),
                        height=int(entry["h"]),
                        channels=int(entry["c"]),
                        pixels=pixels[off : off + ln],
                    ),
                )
            )
        return ObservationMessage(
            seq=int(meta["seq"]),
            tick_ts=int(meta["tick_ts"]),
            joints=JointVector(float(v) for v in meta["joints"]),
            images=tuple(images),
        )
    except MalformedBody:
        raise
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise MalformedBody(f"bad observation meta: {e}") from None


def _decode_action(body: bytes) -> ActionMessage:
    try:
        data = json.loads(body.decode())
        rows = [JointVector(float(v) for v in row) for row in data["actions"]]
        msg = ActionMessage(seq=int(data["seq"]), actions=tuple(rows))
        if int(data["horizon"]) != msg.horizon:
            raise MalformedBody(
                f"declared horizon {data['horizon']} != {msg.horizon} action rows"
            )
        return msg
    except MalformedBody:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError,
            ConfigError) as e:
        raise MalformedBody(f"bad action body: {e}") from None


def _decode_error(body: bytes) -> ErrorMessage:
    try:
        data = json.loads(body.decode())
        return ErrorMessage(
            seq=int(data["seq"]), code=str(data["code"]), message=str(data["message"])
        )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise MalformedBody(f"bad error body: {e}") from None


_DECODERS = {
    MSG_OBSERVATION: _decode_observation,
    MSG_ACTION: _decode_action,
    MSG_ERROR: _decode_error,
}


def decode_message(buf: bytes):
    """Parse one complete envelope; raises a DecodeError subclass otherwise."""
    if len(buf) < 5:
        raise TruncatedMessage(f"{len(buf)} bytes is shorter than any envelope")
    total_len, tag = struct.unpack_from("<IB", buf)
    if total_len > 1 + MAX_BODY_BYTES:
        raise LengthOverflow(f"declared length {total_len} exceeds cap {1 + MAX_BODY_BYTES}")
    if total_len < 1:
        raise LengthMismatch(f"declared length {total_len} cannot hold a type byte")
    if 4 + total_len != len(buf):
        raise LengthMismatch(f"declared {4 + total_len} total bytes, buffer has {len(buf)}")
    decoder = _DECODERS.get(tag)
    if decoder is None:
        raise UnknownTypeTag(f"unknown message type {tag}")
    return decoder(buf[5:])


# -- socket framing -----------------------------------------------------------


class ConnectionClosed(RuntimeError):
    """Peer closed the stream (possibly mid-message)."""


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionClosed("stream ended early")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket):
    """Read one framed message off a socket; LengthOverflow poisons the stream."""
    header = _recv_exact(sock, 5)
    total_len, _tag = struct.unpack_from("<IB", header)
    if total_len > 1 + MAX_BODY_BYTES:
        raise LengthOverflow(f"declared length {total_len} exceeds cap {1 + MAX_BODY_BYTES}")
    if total_len < 1:
        raise LengthMismatch(f"declared length {total_len} cannot hold a type byte")
    body = _recv_exact(sock, total_len - 1)
    return decode_message(header + body)


def send_message(sock: socket.socket, msg) -> None:
    sock.sendall(encode_message(msg))


# -- replay policy server -----------------------------------------------------


class ReplayPolicyServer:
    """Serves a recorded expert action sequence in fixed-size chunks.

    One connection at a time; each connection starts a fresh cursor at frame
    zero.  Every request advances the cursor by the horizon; past the end the
    final action repeats, mirroring hold-last chunk padding.
    """

    def __init__(self, episode: Episode, host: str = "127.0.0.1", port: int = 0,
                 horizon: int = DEFAULT_HORIZON):
        if horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {horizon}")
        self._actions = episode_actions(episode)
        self._horizon = horizon
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._conn_lock = threading.Lock()
        self._conn = None
        self._thread = threading.Thread(target=self._serve, name="replay-policy", daemon=True)
        self._thread.start()

    @property
    def horizon(self) -> int:
        return self._horizon

    def _chunk(self, cursor: int) -> tuple[JointVector, ...]:
        rows = list(self._actions[cursor : cursor + self._horizon])
        while len(rows) < self._horizon:
            rows.append(self._actions[-1])
        return tuple(rows)

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                return
            with self._conn_lock:
                self._conn = conn
            try:
                self._serve_connection(conn)
            finally:
                with self._conn_lock:
                    self._conn = None
                conn.close()

    def _serve_connection(self, conn: socket.socket) -> None:
        cursor = 0
        while not self._stop.is_set():
            try:
                msg = read_message(conn)
            except (ConnectionClosed, OSError):
                return
            except LengthOverflow as e:
                # cannot resync after an oversized frame; report and drop
                self._reply(conn, ErrorMessage(seq=0, code="overflow", message=str(e)))
                return
            except DecodeError as e:
                self._reply(conn, ErrorMessage(seq=0, code="bad-message", message=str(e)))
                continue
            if not isinstance(msg, ObservationMessage):
                self._reply(
                    conn,
                    ErrorMessage(
                        seq=getattr(msg, "seq", 0),
                        code="bad-request",
                        message=f"expected an observation, got type {type(msg).__name__}",
                    ),
                )
                continue
            self._reply(conn, ActionMessage(seq=msg.seq, actions=self._chunk(cursor)))
            cursor += self._horizon

    def _reply(self, conn: socket.socket, msg) -> None:
        try:
            send_message(conn, msg)
        except OSError:
            pass

    def close(self) -> None:
        self._stop.set()
        try:
            # closing alone does not wake a blocked accept(); shutdown does
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        with self._conn_lock:
            if self._conn is not None:
                try:
                    self._conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                self._conn.close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "ReplayPolicyServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve_replay_policy(
    episode: Episode, endpoint: PolicyEndpoint, horizon: int = DEFAULT_HORIZON
) -> ReplayPolicyServer:
    """Start a replay server on the endpoint's host/port (0 picks a free port)."""
    return ReplayPolicyServer(episode, host=endpoint.host, port=endpoint.port, horizon=horizon)


# -- client loop --------------------------------------------------------------


class PolicyConnectError(RuntimeError):
    """Could not reach the policy server."""


class PolicyProtocolError(RuntimeError):
    """The server answered with something other than a matching action chunk."""


class PolicyTimeout(RuntimeError):
    """No action chunk arrived in time and the timeout policy is abort."""


def assemble_observation(robot: RobotHandle, seq: int, clock: Clock) -> ObservationMessage:
    """Current joint state and camera frames as one observation."""
    group = ArmGroup(robot, action_dim(robot.config), 0)
    ts, joints = group.read()
    images = []
    for sensor_id in robot.sensors:
        sample = robot.device(sensor_id).read()
        images.append(ImageAttachment(id=sensor_id, image=sample.payload))
    return ObservationMessage(seq=seq, tick_ts=ts, joints=joints, images=tuple(images))


def run_policy_loop(
    robot: RobotHandle,
    endpoint: PolicyEndpoint,
    clock: Clock,
    *,
    horizon: int = DEFAULT_HORIZON,
    rate_hz: float = DEFAULT_POLICY_RATE_HZ,
    steps: int,
    on_timeout: str = HOLD,
    requery: bool = False,
) -> tuple[ExecutionLog, list[int]]:
    """Drive the robot from a policy server until `steps` commands are issued.

    Each cycle sends the current observation and executes the returned chunk
    on the command grid (only its first action when requery is set).  Actions
    are clamped to position limits, with clamping recorded as a violation.  A
    receive timeout either holds the previous command for the chunk's worth
    of ticks (default) or aborts.  Returns the execution log plus wall-clock
    round-trip latencies in nanoseconds, one per request.
    """
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if on_timeout not in (HOLD, ABORT):
        raise ConfigError(f"on_timeout must be {HOLD!r} or {ABORT!r}, got {on_timeout!r}")
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    config = robot.config
    group = ArmGroup(robot, action_dim(config), 0)
    period_ns = round(NS_PER_S / rate_hz)
    recv_timeout_s = max(horizon * period_ns / NS_PER_S, endpoint.read_timeout_ms / 1000)
    try:
        sock = socket.create_connection(
            (endpoint.host, endpoint.port), timeout=endpoint.connect_timeout_ms / 1000
        )
    except OSError as e:
        raise PolicyConnectError(f"cannot reach {endpoint.host}:{endpoint.port}: {e}") from e
    sock.settimeout(recv_timeout_s)
    log = ExecutionLog()
    latencies: list[int] = []
    prev_cmd: JointVector | None = None
    try:
        with ensure_task(clock, "policy-loop"):
            grid = RateGrid(rate_hz, clock.now_ns())
            issued = 0
            seq = 0
            tick = 0
            while issued < steps:
                obs = assemble_observation(robot, seq, clock)
                sent_at = time.monotonic_ns()
                actions, timed_out = _request(sock, obs, on_timeout)
                latencies.append(time.monotonic_ns() - sent_at)
                seq += 1
                if timed_out:
                    if prev_cmd is None:
                        prev_cmd = obs.joints
                    log.violations.append(f"request {obs.seq}: timed out, holding position")
                    actions = (prev_cmd,) * horizon
                if len(actions) != horizon:
                    raise PolicyProtocolError(
                        f"expected {horizon} actions, got {len(actions)}"
                    )
                take = 1 if requery else horizon
                for row in actions[:take]:
                    if issued >= steps:
                        break
                    if row.dim != action_dim(config):
                        raise PolicyProtocolError(
                            f"action dim {row.dim} != robot dim {action_dim(config)}"
                        )
                    clamped = config.clamp(row)
                    if clamped != row:
                        log.violations.append(
                            f"command {issued}: clamped to position limits"
                        )
                    clock.sleep_until_ns(grid.ts(tick))
                    log.add_command(clock.now_ns(), clamped)
                    group.write(clamped)
                    ts, measured = group.read()
                    log.add_measurement(ts, measured)
                    prev_cmd = clamped
                    issued += 1
                    tick += 1
    finally:
        sock.close()
    return log, latencies


def _request(sock, obs, on_timeout):
    """Send one observation; returns (actions, timed_out)."""
    send_message(sock, obs)
    try:
        reply = read_message(sock)
    except socket.timeout:
        if on_timeout == ABORT:
            raise PolicyTimeout(f"no reply to request {obs.seq}") from None
        return (), True
    except (ConnectionClosed, OSError) as e:
        raise PolicyProtocolError(f"connection lost on request {obs.seq}: {e}") from None
    except DecodeError as e:
        raise PolicyProtocolError(f"undecodable reply to request {obs.seq}: {e}") from None
    if isinstance(reply, ErrorMessage):
        raise PolicyProtocolError(
            f"server error on request {obs.seq}: {reply.code}: {reply.message}"
        )
    if not isinstance(reply, ActionMessage):
        raise PolicyProtocolError(f"unexpected reply type {type(reply).__name__}")
    if reply.seq != obs.seq:
        raise PolicyProtocolError(f"reply seq {reply.seq} does not match request {obs.seq}")
    return reply.actions, False
