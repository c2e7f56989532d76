"""Long-running control daemon bridging operator consoles to a rig.

One control thread owns the session state, the robot, and any recording or
playback activity; WebSocket connections feed parsed commands into its inbox
and receive JSON replies plus periodic state snapshots.  Because a single
thread applies commands, every reply reflects a serialized view of the
session and an invalid transition can never corrupt it.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from pathlib import Path

from .clock import Clock, RealClock, VirtualClock
from .collector import PARALLEL, SERIAL, CollectorConfig, run_collection, run_parallel
from .control import ArmGroup, PlaybackTimeout, execute_playback, load_plan
from .core import ConfigError, JointVector, action_dim
from .registry import RigSpec
from .session import (
    CMD_BENCH,
    CMD_CLUTCH,
    CMD_JOG,
    CMD_LIST_EPISODES,
    CMD_PLAY,
    CMD_RECORD,
    CMD_SET_MODE,
    CMD_SUBSCRIBE,
    MODE_TELEOP,
    SessionState,
    TransitionError,
    apply_command,
)
from .sim import build_sim_rig
from .store import StoreError, list_episodes, write_episode
from .wsserver import FrameError, SocketClosed, WebSocketServer, WSConnection

SNAPSHOT_HZ = 10.0
RECORD_RATE_HZ = 30.0
RECORD_BUDGET_S = 3600.0
BENCH_DURATION_S = 2.0

ERR_BAD_JSON = "bad-json"
ERR_BAD_REQUEST = "bad-request"
ERR_STORE = "store-error"
ERR_BUSY = "busy"
ERR_PLAY_FAILED = "play-failed"


def _metrics_dict(metrics) -> dict:
    """Snapshot-friendly view of a collector run: rate plus per-stream lag."""
    return {
        "effective_hz": metrics.effective_rate_hz,
        "overruns": metrics.tick_overruns,
        "staleness_ms": {
            sid: s.mean_ns / 1e6 for sid, s in metrics.staleness.items()
        },
    }


class _Recording:
    """A collector run in flight plus everything needed to finish it."""

    def __init__(self, episode_id: str, robot, clock, rate_hz: float, task: str):
        self.episode_id = episode_id
        self.stop = threading.Event()
        self.result: dict = {}
        cfg = CollectorConfig(
            target_rate_hz=rate_hz, mode=PARALLEL, duration_s=RECORD_BUDGET_S
        )

        def run():
            try:
                self.result["run"] = run_parallel(
                    robot, cfg, clock, episode_id=episode_id, task=task, stop=self.stop
                )
            except Exception as exc:
                self.result["error"] = exc

        self.thread = threading.Thread(target=run, name="daemon-record", daemon=True)
        self.thread.start()

    def finish(self):
        self.stop.set()
        self.thread.join(timeout=30)
        if "error" in self.result:
            raise self.result["error"]
        return self.result["run"]


class RigDaemon:
    """Serves the operator WebSocket protocol for one simulated rig."""

    def __init__(
        self,
        rig: RigSpec,
        *,
        episodes_dir: str | Path,
        host: str = "127.0.0.1",
        port: int = 0,
        snapshot_hz: float = SNAPSHOT_HZ,
        record_rate_hz: float = RECORD_RATE_HZ,
        clock: Clock | None = None,
    ):
        if not (snapshot_hz > 0):
            raise ConfigError(f"snapshot rate must be > 0, got {snapshot_hz}")
        self._rig = rig
        self._clock = clock if clock is not None else RealClock()
        _, self._robot = build_sim_rig(rig, self._clock)
        self._dim = action_dim(rig.config)
        self._group = ArmGroup(self._robot, self._dim, 0)
        self._episodes_dir = Path(episodes_dir)
        self._episodes_dir.mkdir(parents=True, exist_ok=True)
        self._snapshot_period = 1.0 / snapshot_hz
        self._record_rate_hz = record_rate_hz
        self._state = SessionState()
        self._clutch_engaged = False
        self._target = self._robot.config.clamp(JointVector([0.0] * self._dim))
        self._recording: _Recording | None = None
        self._playing: threading.Thread | None = None
        self._metrics: dict = {"effective_hz": 0.0, "overruns": 0}
        self._episode_counter = self._next_episode_number()
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._subscribers: set[WSConnection] = set()
        self._stopping = threading.Event()
        self._server = WebSocketServer(self._handle_connection, host, port)
        self.host, self.port = self._server.host, self._server.port
        self._control = threading.Thread(
            target=self._control_loop, name="daemon-control", daemon=True
        )
        self._control.start()

    def _next_episode_number(self) -> int:
        highest = 0
        for child in self._episodes_dir.iterdir():
            name = child.name
            if child.is_dir() and name.startswith("ep-") and name[3:].isdigit():
                highest = max(highest, int(name[3:]))
        return highest + 1

    # -- connection side ------------------------------------------------------

    def _handle_connection(self, conn: WSConnection, target: str) -> None:
        self._inbox.put(("connect", conn, None))
        try:
            while True:
                text = conn.recv_text()
                if text is None:
                    return
                self._inbox.put(("message", conn, text))
        except (FrameError, SocketClosed, OSError):
            return
        finally:
            self._inbox.put(("disconnect", conn, None))

    # -- control task ---------------------------------------------------------

    def _control_loop(self) -> None:
        next_snap = time.monotonic()
        while not self._stopping.is_set():
            timeout = next_snap - time.monotonic()
            if timeout <= 0:
                self._broadcast_snapshot()
                next_snap += self._snapshot_period
                if next_snap <= time.monotonic():
                    next_snap = time.monotonic() + self._snapshot_period
                continue
            try:
                kind, conn, payload = self._inbox.get(timeout=timeout)
            except queue.Empty:
                continue
            if kind == "connect":
                self._send(conn, self._snapshot())
            elif kind == "disconnect":
                self._subscribers.discard(conn)
            elif kind == "error":
                code, message, original = payload
                self._error(conn, code, message, original)
            else:
                self._process(conn, payload)

    def _send(self, conn: WSConnection, obj: dict) -> None:
        try:
            conn.send_text(json.dumps(obj))
        except (SocketClosed, OSError):
            self._subscribers.discard(conn)

    def _reply(self, conn: WSConnection, obj: dict, msg: dict | None) -> None:
        if msg is not None and "id" in msg:
            obj = {**obj, "id": msg["id"]}
        self._send(conn, obj)

    def _error(self, conn, code: str, message: str, msg: dict | None = None) -> None:
        self._reply(conn, {"type": "error", "code": code, "message": message}, msg)

    def _snapshot(self) -> dict:
        joints = list(self._measured().values)
        session = {**self._state.to_json_dict(), "clutch_engaged": self._clutch_engaged}
        return {
            "type": "state",
            "session": session,
            "joints": joints,
            "metrics": dict(self._metrics),
        }

    def _measured(self) -> JointVector:
        _, q = self._group.read()
        return q

    def _broadcast_snapshot(self) -> None:
        if not self._subscribers:
            return
        snapshot = self._snapshot()
        for conn in list(self._subscribers):
            self._send(conn, snapshot)

    # -- command processing ---------------------------------------------------

    def _process(self, conn: WSConnection, text: str) -> None:
        try:
            msg = json.loads(text)
        except ValueError:
            self._error(conn, ERR_BAD_JSON, "message is not valid JSON")
            return
        if not isinstance(msg, dict) or not isinstance(msg.get("cmd"), str):
            self._error(conn, ERR_BAD_REQUEST, "expected an object with a cmd field")
            return
        cmd = msg["cmd"]
        arg = None
        if cmd == CMD_SET_MODE:
            arg = msg.get("mode")
        elif cmd == CMD_RECORD:
            arg = msg.get("action")
        try:
            next_state = apply_command(self._state, cmd, arg)
        except TransitionError as err:
            self._error(conn, err.code, err.message, msg)
            return
        try:
            handler = getattr(self, f"_cmd_{cmd}")
            handler(conn, msg, next_state)
        except TransitionError as err:
            self._error(conn, err.code, err.message, msg)
        except (ConfigError, StoreError, OSError) as err:
            self._error(conn, ERR_BAD_REQUEST, str(err), msg)

    def _ack(self, conn, msg: dict, **extra) -> None:
        self._reply(conn, {"type": "ack", "cmd": msg["cmd"], **extra}, msg)

    def _cmd_subscribe(self, conn, msg, next_state) -> None:
        self._subscribers.add(conn)
        self._ack(conn, msg)
        self._send(conn, self._snapshot())

    def _cmd_set_mode(self, conn, msg, next_state) -> None:
        if next_state.mode != self._state.mode and next_state.mode == MODE_TELEOP:
            self._target = self._measured()
            self._clutch_engaged = False
        self._state = next_state
        self._ack(conn, msg, mode=self._state.mode)

    def _cmd_jog(self, conn, msg, next_state) -> None:
        joint = msg.get("joint")
        delta = msg.get("delta_rad")
        if not isinstance(joint, int) or isinstance(joint, bool):
            raise TransitionError(ERR_BAD_REQUEST, "jog needs an integer joint index")
        if not 0 <= joint < self._dim:
            raise TransitionError(
                ERR_BAD_REQUEST, f"joint must be in [0, {self._dim}), got {joint}"
            )
        if not isinstance(delta, (int, float)) or isinstance(delta, bool) or not math.isfinite(delta):
            raise TransitionError(ERR_BAD_REQUEST, "jog needs a finite delta_rad")
        values = list(self._target.values)
        values[joint] += float(delta)
        self._target = self._robot.config.clamp(JointVector(values))
        self._group.write(self._target)
        self._state = next_state
        self._ack(conn, msg, joint=joint, target=self._target.values[joint])

    def _cmd_clutch(self, conn, msg, next_state) -> None:
        engaged = msg.get("engaged")
        if not isinstance(engaged, bool):
            raise TransitionError(ERR_BAD_REQUEST, "clutch needs a boolean engaged flag")
        self._clutch_engaged = engaged
        self._state = next_state
        self._ack(conn, msg, engaged=engaged)

    def _cmd_record(self, conn, msg, next_state) -> None:
        if msg.get("action") == "start":
            episode_id = f"ep-{self._episode_counter:04d}"
            self._episode_counter += 1
            self._recording = _Recording(
                episode_id,
                self._robot,
                self._clock,
                self._record_rate_hz,
                str(msg.get("task", "")),
            )
            self._state = next_state
            self._ack(conn, msg, episode=episode_id)
            return
        recording, self._recording = self._recording, None
        self._state = next_state
        try:
            episode, metrics = recording.finish()
            write_episode(episode, self._episodes_dir / episode.id)
        except (StoreError, OSError, RuntimeError) as err:
            self._error(conn, ERR_STORE, f"recording discarded: {err}", msg)
            return
        self._metrics = _metrics_dict(metrics)
        self._ack(conn, msg, episode=episode.id, frames=metrics.frames_emitted)

    def _cmd_play(self, conn, msg, next_state) -> None:
        if self._playing is not None and self._playing.is_alive():
            raise TransitionError(ERR_BUSY, "a plan is already playing")
        path = msg.get("plan_path")
        if not isinstance(path, str) or not path:
            raise TransitionError(ERR_BAD_REQUEST, "play needs a plan_path string")
        plan = load_plan(path)

        def run():
            try:
                execute_playback(self._robot, plan, self._clock)
            except (ConfigError, PlaybackTimeout) as err:
                self._inbox.put(("error", conn, (ERR_PLAY_FAILED, str(err), msg)))

        self._state = next_state
        self._playing = threading.Thread(target=run, name="daemon-play", daemon=True)
        self._playing.start()
        self._ack(conn, msg, waypoints=len(plan.waypoints))

    def _cmd_list_episodes(self, conn, msg, next_state) -> None:
        items = [
            {"id": m.episode_id, "task": m.task, "frames": m.frame_count}
            for m in list_episodes(self._episodes_dir)
        ]
        self._state = next_state
        self._reply(conn, {"type": "episodes", "items": items}, msg)

    def _cmd_bench(self, conn, msg, next_state) -> None:
        mode = msg.get("mode")
        if mode not in (SERIAL, PARALLEL):
            raise TransitionError(
                ERR_BAD_REQUEST, f"bench mode must be {SERIAL!r} or {PARALLEL!r}"
            )
        bench_clock = VirtualClock()
        _, robot = build_sim_rig(self._rig, bench_clock, tap_commands=False)
        cfg = CollectorConfig(
            target_rate_hz=self._record_rate_hz, mode=mode, duration_s=BENCH_DURATION_S
        )
        _, metrics = run_collection(robot, cfg, bench_clock)
        self._metrics = _metrics_dict(metrics)
        self._state = next_state
        self._ack(
            conn,
            msg,
            mode=mode,
            effective_hz=metrics.effective_rate_hz,
            overruns=metrics.tick_overruns,
        )

    # -- lifecycle ------------------------------------------------------------

    def close(self) -> None:
        if self._stopping.is_set():
            return
        self._stopping.set()
        self._control.join(timeout=5)
        if self._recording is not None:
            try:
                episode, _ = self._recording.finish()
                write_episode(episode, self._episodes_dir / episode.id)
            except (StoreError, OSError, RuntimeError):
                pass
            self._recording = None
        if self._playing is not None:
            self._playing.join(timeout=30)
        self._server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def daemon_serve(
    rig: RigSpec,
    ws_port: int,
    *,
    episodes_dir: str | Path = "episodes",
    host: str = "127.0.0.1",
    clock: Clock | None = None,
) -> RigDaemon:
    """Running daemon serving the operator protocol on ws://host:ws_port."""
    return RigDaemon(rig, episodes_dir=episodes_dir, host=host, port=ws_port, clock=clock)
