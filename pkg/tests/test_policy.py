import json
import socket
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigkit.clock import VirtualClock
from rigkit.core import (
    ConfigError,
    Episode,
    Frame,
    ImagePayload,
    JointVector,
    RobotConfig,
    Sample,
    default_arm,
    validate_episode,
)
from rigkit.policy import (
    ABORT,
    HOLD,
    MSG_ACTION,
    MSG_OBSERVATION,
    ActionMessage,
    ConnectionClosed,
    DecodeError,
    ErrorMessage,
    ImageAttachment,
    LengthMismatch,
    LengthOverflow,
    MalformedBody,
    ObservationMessage,
    PolicyConnectError,
    PolicyEndpoint,
    PolicyProtocolError,
    PolicyTimeout,
    ReplayPolicyServer,
    TruncatedMessage,
    UnknownTypeTag,
    decode_message,
    encode_message,
    read_message,
    send_message,
    serve_replay_policy,
)
from rigkit.registry import DeviceKind, DeviceSpec, LatencyModel, RigSpec
from rigkit.sim import build_sim_rig, camera_frame_bytes, reference_rig
from rigkit.core import CameraSpec


def pose(value, dim=7):
    return JointVector([value] * dim)


def sample_observation(seq=3, images=1):
    cam = CameraSpec(id="cam", width=64, height=48, channels=1, rate_hz=30.0)
    atts = tuple(
        ImageAttachment(
            id=f"cam{i}",
            image=ImagePayload(
                width=64, height=48, channels=1, pixels=camera_frame_bytes(cam, i)
            ),
        )
        for i in range(images)
    )
    return ObservationMessage(
        seq=seq, tick_ts=123_456_789, joints=JointVector([0.1 * i for i in range(14)]),
        images=atts,
    )


class TestCodecRoundTrips:
    def test_observation_with_image(self):
        msg = sample_observation()
        assert decode_message(encode_message(msg)) == msg

    def test_observation_without_images(self):
        msg = ObservationMessage(seq=0, tick_ts=0, joints=pose(0.5))
        back = decode_message(encode_message(msg))
        assert back == msg
        assert back.images == ()

    def test_observation_with_multiple_images(self):
        msg = sample_observation(images=3)
        assert decode_message(encode_message(msg)) == msg

    def test_action(self):
        msg = ActionMessage(seq=9, actions=tuple(pose(0.01 * k, 14) for k in range(8)))
        back = decode_message(encode_message(msg))
        assert back == msg
        assert back.horizon == 8

    def test_error(self):
        msg = ErrorMessage(seq=4, code="bad-request", message="nope")
        assert decode_message(encode_message(msg)) == msg

    def test_float_values_survive_exactly(self):
        values = [0.1, -2.5000000000000004, 1e-300, 3.141592653589793, -0.0]
        msg = ActionMessage(seq=0, actions=(JointVector(values),))
        back = decode_message(encode_message(msg))
        assert back.actions[0].values == tuple(values)


class TestCodecErrors:
    def test_length_mismatch(self):
        blob = encode_message(ErrorMessage(seq=0, code="x", message="y"))
        with pytest.raises(LengthMismatch):
            decode_message(blob + b"\x00")
        bad = struct.pack("<I", struct.unpack("<I", blob[:4])[0] + 1) + blob[4:]
        with pytest.raises(LengthMismatch):
            decode_message(bad)

    def test_truncated(self):
        with pytest.raises(TruncatedMessage):
            decode_message(b"\x01\x00")

    def test_unknown_tag(self):
        body = b"{}"
        blob = struct.pack("<IB", 1 + len(body), 7) + body
        with pytest.raises(UnknownTypeTag):
            decode_message(blob)

    def test_overflow(self):
        blob = struct.pack("<IB", 2**31, 1) + b"x"
        with pytest.raises(LengthOverflow):
            decode_message(blob)

    def test_observation_meta_overrun(self):
        body = struct.pack("<I", 999) + b"{}"
        blob = struct.pack("<IB", 1 + len(body), MSG_OBSERVATION) + body
        with pytest.raises(MalformedBody, match="overruns"):
            decode_message(blob)

    def test_observation_bad_json(self):
        meta = b"not json"
        body = struct.pack("<I", len(meta)) + meta
        blob = struct.pack("<IB", 1 + len(body), MSG_OBSERVATION) + body
        with pytest.raises(MalformedBody, match="JSON"):
            decode_message(blob)

    def test_image_slice_out_of_range(self):
        meta = json.dumps(
            {
                "seq": 0,
                "tick_ts": 0,
                "joints": [0.0],
                "images": [{"id": "c", "w": 2, "h": 2, "c": 1, "offset": 0, "len": 99}],
            }
        ).encode()
        body = struct.pack("<I", len(meta)) + meta + b"\x00" * 4
        blob = struct.pack("<IB", 1 + len(body), MSG_OBSERVATION) + body
        with pytest.raises(MalformedBody, match="slice"):
            decode_message(blob)

    def test_action_horizon_mismatch(self):
        body = json.dumps({"seq": 0, "horizon": 3, "actions": [[0.0]]}).encode()
        blob = struct.pack("<IB", 1 + len(body), MSG_ACTION) + body
        with pytest.raises(MalformedBody, match="horizon"):
            decode_message(blob)

    def test_action_empty(self):
        body = json.dumps({"seq": 0, "horizon": 0, "actions": []}).encode()
        blob = struct.pack("<IB", 1 + len(body), MSG_ACTION) + body
        with pytest.raises(MalformedBody):
            decode_message(blob)

    def test_ragged_action_rows(self):
        body = json.dumps(
            {"seq": 0, "horizon": 2, "actions": [[0.0, 0.0], [0.0]]}
        ).encode()
        blob = struct.pack("<IB", 1 + len(body), MSG_ACTION) + body
        with pytest.raises(MalformedBody):
            decode_message(blob)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def message_strategy():
    joints = st.lists(finite, min_size=1, max_size=14).map(JointVector)
    image = st.builds(
        lambda w, h, c, seed: ImagePayload(
            width=w, height=h, channels=c, pixels=bytes((seed + i) % 256 for i in range(w * h * c))
        ),
        st.integers(1, 8),
        st.integers(1, 6),
        st.sampled_from([1, 3]),
        st.integers(0, 255),
    )
    attachment = st.builds(ImageAttachment, st.text(min_size=1, max_size=8), image)
    obs = st.builds(
        ObservationMessage,
        st.integers(0, 2**63),
        st.integers(0, 2**63),
        joints,
        st.lists(attachment, max_size=3).map(tuple),
    )
    act = st.builds(
        lambda seq, rows: ActionMessage(seq=seq, actions=tuple(rows)),
        st.integers(0, 2**63),
        st.lists(st.lists(finite, min_size=3, max_size=3).map(JointVector), min_size=1, max_size=5),
    )
    err = st.builds(ErrorMessage, st.integers(0, 2**63), st.text(max_size=10), st.text(max_size=40))
    return st.one_of(obs, act, err)


class TestCodecProperties:
    @given(msg=message_strategy())
    @settings(max_examples=200)
    def test_round_trip(self, msg):
        assert decode_message(encode_message(msg)) == msg

    @given(blob=st.binary(max_size=200))
    @settings(max_examples=300)
    def test_fuzz_never_crashes(self, blob):
        try:
            decode_message(blob)
        except DecodeError:
            pass

    @given(msg=message_strategy(), flips=st.lists(st.tuples(st.integers(0, 10**6), st.integers(1, 255)), min_size=1, max_size=4))
    @settings(max_examples=200)
    def test_mutated_encodings_never_crash(self, msg, flips):
        blob = bytearray(encode_message(msg))
        for pos, delta in flips:
            blob[pos % len(blob)] ^= delta
        try:
            decode_message(bytes(blob))
        except DecodeError:
            pass


class TestSocketFraming:
    def test_round_trip_over_socketpair(self):
        a, b = socket.socketpair()
        try:
            msg = sample_observation()
            send_message(a, msg)
            assert read_message(b) == msg
        finally:
            a.close()
            b.close()

    def test_peer_close_mid_message(self):
        a, b = socket.socketpair()
        try:
            blob = encode_message(ErrorMessage(seq=0, code="x", message="y"))
            a.sendall(blob[:7])
            a.close()
            with pytest.raises(ConnectionClosed):
                read_message(b)
        finally:
            b.close()

    def test_oversized_frame_rejected_before_read(self):
        a, b = socket.socketpair()
        try:
            a.sendall(struct.pack("<IB", 2**30, 1))
            with pytest.raises(LengthOverflow):
                read_message(b)
        finally:
            a.close()
            b.close()


def manual_episode(action_values, period_ns=20_000_000, episode_id="expert"):
    """Episode whose single command stream holds the given per-frame values."""
    config = RobotConfig(name="one", arms=(default_arm(),), cameras=())
    samples = [
        Sample("bus.cmd", k * period_ns, pose(v)) for k, v in enumerate(action_values)
    ]
    frames = [
        Frame(
            tick_index=k,
            tick_ts=k * period_ns,
            slots={"bus.cmd": k},
            staleness={"bus.cmd": 0},
        )
        for k in range(len(action_values))
    ]
    ep = Episode(
        id=episode_id,
        task="t",
        config=config,
        frames=frames,
        streams={"bus.cmd": samples},
        schemas={"bus.cmd": "joints"},
        meta={},
    )
    assert validate_episode(ep) == []
    return ep


def request_once(sock, seq):
    send_message(sock, ObservationMessage(seq=seq, tick_ts=0, joints=pose(0.0)))
    return read_message(sock)


class TestReplayServer:
    def test_h1_identity_replay(self):
        ep = manual_episode([0.1, 0.2, 0.3, 0.4])
        with ReplayPolicyServer(ep, horizon=1) as server:
            with socket.create_connection((server.host, server.port), timeout=2) as sock:
                got = []
                for seq in range(4):
                    reply = request_once(sock, seq)
                    assert isinstance(reply, ActionMessage)
                    assert reply.seq == seq
                    assert reply.horizon == 1
                    got.append(reply.actions[0])
                assert got == [pose(v) for v in (0.1, 0.2, 0.3, 0.4)]

    def test_h8_chunks_cover_episode_with_padding(self):
        values = [round(0.01 * k, 6) for k in range(20)]
        ep = manual_episode(values)
        with ReplayPolicyServer(ep, horizon=8) as server:
            with socket.create_connection((server.host, server.port), timeout=2) as sock:
                chunks = [request_once(sock, s).actions for s in range(3)]
        assert [a.values[0] for a in chunks[0]] == values[0:8]
        assert [a.values[0] for a in chunks[1]] == values[8:16]
        assert [a.values[0] for a in chunks[2]] == values[16:20] + [values[-1]] * 4

    def test_past_end_repeats_final_action(self):
        ep = manual_episode([0.1, 0.2])
        with ReplayPolicyServer(ep, horizon=4) as server:
            with socket.create_connection((server.host, server.port), timeout=2) as sock:
                request_once(sock, 0)
                reply = request_once(sock, 1)
        assert reply.actions == (pose(0.2),) * 4

    def test_cursor_resets_per_connection(self):
        ep = manual_episode([0.1, 0.2, 0.3])
        with ReplayPolicyServer(ep, horizon=1) as server:
            for _ in range(2):
                with socket.create_connection((server.host, server.port), timeout=2) as sock:
                    first = request_once(sock, 0)
                    assert first.actions[0] == pose(0.1)

    def test_malformed_request_keeps_connection_open(self):
        ep = manual_episode([0.1])
        with ReplayPolicyServer(ep, horizon=1) as server:
            with socket.create_connection((server.host, server.port), timeout=2) as sock:
                garbage = b"\xde\xad\xbe\xef"
                sock.sendall(struct.pack("<I", 1 + len(garbage)) + b"\x09" + garbage)
                reply = read_message(sock)
                assert isinstance(reply, ErrorMessage)
                assert reply.code == "bad-message"
                follow_up = request_once(sock, 5)
                assert isinstance(follow_up, ActionMessage)
                assert follow_up.seq == 5

    def test_wrong_direction_message_rejected(self):
        ep = manual_episode([0.1])
        with ReplayPolicyServer(ep, horizon=1) as server:
            with socket.create_connection((server.host, server.port), timeout=2) as sock:
                send_message(sock, ActionMessage(seq=2, actions=(pose(0.0),)))
                reply = read_message(sock)
                assert isinstance(reply, ErrorMessage)
                assert reply.code == "bad-request"
                assert reply.seq == 2

    def test_episode_without_commands_rejected(self):
        from rigkit.store import StoreError

        clock = VirtualClock()
        from rigkit.collector import CollectorConfig, SERIAL, run_serial

        _, robot = build_sim_rig(reference_rig(), clock, tap_commands=False)
        cfg = CollectorConfig(target_rate_hz=60, mode=SERIAL, frame_count=3)
        ep, _ = run_serial(robot, cfg, clock)
        with pytest.raises(StoreError):
            ReplayPolicyServer(ep, horizon=1)


def single_arm_rig(clock):
    config = RobotConfig(name="one", arms=(default_arm(),), cameras=())
    rig = RigSpec(
        config=config,
        devices=(
            DeviceSpec(
                id="bus",
                kind=DeviceKind.CONTROLLER,
                rate_hz=200.0,
                latency=LatencyModel(base_us=200),
            ),
        ),
    )
    return build_sim_rig(rig, clock, tap_commands=True)


def loop_endpoint(server):
    return PolicyEndpoint(host=server.host, port=server.port)


class TestPolicyLoop:
    def test_steps_zero_empty_log(self):
        ep = manual_episode([0.1])
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with ReplayPolicyServer(ep, horizon=1) as server:
            from rigkit.policy import run_policy_loop

            log, latencies = run_policy_loop(
                robot, loop_endpoint(server), clock, horizon=1, rate_hz=50, steps=0
            )
        assert log.commanded == []
        assert latencies == []

    def test_server_down_fails_before_any_command(self):
        from rigkit.policy import run_policy_loop

        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()  # nothing listens here now
        endpoint = PolicyEndpoint(host="127.0.0.1", port=port, connect_timeout_ms=300)
        with pytest.raises(PolicyConnectError):
            run_policy_loop(robot, endpoint, clock, horizon=1, rate_hz=50, steps=2)
        assert robot.controller(0).drain_commands() == []

    def test_identity_replay_commands_match_expert(self):
        from rigkit.policy import run_policy_loop

        values = [round(0.05 * k, 6) for k in range(12)]
        ep = manual_episode(values)
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with ReplayPolicyServer(ep, horizon=1) as server:
            log, latencies = run_policy_loop(
                robot, loop_endpoint(server), clock, horizon=1, rate_hz=50, steps=12
            )
        assert [q.values[0] for _, q in log.commanded] == values
        assert len(log.commanded) == 12
        assert len(latencies) == 12
        assert all(lat > 0 for lat in latencies)
        assert log.violations == []
        taps = robot.controller(0).drain_commands()
        assert [s.payload.values[0] for s in taps] == values

    def test_chunked_execution_and_latency_count(self):
        from rigkit.policy import run_policy_loop

        values = [round(0.01 * k, 6) for k in range(20)]
        ep = manual_episode(values)
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with ReplayPolicyServer(ep, horizon=8) as server:
            log, latencies = run_policy_loop(
                robot, loop_endpoint(server), clock, horizon=8, rate_hz=50, steps=20
            )
        assert [q.values[0] for _, q in log.commanded] == values
        assert len(latencies) == 3  # ceil(20 / 8)

    def test_commands_stay_on_grid(self):
        from rigkit.policy import run_policy_loop

        ep = manual_episode([0.1] * 10)
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with ReplayPolicyServer(ep, horizon=5) as server:
            log, _ = run_policy_loop(
                robot, loop_endpoint(server), clock, horizon=5, rate_hz=50, steps=10
            )
        t0 = log.commanded[0][0]
        for k, (ts, _q) in enumerate(log.commanded[1:], start=1):
            assert ts == t0 - (t0 % 20_000_000) + k * 20_000_000

    def test_out_of_limit_actions_clamped_and_flagged(self):
        from rigkit.policy import run_policy_loop

        ep = manual_episode([0.5, 9.9, 0.5])
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with ReplayPolicyServer(ep, horizon=1) as server:
            log, _ = run_policy_loop(
                robot, loop_endpoint(server), clock, horizon=1, rate_hz=50, steps=3
            )
        assert any("clamped" in v for v in log.violations)
        q_max = robot.config.arms[0].q_max
        assert log.commanded[1][1].values == q_max

    def test_requery_takes_first_action_of_each_chunk(self):
        from rigkit.policy import run_policy_loop

        values = [round(0.01 * k, 6) for k in range(12)]
        ep = manual_episode(values)
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with ReplayPolicyServer(ep, horizon=4) as server:
            log, latencies = run_policy_loop(
                robot, loop_endpoint(server), clock, horizon=4, rate_hz=50, steps=3,
                requery=True,
            )
        assert len(latencies) == 3
        assert [q.values[0] for _, q in log.commanded] == [values[0], values[4], values[8]]

    def test_deterministic_across_fresh_runs(self):
        from rigkit.policy import run_policy_loop

        values = [round(0.02 * k, 6) for k in range(10)]
        ep = manual_episode(values)
        logs = []
        for _ in range(2):
            clock = VirtualClock()
            _, robot = single_arm_rig(clock)
            with ReplayPolicyServer(ep, horizon=4) as server:
                log, _ = run_policy_loop(
                    robot, loop_endpoint(server), clock, horizon=4, rate_hz=50, steps=10
                )
            logs.append(log)
        assert logs[0].commanded == logs[1].commanded
        assert logs[0].measured == logs[1].measured


class _SilentServer:
    """Accepts connections and reads requests but never answers."""

    def __init__(self):
        self._listener = socket.create_server(("127.0.0.1", 0))
        self.host, self.port = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        conns = []
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
                conns.append(conn)
            except OSError:
                break
        for c in conns:
            c.close()

    def close(self):
        self._stop.set()
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _ScriptedServer:
    """Replies to each request with a fixed preencoded blob."""

    def __init__(self, reply_bytes):
        self._reply = reply_bytes
        self._listener = socket.create_server(("127.0.0.1", 0))
        self.host, self.port = self._listener.getsockname()[:2]
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        try:
            conn, _ = self._listener.accept()
        except OSError:
            return
        with conn:
            while True:
                try:
                    read_message(conn)
                except Exception:
                    return
                try:
                    conn.sendall(self._reply)
                except OSError:
                    return

    def close(self):
        self._listener.close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TestLoopFailurePolicies:
    def endpoint(self, server, read_ms=50):
        return PolicyEndpoint(host=server.host, port=server.port, read_timeout_ms=read_ms)

    def test_timeout_hold_keeps_issuing(self):
        from rigkit.policy import run_policy_loop

        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with _SilentServer() as server:
            log, latencies = run_policy_loop(
                robot, self.endpoint(server), clock, horizon=1, rate_hz=1000, steps=3,
                on_timeout=HOLD,
            )
        assert len(log.commanded) == 3
        assert len(log.violations) == 3
        assert all("timed out" in v for v in log.violations)
        home = pose(0.0)
        for _, q in log.commanded:
            assert q == home

    def test_timeout_abort_raises(self):
        from rigkit.policy import run_policy_loop

        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with _SilentServer() as server:
            with pytest.raises(PolicyTimeout):
                run_policy_loop(
                    robot, self.endpoint(server), clock, horizon=1, rate_hz=1000,
                    steps=3, on_timeout=ABORT,
                )

    def test_error_reply_surfaces(self):
        from rigkit.policy import run_policy_loop

        reply = encode_message(ErrorMessage(seq=0, code="no-model", message="not loaded"))
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with _ScriptedServer(reply) as server:
            with pytest.raises(PolicyProtocolError, match="no-model"):
                run_policy_loop(
                    robot, self.endpoint(server), clock, horizon=1, rate_hz=50, steps=2
                )

    def test_seq_mismatch_rejected(self):
        from rigkit.policy import run_policy_loop

        reply = encode_message(ActionMessage(seq=777, actions=(pose(0.0),)))
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with _ScriptedServer(reply) as server:
            with pytest.raises(PolicyProtocolError, match="seq"):
                run_policy_loop(
                    robot, self.endpoint(server), clock, horizon=1, rate_hz=50, steps=2
                )

    def test_wrong_dim_rejected(self):
        from rigkit.policy import run_policy_loop

        reply = encode_message(ActionMessage(seq=0, actions=(JointVector([0.0] * 3),)))
        clock = VirtualClock()
        _, robot = single_arm_rig(clock)
        with _ScriptedServer(reply) as server:
            with pytest.raises(PolicyProtocolError, match="dim"):
                run_policy_loop(
                    robot, self.endpoint(server), clock, horizon=1, rate_hz=50, steps=2
                )


class TestEndpointAndMessages:
    def test_endpoint_timeouts_positive(self):
        with pytest.raises(ConfigError):
            PolicyEndpoint(host="h", port=1, connect_timeout_ms=0)
        with pytest.raises(ConfigError):
            PolicyEndpoint(host="h", port=1, read_timeout_ms=-5)

    def test_action_rows_must_align(self):
        with pytest.raises(ConfigError):
            ActionMessage(seq=0, actions=(pose(0.0, 7), pose(0.0, 14)))
        with pytest.raises(ConfigError):
            ActionMessage(seq=0, actions=())

    def test_observation_rejects_negative_seq(self):
        with pytest.raises(ConfigError):
            ObservationMessage(seq=-1, tick_ts=0, joints=pose(0.0))
