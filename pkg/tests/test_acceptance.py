"""End-to-end acceptance checks, one test per release criterion.

Each test prints a single ``[acceptance] <name>: PASS|FAIL`` verdict line in
addition to its pytest outcome.  The rate benchmark performs ten 30-second
wall-clock collections, so this file takes about six minutes; everything else
runs on the virtual clock in seconds.
"""

import random
import shutil
import statistics
import string
import struct
import threading
import time
from contextlib import contextmanager

from epgen import random_episode
from test_control import WIDE, feasible_plan, single_arm_rig

from rigkit.analysis import CSV_HEADER, compare_replays, emit_stats_csv
from rigkit.clock import RealClock, VirtualClock, ensure_task
from rigkit.collector import (
    PARALLEL,
    SERIAL,
    CollectorConfig,
    associate_latest,
    run_collection,
)
from rigkit.control import engage_clutch, initial_mapping, run_teleop, teleop_step
from rigkit.core import (
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
    ActionMessage,
    DecodeError,
    ErrorMessage,
    ImageAttachment,
    ObservationMessage,
    PolicyEndpoint,
    ReplayPolicyServer,
    decode_message,
    encode_message,
    run_policy_loop,
)
from rigkit.sim import build_sim_rig, reference_rig
from rigkit.store import (
    MagicMismatch,
    RecordCountMismatch,
    TruncatedRecord,
    VersionMismatch,
    export_training_set,
    read_episode,
    write_episode,
)

SEED = 20260823


def _verdict(capfd, name, word, detail=""):
    line = f"[acceptance] {name}: {word}"
    if detail:
        line += f" ({detail})"
    with capfd.disabled():
        print(line, flush=True)


@contextmanager
def criterion(capfd, name, detail_box=None):
    """Emit exactly one verdict line whether the body passes or raises."""
    try:
        yield
    except BaseException as err:
        _verdict(capfd, name, "FAIL", str(err) or type(err).__name__)
        raise
    _verdict(capfd, name, "PASS", detail_box[0] if detail_box else "")


def bench_rates(mode, clock_factory, runs, duration_s):
    rates = []
    for _ in range(runs):
        clock = clock_factory()
        _, robot = build_sim_rig(reference_rig(), clock)
        cfg = CollectorConfig(target_rate_hz=60.0, mode=mode, duration_s=duration_s)
        _, metrics = run_collection(robot, cfg, clock)
        rates.append(metrics.effective_rate_hz)
    return rates


def run_together(clock, *fns, settle_s=0.1):
    """Run workers in threads with their rate grids pinned to a shared t0.

    A gate task holds virtual time at its current value (awake tasks block
    advancement) while the workers start and register, so every worker reads
    the same now() when it lays out its tick grid.
    """
    results = [None] * len(fns)
    errors = []

    def wrap(i, fn):
        def target():
            try:
                results[i] = fn()
            except BaseException as err:
                errors.append(err)

        return target

    threads = [
        threading.Thread(target=wrap(i, fn), name=f"worker-{i}")
        for i, fn in enumerate(fns)
    ]
    with ensure_task(clock, "start-gate"):
        for thread in threads:
            thread.start()
        time.sleep(settle_s)
    for thread in threads:
        thread.join()
    if errors:
        raise errors[0]
    return results


def command_episode(rng, episode_id):
    """Small episode whose only stream is a command stream (one arm)."""
    config = RobotConfig(name="one", arms=(default_arm(),), cameras=())
    period = 25_000_000
    count = rng.randint(4, 20)
    sid = "bus.cmd"
    samples = [
        Sample(sid, k * period, JointVector([rng.uniform(-1.0, 1.0) for _ in range(7)]))
        for k in range(count)
    ]
    frames = [
        Frame(tick_index=k, tick_ts=k * period, slots={sid: k}, staleness={sid: 0})
        for k in range(count)
    ]
    ep = Episode(
        id=episode_id,
        task="generated",
        config=config,
        frames=frames,
        streams={sid: samples},
        schemas={sid: "joints"},
        meta={},
    )
    assert validate_episode(ep) == []
    return ep


def random_message(rng):
    kind = rng.randrange(3)
    seq = rng.randrange(2**63)

    def joints(dim):
        return JointVector([rng.uniform(-1e6, 1e6) for _ in range(dim)])

    if kind == 0:
        images = []
        for i in range(rng.randrange(3)):
            w, h, c = rng.randint(1, 8), rng.randint(1, 6), rng.choice((1, 3))
            images.append(
                ImageAttachment(
                    f"cam{i}",
                    ImagePayload(width=w, height=h, channels=c, pixels=rng.randbytes(w * h * c)),
                )
            )
        return ObservationMessage(
            seq, rng.randrange(2**63), joints(rng.randint(1, 14)), tuple(images)
        )
    if kind == 1:
        dim = rng.randint(1, 14)
        return ActionMessage(seq, [joints(dim) for _ in range(rng.randint(1, 5))])
    code = "".join(rng.choices(string.ascii_lowercase, k=rng.randint(1, 8)))
    text = "".join(rng.choices(string.ascii_letters + " .,!", k=rng.randint(0, 40)))
    return ErrorMessage(seq, code, text)


class TestAcceptance:
    def test_rate_benchmark_medians(self, capfd):
        """60 Hz x 30 s x 5 runs per mode: parallel holds the target, serial
        degrades into [58.0, 59.9), parallel beats serial in every run, and
        virtual-clock medians match wall-clock medians within 0.3 Hz."""
        detail = [""]
        with criterion(capfd, "rate-benchmark", detail):
            runs, dur = 5, 30.0
            virt_serial = bench_rates(SERIAL, VirtualClock, runs, dur)
            virt_parallel = bench_rates(PARALLEL, VirtualClock, runs, dur)
            real_serial = bench_rates(SERIAL, RealClock, runs, dur)
            real_parallel = bench_rates(PARALLEL, RealClock, runs, dur)

            med = statistics.median
            detail[0] = (
                f"real serial {med(real_serial):.3f} Hz, "
                f"real parallel {med(real_parallel):.3f} Hz"
            )
            assert med(real_parallel) >= 59.9
            assert 58.0 <= med(real_serial) < 59.9
            assert all(p > s for p, s in zip(real_parallel, real_serial))
            assert med(virt_parallel) >= 59.9
            assert 58.0 <= med(virt_serial) < 59.9
            assert all(p > s for p, s in zip(virt_parallel, virt_serial))
            assert abs(med(virt_serial) - med(real_serial)) <= 0.3
            assert abs(med(virt_parallel) - med(real_parallel)) <= 0.3

    def test_thirty_hz_parallel_collection(self, capfd):
        """Parallel collection at a 30 Hz target for 60 s stays within
        30 +/- 0.15 Hz effective."""
        detail = [""]
        with criterion(capfd, "30hz-collection", detail):
            clock = VirtualClock()
            _, robot = build_sim_rig(reference_rig(), clock)
            cfg = CollectorConfig(target_rate_hz=30.0, mode=PARALLEL, duration_s=60.0)
            _, metrics = run_collection(robot, cfg, clock)
            detail[0] = f"{metrics.effective_rate_hz:.4f} Hz"
            assert abs(metrics.effective_rate_hz - 30.0) <= 0.15

    def test_association_matches_exhaustive_scan(self, capfd):
        """associate_latest equals a linear scan over 1,000 random instances."""
        with criterion(capfd, "association-oracle"):
            rng = random.Random(SEED)
            mismatches = 0
            for _ in range(1000):
                count = rng.randrange(0, 60)
                ts_list = sorted(rng.randrange(0, 5000) for _ in range(count))
                samples = [Sample("s", ts, float(ts)) for ts in ts_list]
                tick = rng.randrange(0, 5500)
                expected = None
                for i, sample in enumerate(samples):
                    if sample.capture_ts <= tick:
                        expected = i
                if associate_latest(samples, tick) != expected:
                    mismatches += 1
            assert mismatches == 0

    def test_storage_round_trip_and_typed_corruption(self, capfd):
        """100 random episodes write/read/write to bit-identical stream and
        frame-index files; corrupted files raise their specific error types."""
        import pytest

        with criterion(capfd, "storage-round-trip"):
            import tempfile
            from pathlib import Path

            root = Path(tempfile.mkdtemp(prefix="acc-store-"))
            try:
                for i in range(100):
                    ep = random_episode(random.Random(i), f"acc-{i:03d}")
                    first = root / f"a{i}"
                    second = root / f"b{i}"
                    write_episode(ep, first)
                    write_episode(read_episode(first), second)
                    for path in sorted(first.iterdir()):
                        if path.name == "meta.json":
                            continue  # carries the wall-clock session epoch
                        assert (second / path.name).read_bytes() == path.read_bytes(), (
                            f"episode {i}: {path.name}"
                        )

                target = command_episode(random.Random(SEED), "victim")
                clean = root / "clean"
                manifest = write_episode(target, clean)
                stream_name = manifest.streams[0].file_name

                def corrupted(tag, mutate):
                    case = root / f"corrupt-{tag}"
                    shutil.copytree(clean, case)
                    mutate(case)
                    return case

                bad_magic = corrupted(
                    "magic",
                    lambda d: (d / stream_name).write_bytes(
                        b"XXXX" + (d / stream_name).read_bytes()[4:]
                    ),
                )
                with pytest.raises(MagicMismatch):
                    read_episode(bad_magic)

                bad_version = corrupted(
                    "version",
                    lambda d: (d / stream_name).write_bytes(
                        struct.pack("<4sHH", b"CYRS", 9, 0)
                        + (d / stream_name).read_bytes()[8:]
                    ),
                )
                with pytest.raises(VersionMismatch):
                    read_episode(bad_version)

                cut = corrupted(
                    "cut",
                    lambda d: (d / stream_name).write_bytes(
                        (d / stream_name).read_bytes()[:-3]
                    ),
                )
                with pytest.raises(TruncatedRecord):
                    read_episode(cut)

                frames_magic = corrupted(
                    "frames",
                    lambda d: (d / "frames.cyr").write_bytes(
                        b"YYYY" + (d / "frames.cyr").read_bytes()[4:]
                    ),
                )
                with pytest.raises(MagicMismatch):
                    read_episode(frames_magic)
            finally:
                shutil.rmtree(root, ignore_errors=True)

    def test_playback_tracking_error_bound(self, capfd):
        """20 random feasible plans on the noise-free sim arm: per-joint error
        at every waypoint time is at most v_max * command_period + 1e-9."""
        with criterion(capfd, "playback-fidelity"):
            from rigkit.control import execute_playback, validate_plan

            rng = random.Random(SEED)
            rate = 50.0
            for trial in range(20):
                clock = VirtualClock()
                _, robot = single_arm_rig(clock)
                start = robot.controller(0).read().payload
                plan = feasible_plan(rng, start, rate=rate)
                assert validate_plan(plan, robot.config) == []
                log = execute_playback(robot, plan, clock)
                t0 = log.commanded[0][0]
                by_ts = {ts: q for ts, q in log.measured}
                for wp in plan.waypoints:
                    measured = by_ts[t0 + round(wp.t * 1e9)]
                    for j, (m, w) in enumerate(zip(measured.values, wp.q.values)):
                        bound = robot.config.arms[0].v_max[j] / rate + 1e-9
                        assert abs(m - w) <= bound, f"trial {trial} joint {j}"

    def test_teleop_clutch_and_scale_invariants(self, capfd):
        """Clutch engagement is jump-free bit-for-bit across 1,000 random
        states; with no smoothing, scaling the gain by a power of two scales
        origin-referenced output deltas exactly."""
        with criterion(capfd, "teleop-invariants"):
            rng = random.Random(SEED)
            arm = default_arm()
            for _ in range(1000):
                leader = JointVector([rng.uniform(-3.0, 3.0) for _ in range(7)])
                follower = JointVector(
                    [
                        min(max(rng.uniform(-4.0, 4.0), lo), hi)
                        for lo, hi in zip(arm.q_min, arm.q_max)
                    ]
                )
                scale = rng.uniform(-2.0, 2.0)
                alpha = rng.uniform(0.01, 1.0)
                mapping = engage_clutch(
                    initial_mapping(7, scale=scale, filter_alpha=alpha), leader, follower
                )
                out, _ = teleop_step(mapping, leader, follower, arm)
                assert out == follower

            def magnitude():
                # bounded away from zero: subnormal products round unevenly
                if rng.random() < 0.1:
                    return 0.0
                value = 10.0 ** rng.uniform(-6, 0)
                return value if rng.random() < 0.5 else -value

            zero = JointVector([0.0] * 7)
            for _ in range(1000):
                factor = 2.0 ** rng.randint(-2, 3)
                scale = magnitude()
                leader = JointVector([magnitude() for _ in range(7)])
                base = engage_clutch(
                    initial_mapping(7, scale=scale, filter_alpha=1.0), zero, zero
                )
                scaled = engage_clutch(
                    initial_mapping(7, scale=factor * scale, filter_alpha=1.0), zero, zero
                )
                out_base, _ = teleop_step(base, leader, zero, WIDE)
                out_scaled, _ = teleop_step(scaled, leader, zero, WIDE)
                for a, b in zip(out_base.values, out_scaled.values):
                    assert b == factor * a

    def test_closed_loop_replay_reproduces_expert(self, capfd):
        """One scripted expert session replayed closed-loop 50 times through
        the policy server: global MAD <= 5e-3 rad, per-tick variance <= 1e-5,
        and the stats CSV has ticks x action_dim + 1 rows."""
        import math
        import tempfile
        from pathlib import Path

        detail = [""]
        with criterion(capfd, "closed-loop-replay", detail):
            rate = 30.0
            duration = 8.0
            steps = int(rate * duration)
            horizon = 8

            def leader(t_s):
                values = [0.3 * math.sin(2 * math.pi * 0.25 * t_s + 0.3 * j) for j in range(6)]
                values.append(0.5 + 0.2 * math.sin(2 * math.pi * 0.25 * t_s))
                return JointVector(values)

            clock = VirtualClock()
            _, robot = single_arm_rig(clock)
            cfg = CollectorConfig(target_rate_hz=rate, mode=PARALLEL, duration_s=duration)

            def collect():
                return run_collection(robot, cfg, clock, episode_id="expert", task="demo")

            def drive():
                mapping = initial_mapping(7, filter_alpha=1.0)
                return run_teleop(
                    robot, leader, mapping, clock, rate_hz=rate, duration_s=duration
                )

            (expert_raw, _), _ = run_together(clock, collect, drive)
            root = Path(tempfile.mkdtemp(prefix="acc-replay-"))
            try:
                write_episode(expert_raw, root / "expert")
                expert = read_episode(root / "expert")

                replays = []
                with ReplayPolicyServer(expert, horizon=horizon) as server:
                    endpoint = PolicyEndpoint(server.host, server.port)
                    for i in range(50):
                        run_clock = VirtualClock()
                        _, run_robot = single_arm_rig(run_clock)

                        def collect_run():
                            return run_collection(
                                run_robot, cfg, run_clock, episode_id=f"run-{i:02d}"
                            )

                        def drive_run():
                            return run_policy_loop(
                                run_robot,
                                endpoint,
                                run_clock,
                                horizon=horizon,
                                rate_hz=rate,
                                steps=steps,
                            )

                        (episode, _), _ = run_together(run_clock, collect_run, drive_run)
                        replays.append(episode)

                stats = compare_replays(expert, replays)
                worst_var = max(max(row) for row in stats.var)
                detail[0] = f"global MAD {stats.global_mad:.2e}, max var {worst_var:.2e}"
                assert stats.replay_count == 50
                assert stats.global_mad <= 5e-3
                assert worst_var <= 1e-5
                rows = emit_stats_csv(stats, root / "stats.csv")
                assert rows == len(expert.frames) * 7 + 1
                header = (root / "stats.csv").read_text().splitlines()[0]
                assert header == CSV_HEADER
            finally:
                shutil.rmtree(root, ignore_errors=True)

    def test_export_determinism(self, capfd):
        """Sampling 20 of 50 episodes with a fixed seed twice writes identical
        index and records files."""
        import tempfile
        from pathlib import Path

        with criterion(capfd, "export-determinism"):
            rng = random.Random(SEED)
            episodes = [command_episode(rng, f"ep-{i:03d}") for i in range(50)]
            root = Path(tempfile.mkdtemp(prefix="acc-export-"))
            try:
                first = export_training_set(episodes, 20, seed=7, out=root / "a")
                second = export_training_set(episodes, 20, seed=7, out=root / "b")
                assert len(first.entries) == 20
                assert [e.episode_id for e in first.entries] == [
                    e.episode_id for e in second.entries
                ]
                assert (root / "a" / "index.json").read_bytes() == (
                    root / "b" / "index.json"
                ).read_bytes()
                for entry in first.entries:
                    name = f"{entry.episode_id}.records.json"
                    assert (root / "a" / name).read_bytes() == (
                        root / "b" / name
                    ).read_bytes()
            finally:
                shutil.rmtree(root, ignore_errors=True)

    def test_protocol_codec_robustness(self, capfd):
        """10^3 random messages round-trip exactly; 10^4 random byte blobs
        decode to a value or a typed error, never an unhandled crash."""
        with criterion(capfd, "codec-robustness"):
            rng = random.Random(SEED)
            for _ in range(1000):
                msg = random_message(rng)
                assert decode_message(encode_message(msg)) == msg
            for _ in range(10_000):
                blob = rng.randbytes(rng.randrange(0, 200))
                try:
                    decode_message(blob)
                except DecodeError:
                    pass
