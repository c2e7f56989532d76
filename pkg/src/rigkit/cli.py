"""Command-line surface: one subcommand per pipeline stage.

Every command prints a single JSON summary line on success so runs are easy
to script against.  Exit codes: 0 success, 2 for invalid inputs (bad flags,
malformed files, infeasible configs), 1 for failures at run time (peers
gone, timeouts, I/O).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from glob import glob
from pathlib import Path

from .analysis import compare_replays, emit_stats_csv
from .clock import NS_PER_S, RealClock, VirtualClock
from .collector import PARALLEL, SERIAL, CollectorConfig, run_collection
from .control import (
    DEFAULT_FILTER_ALPHA,
    TIMED,
    TrajectoryPlan,
    Waypoint,
    PlaybackTimeout,
    execute_playback,
    initial_mapping,
    run_teleop,
    save_plan,
)
from .core import ConfigError
from .daemon import daemon_serve
from .policy import (
    DEFAULT_HORIZON,
    DEFAULT_POLICY_RATE_HZ,
    ABORT,
    HOLD,
    PolicyConnectError,
    PolicyEndpoint,
    PolicyProtocolError,
    PolicyTimeout,
    ReplayPolicyServer,
    run_policy_loop,
)
from .registry import RigSpec, load_rig_spec
from .sim import build_sim_rig, leader_position, parse_leader_script, reference_rig
from .store import StoreError, episode_actions, read_episode, write_episode

VALIDATION_ERRORS = (
    ConfigError,
    StoreError,
    FileNotFoundError,
    IsADirectoryError,
    json.JSONDecodeError,
)
RUNTIME_ERRORS = (
    PolicyConnectError,
    PolicyProtocolError,
    PolicyTimeout,
    PlaybackTimeout,
    OSError,
)


def _rig(args) -> RigSpec:
    if args.rig is None:
        return reference_rig()
    return load_rig_spec(args.rig)


def _clock(args):
    return VirtualClock() if args.virtual else RealClock()


def _emit(doc: dict) -> None:
    print(json.dumps(doc), flush=True)


def _add_rig_flags(sub) -> None:
    sub.add_argument(
        "--rig", default=None, help="rig config JSON (default: built-in reference rig)"
    )
    sub.add_argument(
        "--virtual",
        action="store_true",
        help="run on a virtual clock instead of wall time (default: wall time)",
    )


def cmd_collect(args) -> int:
    rig = _rig(args)
    clock = _clock(args)
    cfg = CollectorConfig(
        target_rate_hz=args.rate, mode=args.mode, duration_s=args.duration
    )
    _, robot = build_sim_rig(rig, clock)
    episode, metrics = run_collection(
        robot, cfg, clock, episode_id=args.episode_id, task=args.task
    )
    out = Path(args.out) / episode.id
    write_episode(episode, out)
    _emit({"episode": episode.id, "path": str(out), **metrics.to_json_dict()})
    return 0


def cmd_replay(args) -> int:
    episode = read_episode(args.episode)
    if not episode.frames:
        raise ConfigError(f"episode {episode.id!r} has no frames to replay")
    actions = episode_actions(episode)
    t0 = episode.frames[0].tick_ts
    waypoints = tuple(
        Waypoint(t=(frame.tick_ts - t0) / NS_PER_S, q=q)
        for frame, q in zip(episode.frames, actions)
    )
    plan = TrajectoryPlan(
        mode=TIMED, waypoints=waypoints, command_rate_hz=args.rate
    )
    save_plan(plan, args.plan_out)
    doc = {
        "plan": str(args.plan_out),
        "waypoints": len(plan.waypoints),
        "duration_s": plan.duration_s,
    }
    if args.execute:
        clock = _clock(args)
        _, robot = build_sim_rig(_rig(args), clock)
        log = execute_playback(robot, plan, clock)
        doc["commands"] = len(log.commanded)
        doc["violations"] = len(log.violations)
    _emit(doc)
    return 0


def cmd_teleop(args) -> int:
    if args.script is None:
        raise ConfigError("live leader input needs hardware; provide --script FILE")
    script = parse_leader_script(json.loads(Path(args.script).read_text()))
    rig = _rig(args)
    clock = _clock(args)
    _, robot = build_sim_rig(rig, clock)
    mapping = initial_mapping(script.dim, scale=args.scale, filter_alpha=args.alpha)
    log, mapping = run_teleop(
        robot,
        lambda t_s: leader_position(script, int(t_s * NS_PER_S)),
        mapping,
        clock,
        rate_hz=args.rate,
        duration_s=args.duration,
    )
    final = log.commanded[-1][1] if log.commanded else None
    _emit(
        {
            "commands": len(log.commanded),
            "violations": len(log.violations),
            "clutch": mapping.clutch,
            "final_command": list(final.values) if final is not None else [],
        }
    )
    return 0


def cmd_serve_policy(args) -> int:
    episode = read_episode(args.episode)
    server = ReplayPolicyServer(
        episode, host=args.host, port=args.port, horizon=args.horizon
    )
    # SIGINT may arrive as soon as the listening line is printed; the emit
    # must already be inside the try so shutdown stays clean.
    try:
        _emit(
            {
                "listening": f"{server.host}:{server.port}",
                "episode": episode.id,
                "horizon": args.horizon,
            }
        )
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def cmd_run_policy(args) -> int:
    host, sep, port = args.endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"endpoint must be host:port, got {args.endpoint!r}")
    endpoint = PolicyEndpoint(host=host, port=int(port))
    rig = _rig(args)
    clock = _clock(args)
    _, robot = build_sim_rig(rig, clock)
    log, latencies = run_policy_loop(
        robot,
        endpoint,
        clock,
        horizon=args.horizon,
        rate_hz=args.rate,
        steps=args.steps,
        on_timeout=args.on_timeout,
        requery=args.requery,
    )
    _emit(
        {
            "commands": len(log.commanded),
            "violations": len(log.violations),
            "queries": len(latencies),
            "latency_ms_max": max(latencies) / 1e6 if latencies else 0.0,
        }
    )
    return 0


def cmd_analyze(args) -> int:
    gt = read_episode(args.gt)
    paths = sorted(glob(args.replays))
    if not paths:
        raise ConfigError(f"no replay directories match {args.replays!r}")
    replays = [read_episode(p) for p in paths]
    stats = compare_replays(gt, replays)
    rows = emit_stats_csv(stats, args.csv_out)
    _emit(
        {
            "csv": str(args.csv_out),
            "rows": rows,
            "replays": len(replays),
            "global_mad": stats.global_mad,
            "max_deviation": stats.max_deviation,
        }
    )
    return 0


def cmd_bench_rate(args) -> int:
    rig = _rig(args)
    modes = args.modes.split(",")
    for mode in modes:
        if mode not in (SERIAL, PARALLEL):
            raise ConfigError(f"mode must be {SERIAL!r} or {PARALLEL!r}, got {mode!r}")
    results = {}
    for mode in modes:
        clock = _clock(args)
        _, robot = build_sim_rig(rig, clock, tap_commands=False)
        cfg = CollectorConfig(
            target_rate_hz=args.rate, mode=mode, duration_s=args.duration
        )
        _, metrics = run_collection(robot, cfg, clock)
        results[mode] = {
            "effective_hz": metrics.effective_rate_hz,
            "overruns": metrics.tick_overruns,
            "frames": metrics.frames_emitted,
        }
    _emit(results)
    return 0


def cmd_daemon(args) -> int:
    rig = _rig(args)
    daemon = daemon_serve(
        rig, args.ws_port, episodes_dir=args.episodes_dir, host=args.host
    )
    # Emit inside the try: clients race a SIGINT against the listening line.
    try:
        _emit(
            {
                "listening": f"ws://{daemon.host}:{daemon.port}",
                "episodes_dir": str(args.episodes_dir),
            }
        )
        if args.duration is not None:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        daemon.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rigkit",
        description="Collect, replay, and analyze robot episodes on a simulated rig.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="record an episode from the rig's devices")
    _add_rig_flags(p)
    p.add_argument("--mode", choices=(SERIAL, PARALLEL), default=PARALLEL,
                   help="scheduling mode (default: parallel)")
    p.add_argument("--rate", type=float, default=30.0,
                   help="target tick rate in Hz (default: 30)")
    p.add_argument("--duration", type=float, default=10.0,
                   help="run length in seconds (default: 10)")
    p.add_argument("--out", required=True, help="directory episodes are written under")
    p.add_argument("--episode-id", default=None,
                   help="episode id (default: random hex)")
    p.add_argument("--task", default="", help="task label stored with the episode (default: empty)")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("replay", help="turn a recorded episode into a playable plan")
    _add_rig_flags(p)
    p.add_argument("--episode", required=True, help="episode directory to replay")
    p.add_argument("--plan-out", required=True, help="file the timed plan is written to")
    p.add_argument("--rate", type=float, default=30.0,
                   help="command rate for the generated plan in Hz (default: 30)")
    p.add_argument("--execute", action="store_true",
                   help="also execute the plan on a fresh sim rig (default: off)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("teleop", help="drive the follower from a scripted leader")
    _add_rig_flags(p)
    p.add_argument("--script", default=None,
                   help="leader script JSON; required until live leader hardware exists")
    p.add_argument("--rate", type=float, default=30.0,
                   help="teleop command rate in Hz (default: 30)")
    p.add_argument("--duration", type=float, default=5.0,
                   help="session length in seconds (default: 5)")
    p.add_argument("--scale", type=float, default=1.0,
                   help="leader-to-follower motion scale (default: 1.0)")
    p.add_argument("--alpha", type=float, default=DEFAULT_FILTER_ALPHA,
                   help=f"command smoothing factor in (0, 1] (default: {DEFAULT_FILTER_ALPHA})")
    p.set_defaults(func=cmd_teleop)

    p = sub.add_parser("serve-policy", help="serve an episode's actions as a policy")
    p.add_argument("--episode", required=True, help="episode directory to serve")
    p.add_argument("--host", default="127.0.0.1", help="bind host (default: 127.0.0.1)")
    p.add_argument("--port", type=int, default=7465,
                   help="bind port, 0 picks a free one (default: 7465)")
    p.add_argument("--horizon", type=int, default=DEFAULT_HORIZON,
                   help=f"actions returned per query (default: {DEFAULT_HORIZON})")
    p.set_defaults(func=cmd_serve_policy)

    p = sub.add_parser("run-policy", help="drive the rig from a policy server")
    _add_rig_flags(p)
    p.add_argument("--endpoint", required=True, help="policy server as host:port")
    p.add_argument("--horizon", type=int, default=DEFAULT_HORIZON,
                   help=f"actions expected per query (default: {DEFAULT_HORIZON})")
    p.add_argument("--rate", type=float, default=DEFAULT_POLICY_RATE_HZ,
                   help=f"command rate in Hz (default: {DEFAULT_POLICY_RATE_HZ})")
    p.add_argument("--steps", type=int, required=True, help="number of actions to execute")
    p.add_argument("--on-timeout", choices=(HOLD, ABORT), default=HOLD,
                   help="behavior when the server misses a deadline (default: hold)")
    p.add_argument("--requery", action="store_true",
                   help="query every tick, executing one action per reply (default: off)")
    p.set_defaults(func=cmd_run_policy)

    p = sub.add_parser("analyze", help="compare replay episodes against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth episode directory")
    p.add_argument("--replays", required=True,
                   help="glob matching replay episode directories")
    p.add_argument("--csv-out", required=True, help="statistics CSV output path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench-rate", help="measure effective tick rate per mode")
    _add_rig_flags(p)
    p.add_argument("--modes", default=f"{SERIAL},{PARALLEL}",
                   help="comma-separated modes to run (default: serial,parallel)")
    p.add_argument("--rate", type=float, default=60.0,
                   help="target tick rate in Hz (default: 60)")
    p.add_argument("--duration", type=float, default=30.0,
                   help="benchmark window in seconds (default: 30)")
    p.set_defaults(func=cmd_bench_rate)

    p = sub.add_parser("daemon", help="serve the operator WebSocket protocol")
    p.add_argument("--rig", default=None,
                   help="rig config JSON (default: built-in reference rig)")
    p.add_argument("--ws-port", type=int, default=8765,
                   help="WebSocket port, 0 picks a free one (default: 8765)")
    p.add_argument("--host", default="127.0.0.1", help="bind host (default: 127.0.0.1)")
    p.add_argument("--episodes-dir", default="episodes",
                   help="directory recordings are written under (default: episodes)")
    p.add_argument("--duration", type=float, default=None,
                   help="serve for this many seconds then exit (default: run until interrupted)")
    p.set_defaults(func=cmd_daemon)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
