"""Dual-mode robot control: trajectory playback and leader-follower teleop.

Playback executes a validated joint-space plan either on a time grid
(piecewise-linear interpolation commanded at a fixed rate) or checkpoint by
checkpoint (advance when the measured pose is within tolerance).  Teleop maps
leader motion onto a follower arm through a clutched affine law with
single-pole smoothing.  Both modes log every command and every measurement.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field, replace

from .clock import NS_PER_S, Clock, ensure_task
from .collector import RateGrid
from .core import DIMS_PER_ARM, ConfigError, JointVector, RobotConfig, action_dim
from .registry import RobotHandle

TIMED = "timed"
CHECKPOINT = "checkpoint"

CLUTCH_ENGAGED = "engaged"
CLUTCH_RELEASED = "released"

DEFAULT_TOLERANCE_RAD = 0.01
DEFAULT_TIMEOUT_S = 10.0
DEFAULT_FILTER_ALPHA = 0.8


# -- plans --------------------------------------------------------------------


@dataclass(frozen=True)
class Waypoint:
    """One plan knot: a target pose, with a time offset in timed mode."""

    t: float | None
    q: JointVector


@dataclass(frozen=True)
class TrajectoryPlan:
    """An ordered list of waypoints plus the cadence to command them at."""

    mode: str
    waypoints: tuple[Waypoint, ...]
    command_rate_hz: float
    tolerance_rad: float = DEFAULT_TOLERANCE_RAD

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if self.mode not in (TIMED, CHECKPOINT):
            raise ConfigError(f"plan mode must be {TIMED!r} or {CHECKPOINT!r}, got {self.mode!r}")
        if not self.waypoints:
            raise ConfigError("plan needs at least one waypoint")
        if self.command_rate_hz <= 0:
            raise ConfigError(f"command rate must be positive, got {self.command_rate_hz}")
        if self.tolerance_rad <= 0:
            raise ConfigError(f"tolerance must be positive, got {self.tolerance_rad}")
        dim = self.waypoints[0].q.dim
        for i, wp in enumerate(self.waypoints):
            if wp.q.dim != dim:
                raise ConfigError(f"waypoint {i} has dim {wp.q.dim}, expected {dim}")
            if self.mode == TIMED:
                if wp.t is None:
                    raise ConfigError(f"timed waypoint {i} is missing a time")
            elif wp.t is not None:
                raise ConfigError(f"checkpoint waypoint {i} must not carry a time")
        if self.mode == TIMED:
            if self.waypoints[0].t < 0:
                raise ConfigError(f"waypoint times start at {self.waypoints[0].t}, must be >= 0")
            for a, b in zip(self.waypoints, self.waypoints[1:]):
                if b.t <= a.t:
                    raise ConfigError(f"waypoint times must strictly increase ({a.t} -> {b.t})")

    @property
    def dim(self) -> int:
        return self.waypoints[0].q.dim

    @property
    def duration_s(self) -> float:
        return self.waypoints[-1].t if self.mode == TIMED else 0.0


@dataclass(frozen=True)
class PlanViolation:
    """One reason a plan cannot run; kind is "dim", "limit" or "velocity"."""

    kind: str
    waypoint: int
    joint: int
    detail: str


class PlanValidationError(ConfigError):
    """Raised when execution is requested for a plan that fails validation."""

    def __init__(self, violations: list[PlanViolation]):
        super().__init__("; ".join(v.detail for v in violations))
        self.violations = list(violations)


def _plan_limits(plan: TrajectoryPlan, config: RobotConfig, arm_index: int):
    """Limit vectors the plan is judged against, or None on a dim mismatch."""
    if plan.dim == action_dim(config):
        return config.v_max, config.q_min, config.q_max
    if plan.dim == DIMS_PER_ARM and 0 <= arm_index < len(config.arms):
        arm = config.arms[arm_index]
        return arm.v_max, arm.q_min, arm.q_max
    return None


def validate_plan(
    plan: TrajectoryPlan, config: RobotConfig, arm_index: int = 0
) -> list[PlanViolation]:
    """Feasibility flags for a plan; empty means it may run.

    A seven-dim plan is checked against one arm (arm_index), a full-width
    plan against the concatenated limits.  Timed plans additionally get a
    per-segment velocity check.
    """
    limits = _plan_limits(plan, config, arm_index)
    if limits is None:
        return [
            PlanViolation(
                "dim",
                0,
                -1,
                f"plan dim {plan.dim} matches neither one arm ({DIMS_PER_ARM}) "
                f"nor the full robot ({action_dim(config)})",
            )
        ]
    v_max, q_min, q_max = limits
    out = []
    for i, wp in enumerate(plan.waypoints):
        for j, (v, lo, hi) in enumerate(zip(wp.q.values, q_min, q_max)):
            if not (lo <= v <= hi):
                out.append(
                    PlanViolation(
                        "limit", i, j, f"waypoint {i} joint {j}: {v} outside [{lo}, {hi}]"
                    )
                )
    if plan.mode == TIMED:
        for i, (a, b) in enumerate(zip(plan.waypoints, plan.waypoints[1:])):
            dt = b.t - a.t
            for j, (qa, qb, vm) in enumerate(zip(a.q.values, b.q.values, v_max)):
                speed = abs(qb - qa) / dt
                if speed > vm:
                    out.append(
                        PlanViolation(
                            "velocity",
                            i,
                            j,
                            f"segment {i} joint {j}: {speed:.4g} rad/s exceeds {vm}",
                        )
                    )
    return out


def interpolate(plan: TrajectoryPlan, t: float) -> JointVector:
    """Piecewise-linear pose of a timed plan at t seconds from start.

    Holds the first waypoint before its time and the last one forever after.
    """
    if plan.mode != TIMED:
        raise ConfigError("checkpoint plans have no time axis to interpolate on")
    if t < 0:
        raise ConfigError(f"plan time must be >= 0, got {t}")
    times = [wp.t for wp in plan.waypoints]
    if t <= times[0]:
        return plan.waypoints[0].q
    if t >= times[-1]:
        return plan.waypoints[-1].q
    hi = bisect_right(times, t)
    a, b = plan.waypoints[hi - 1], plan.waypoints[hi]
    if t == a.t:
        return a.q
    frac = (t - a.t) / (b.t - a.t)
    return JointVector(qa + (qb - qa) * frac for qa, qb in zip(a.q.values, b.q.values))


def parse_plan(data: dict) -> TrajectoryPlan:
    """Build a plan from its JSON form, naming whichever field is bad."""
    if not isinstance(data, dict):
        raise ConfigError(f"plan must be a JSON object, got {type(data).__name__}")
    for key in ("mode", "command_rate_hz", "waypoints"):
        if key not in data:
            raise ConfigError(f"plan is missing {key!r}")
    waypoints = []
    for i, wp in enumerate(data["waypoints"]):
        if "q" not in wp:
            raise ConfigError(f"waypoint {i} is missing 'q'")
        t = wp.get("t")
        waypoints.append(Waypoint(t=None if t is None else float(t), q=JointVector(wp["q"])))
    return TrajectoryPlan(
        mode=data["mode"],
        waypoints=tuple(waypoints),
        command_rate_hz=float(data["command_rate_hz"]),
        tolerance_rad=float(data.get("tolerance_rad", DEFAULT_TOLERANCE_RAD)),
    )


def load_plan(path) -> TrajectoryPlan:
    with open(path) as f:
        return parse_plan(json.load(f))


def plan_to_json_dict(plan: TrajectoryPlan) -> dict:
    """JSON form accepted back by parse_plan."""
    return {
        "mode": plan.mode,
        "command_rate_hz": plan.command_rate_hz,
        "tolerance_rad": plan.tolerance_rad,
        "waypoints": [
            {"t": wp.t, "q": list(wp.q.values)} for wp in plan.waypoints
        ],
    }


def save_plan(plan: TrajectoryPlan, path) -> None:
    with open(path, "w") as f:
        json.dump(plan_to_json_dict(plan), f, indent=2)
        f.write("\n")


# -- execution log ------------------------------------------------------------


@dataclass
class ExecutionLog:
    """Timestamped command and measurement traces from one execution."""

    commanded: list[tuple[int, JointVector]] = field(default_factory=list)
    measured: list[tuple[int, JointVector]] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    def add_command(self, ts: int, q: JointVector) -> None:
        if self.commanded and ts <= self.commanded[-1][0]:
            raise ConfigError(
                f"command timestamps must strictly increase ({self.commanded[-1][0]} -> {ts})"
            )
        self.commanded.append((ts, q))

    def add_measurement(self, ts: int, q: JointVector) -> None:
        self.measured.append((ts, q))


class PlaybackTimeout(RuntimeError):
    """A checkpoint was not reached in time; carries the partial log."""

    def __init__(self, waypoint_index: int, log: ExecutionLog):
        super().__init__(f"checkpoint {waypoint_index} not reached before timeout")
        self.waypoint_index = waypoint_index
        self.log = log


# -- playback -----------------------------------------------------------------


class ArmGroup:
    """The controllers a plan drives: one arm or every arm, as slices."""

    def __init__(self, robot: RobotHandle, dim: int, arm_index: int):
        if dim == action_dim(robot.config):
            self.devices = [robot.controller(i) for i in range(len(robot.config.arms))]
        else:
            self.devices = [robot.controller(arm_index)]

    def write(self, q: JointVector) -> None:
        for i, dev in enumerate(self.devices):
            dev.write(JointVector(q.values[i * DIMS_PER_ARM : (i + 1) * DIMS_PER_ARM]))

    def read(self) -> tuple[int, JointVector]:
        """Concatenated measured pose, stamped at the first device's capture."""
        samples = [dev.read() for dev in self.devices]
        values = []
        for s in samples:
            values.extend(s.payload.values)
        return samples[0].capture_ts, JointVector(values)


def execute_playback(
    robot: RobotHandle,
    plan: TrajectoryPlan,
    clock: Clock,
    *,
    arm_index: int = 0,
    timeout_s: float = DEFAULT_TIMEOUT_S,
) -> ExecutionLog:
    """Run a plan to completion, returning the command/measurement log.

    Commands land exactly on the command-period grid; the measured state is
    sampled right after each command, so a feasible timed plan tracks within
    one command period of motion at every waypoint time.  Checkpoint plans
    re-command the active waypoint each period until the measured pose is
    within tolerance (max-norm), then advance; a checkpoint that is not
    reached within timeout_s aborts with its index.
    """
    violations = validate_plan(plan, robot.config, arm_index)
    if violations:
        raise PlanValidationError(violations)
    group = ArmGroup(robot, plan.dim, arm_index)
    log = ExecutionLog()
    with ensure_task(clock, "playback"):
        grid = RateGrid(plan.command_rate_hz, clock.now_ns())
        if plan.mode == TIMED:
            _run_timed(plan, group, clock, grid, log)
        else:
            _run_checkpoint(plan, group, clock, grid, log, timeout_s)
    return log


def _run_timed(plan, group, clock, grid, log):
    last_ns = round(plan.waypoints[-1].t * NS_PER_S)
    k = 0
    while True:
        offset = grid.ts(k) - grid.t0_ns
        if offset > last_ns:
            break
        clock.sleep_until_ns(grid.ts(k))
        target = interpolate(plan, offset / NS_PER_S)
        log.add_command(clock.now_ns(), target)
        group.write(target)
        ts, q = group.read()
        log.add_measurement(ts, q)
        k += 1
    # one settling period so the final waypoint is actually reached
    clock.sleep_until_ns(grid.ts(k))
    ts, q = group.read()
    log.add_measurement(ts, q)


def _run_checkpoint(plan, group, clock, grid, log, timeout_s):
    timeout_ns = round(timeout_s * NS_PER_S)
    k = 0
    for w, wp in enumerate(plan.waypoints):
        deadline = clock.now_ns() + timeout_ns
        while True:
            clock.sleep_until_ns(grid.ts(k))
            k += 1
            log.add_command(clock.now_ns(), wp.q)
            group.write(wp.q)
            ts, q = group.read()
            log.add_measurement(ts, q)
            err = max(abs(m - t) for m, t in zip(q.values, wp.q.values))
            if err <= plan.tolerance_rad:
                break
            if clock.now_ns() > deadline:
                raise PlaybackTimeout(w, log)


# -- teleop -------------------------------------------------------------------


@dataclass(frozen=True)
class TeleopMapping:
    """Clutched affine leader-to-follower law with single-pole smoothing."""

    scale: tuple[float, ...]
    leader_ref: JointVector
    follower_ref: JointVector
    filter_alpha: float = DEFAULT_FILTER_ALPHA
    clutch: str = CLUTCH_RELEASED

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        if not 0 < self.filter_alpha <= 1:
            raise ConfigError(f"filter alpha must be in (0, 1], got {self.filter_alpha}")
        if self.clutch not in (CLUTCH_ENGAGED, CLUTCH_RELEASED):
            raise ConfigError(f"clutch must be engaged or released, got {self.clutch!r}")
        dims = {len(self.scale), self.leader_ref.dim, self.follower_ref.dim}
        if len(dims) != 1:
            raise ConfigError(f"mapping dims disagree: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return len(self.scale)


def initial_mapping(
    dim: int, scale: float = 1.0, filter_alpha: float = DEFAULT_FILTER_ALPHA
) -> TeleopMapping:
    """A released mapping with uniform scale and zeroed references."""
    zero = JointVector([0.0] * dim)
    return TeleopMapping(
        scale=(scale,) * dim, leader_ref=zero, follower_ref=zero, filter_alpha=filter_alpha
    )


def engage_clutch(
    mapping: TeleopMapping, leader_q: JointVector, follower_q: JointVector
) -> TeleopMapping:
    """Latch both reference poses and close the clutch."""
    if mapping.clutch == CLUTCH_ENGAGED:
        raise ConfigError("clutch is already engaged")
    if leader_q.dim != mapping.dim or follower_q.dim != mapping.dim:
        raise ConfigError(
            f"reference dims ({leader_q.dim}, {follower_q.dim}) do not match "
            f"mapping dim {mapping.dim}"
        )
    return replace(mapping, leader_ref=leader_q, follower_ref=follower_q, clutch=CLUTCH_ENGAGED)


def release_clutch(mapping: TeleopMapping) -> TeleopMapping:
    """Open the clutch; the follower holds its last command."""
    if mapping.clutch == CLUTCH_RELEASED:
        raise ConfigError("clutch is already released")
    return replace(mapping, clutch=CLUTCH_RELEASED)


def teleop_step(
    mapping: TeleopMapping,
    leader_q: JointVector,
    follower_prev_cmd: JointVector,
    limits,
) -> tuple[JointVector, TeleopMapping]:
    """One tick of the leader-to-follower law.

    Released clutch holds the previous command.  Engaged, the leader's
    excursion from its latched reference is scaled onto the follower's,
    smoothed against the previous command, and clamped to position limits
    (limits is anything with q_min/q_max, an arm spec or a robot config).
    """
    if leader_q.dim != mapping.dim or follower_prev_cmd.dim != mapping.dim:
        raise ConfigError(
            f"step dims ({leader_q.dim}, {follower_prev_cmd.dim}) do not match "
            f"mapping dim {mapping.dim}"
        )
    if mapping.clutch == CLUTCH_RELEASED:
        return follower_prev_cmd, mapping
    raw = [
        s * (lq - lr) + fr
        for s, lq, lr, fr in zip(
            mapping.scale, leader_q.values, mapping.leader_ref.values, mapping.follower_ref.values
        )
    ]
    if mapping.filter_alpha == 1.0:
        # pure passthrough keeps the affine law bit-exact
        blended = raw
    else:
        # incremental form so raw == prev yields prev exactly (zero-jump)
        blended = [
            p + mapping.filter_alpha * (r - p) for r, p in zip(raw, follower_prev_cmd.values)
        ]
    out = JointVector(
        min(max(v, lo), hi) for v, lo, hi in zip(blended, limits.q_min, limits.q_max)
    )
    return out, mapping


def run_teleop(
    robot: RobotHandle,
    leader_fn,
    mapping: TeleopMapping,
    clock: Clock,
    *,
    rate_hz: float,
    duration_s: float,
    arm_index: int = 0,
) -> tuple[ExecutionLog, TeleopMapping]:
    """Drive one follower arm from a leader pose source for a fixed window.

    leader_fn maps seconds-from-start to the leader's pose.  A released
    mapping is engaged on the first tick at the follower's current pose, so
    the session starts jump-free.  Returns the log and the final mapping.
    """
    arm = robot.config.arms[arm_index]
    device = robot.controller(arm_index)
    duration_ns = round(duration_s * NS_PER_S)
    log = ExecutionLog()
    with ensure_task(clock, "teleop"):
        grid = RateGrid(rate_hz, clock.now_ns())
        first = device.read()
        prev_cmd = first.payload
        if mapping.clutch == CLUTCH_RELEASED:
            mapping = engage_clutch(mapping, leader_fn(0.0), first.payload)
        k = 0
        while True:
            offset = grid.ts(k) - grid.t0_ns
            if offset >= duration_ns:
                break
            clock.sleep_until_ns(grid.ts(k))
            leader_q = leader_fn(offset / NS_PER_S)
            sample = device.read()
            log.add_measurement(sample.capture_ts, sample.payload)
            cmd, mapping = teleop_step(mapping, leader_q, prev_cmd, arm)
            log.add_command(clock.now_ns(), cmd)
            device.write(cmd)
            prev_cmd = cmd
            k += 1
    return log, mapping
