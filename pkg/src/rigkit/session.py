"""Session state machine gating operator commands.

A session is in exactly one mode at a time and may be recording only while a
non-idle mode is active.  The machine is pure: applying a command either
returns the next state or raises a structured error leaving the input state
untouched.  The daemon and the console both gate their command surfaces on
``allowed_commands`` so an operator can never be offered an invalid action.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

MODE_IDLE = "idle"
MODE_TELEOP = "teleop"
MODE_PLAYBACK = "playback"
MODE_POLICY = "policy"
MODES = (MODE_IDLE, MODE_TELEOP, MODE_PLAYBACK, MODE_POLICY)

CMD_SUBSCRIBE = "subscribe"
CMD_SET_MODE = "set_mode"
CMD_JOG = "jog"
CMD_CLUTCH = "clutch"
CMD_RECORD = "record"
CMD_PLAY = "play"
CMD_LIST_EPISODES = "list_episodes"
CMD_BENCH = "bench"
COMMANDS = (
    CMD_SUBSCRIBE,
    CMD_SET_MODE,
    CMD_JOG,
    CMD_CLUTCH,
    CMD_RECORD,
    CMD_PLAY,
    CMD_LIST_EPISODES,
    CMD_BENCH,
)

ERR_BAD_COMMAND = "bad-command"
ERR_INVALID_TRANSITION = "invalid-transition"


class TransitionError(RuntimeError):
    """Command refused; carries a machine-readable code for error replies."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


@dataclass(frozen=True)
class SessionState:
    mode: str = MODE_IDLE
    recording: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise TransitionError(ERR_BAD_COMMAND, f"unknown mode {self.mode!r}")
        if self.recording and self.mode == MODE_IDLE:
            raise TransitionError(
                ERR_INVALID_TRANSITION, "cannot be recording while idle"
            )

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "recording": self.recording,
            "allowed": list(allowed_commands(self)),
        }


def allowed_commands(state: SessionState) -> tuple[str, ...]:
    """Commands with at least one valid argument in this state."""
    allowed = [CMD_SUBSCRIBE, CMD_LIST_EPISODES]
    if not state.recording:
        allowed.append(CMD_SET_MODE)
    if state.mode != MODE_IDLE:
        allowed.append(CMD_RECORD)
    if state.mode == MODE_TELEOP:
        allowed.extend((CMD_JOG, CMD_CLUTCH))
    if state.mode == MODE_PLAYBACK:
        allowed.append(CMD_PLAY)
    if state.mode == MODE_IDLE:
        allowed.append(CMD_BENCH)
    return tuple(sorted(allowed))


def apply_command(state: SessionState, name: str, arg: str | None = None) -> SessionState:
    """Next state after a command, or TransitionError leaving state as-is.

    arg carries the target mode for set_mode and "start"/"stop" for record;
    other commands ignore it.  Commands that do not change session state
    (jog, play, ...) still validate against the current mode.
    """
    if name not in COMMANDS:
        raise TransitionError(ERR_BAD_COMMAND, f"unknown command {name!r}")
    if name in (CMD_SUBSCRIBE, CMD_LIST_EPISODES):
        return state
    if name == CMD_SET_MODE:
        if arg not in MODES:
            raise TransitionError(ERR_BAD_COMMAND, f"unknown mode {arg!r}")
        if state.recording:
            raise TransitionError(
                ERR_INVALID_TRANSITION,
                "cannot change mode while recording; stop recording first",
            )
        return replace(state, mode=arg)
    if name == CMD_RECORD:
        if arg not in ("start", "stop"):
            raise TransitionError(
                ERR_BAD_COMMAND, f"record action must be start or stop, got {arg!r}"
            )
        if arg == "start":
            if state.mode == MODE_IDLE:
                raise TransitionError(
                    ERR_INVALID_TRANSITION, "cannot start recording while idle"
                )
            if state.recording:
                raise TransitionError(
                    ERR_INVALID_TRANSITION, "already recording"
                )
            return replace(state, recording=True)
        if not state.recording:
            raise TransitionError(ERR_INVALID_TRANSITION, "not recording")
        return replace(state, recording=False)
    if name in (CMD_JOG, CMD_CLUTCH):
        if state.mode != MODE_TELEOP:
            raise TransitionError(
                ERR_INVALID_TRANSITION, f"{name} requires teleop mode, not {state.mode}"
            )
        return state
    if name == CMD_PLAY:
        if state.mode != MODE_PLAYBACK:
            raise TransitionError(
                ERR_INVALID_TRANSITION, f"play requires playback mode, not {state.mode}"
            )
        return state
    if state.mode != MODE_IDLE:
        raise TransitionError(
            ERR_INVALID_TRANSITION, f"bench requires idle mode, not {state.mode}"
        )
    return state
