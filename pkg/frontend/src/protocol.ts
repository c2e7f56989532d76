/**
 * Wire types for the daemon's JSON-over-WebSocket protocol.
 *
 * The daemon sends four message kinds; anything else (or anything that fails
 * the shape checks) is classified rather than thrown so a bad frame can never
 * take the console down.
 */

export type SessionMode = "idle" | "teleop" | "playback" | "policy";

export const SESSION_MODES: SessionMode[] = ["idle", "teleop", "playback", "policy"];

export interface SessionInfo {
  mode: SessionMode;
  recording: boolean;
  allowed: string[];
  clutch_engaged: boolean;
}

export interface StateSnapshot {
  type: "state";
  session: SessionInfo;
  joints: number[];
  metrics: Record<string, unknown>;
}

export interface AckMessage {
  type: "ack";
  cmd: string;
  id?: string;
  [extra: string]: unknown;
}

export interface ErrorMessage {
  type: "error";
  code: string;
  message: string;
  id?: string;
}

export interface EpisodeItem {
  id: string;
  task: string;
  frames: number;
}

export interface EpisodesMessage {
  type: "episodes";
  items: EpisodeItem[];
  id?: string;
}

export type ServerMessage = StateSnapshot | AckMessage | ErrorMessage | EpisodesMessage;

export type ParsedMessage =
  | { kind: "state"; msg: StateSnapshot }
  | { kind: "ack"; msg: AckMessage }
  | { kind: "error"; msg: ErrorMessage }
  | { kind: "episodes"; msg: EpisodesMessage }
  | { kind: "unknown"; raw: string }
  | { kind: "malformed"; raw: string; reason: string };

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function isNumberArray(value: unknown): value is number[] {
  return Array.isArray(value) && value.every((v) => typeof v === "number" && Number.isFinite(v));
}

function isStringArray(value: unknown): value is string[] {
  return Array.isArray(value) && value.every((v) => typeof v === "string");
}

function isSessionInfo(value: unknown): value is SessionInfo {
  return (
    isRecord(value) &&
    typeof value.mode === "string" &&
    (SESSION_MODES as string[]).includes(value.mode) &&
    typeof value.recording === "boolean" &&
    isStringArray(value.allowed) &&
    typeof value.clutch_engaged === "boolean"
  );
}

function isSnapshot(value: Record<string, unknown>): value is StateSnapshot & Record<string, unknown> {
  return isSessionInfo(value.session) && isNumberArray(value.joints) && isRecord(value.metrics);
}

function isEpisodeItem(value: unknown): value is EpisodeItem {
  return (
    isRecord(value) &&
    typeof value.id === "string" &&
    typeof value.task === "string" &&
    typeof value.frames === "number"
  );
}

/** Classify one incoming frame; never throws. */
export function parseServerMessage(raw: string): ParsedMessage {
  let value: unknown;
  try {
    value = JSON.parse(raw);
  } catch {
    return { kind: "malformed", raw, reason: "not valid JSON" };
  }
  if (!isRecord(value) || typeof value.type !== "string") {
    return { kind: "malformed", raw, reason: "missing type field" };
  }
  switch (value.type) {
    case "state":
      if (isSnapshot(value)) return { kind: "state", msg: value };
      return { kind: "malformed", raw, reason: "bad state snapshot shape" };
    case "ack":
      if (typeof value.cmd === "string") return { kind: "ack", msg: value as AckMessage };
      return { kind: "malformed", raw, reason: "ack without cmd" };
    case "error":
      if (typeof value.code === "string" && typeof value.message === "string") {
        return { kind: "error", msg: value as unknown as ErrorMessage };
      }
      return { kind: "malformed", raw, reason: "error without code/message" };
    case "episodes":
      if (Array.isArray(value.items) && value.items.every(isEpisodeItem)) {
        return { kind: "episodes", msg: value as unknown as EpisodesMessage };
      }
      return { kind: "malformed", raw, reason: "bad episodes list" };
    default:
      return { kind: "unknown", raw };
  }
}

/** Commands the console can issue, mirroring the daemon's command set. */
export type ClientCommand =
  | { cmd: "subscribe" }
  | { cmd: "set_mode"; mode: SessionMode }
  | { cmd: "jog"; joint: number; delta_rad: number }
  | { cmd: "clutch"; engaged: boolean }
  | { cmd: "record"; action: "start" | "stop"; task?: string }
  | { cmd: "play"; plan_path: string }
  | { cmd: "list_episodes" }
  | { cmd: "bench"; mode: "serial" | "parallel" };

export function encodeCommand(command: ClientCommand, id: string): string {
  return JSON.stringify({ ...command, id });
}
