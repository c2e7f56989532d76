/**
 * Client-side mirror of the daemon's session state machine.
 *
 * The console must never send a command the daemon would reject for the
 * current state, so the enabling rules here reproduce the daemon's exactly:
 * subscribe and list_episodes always work, mode changes are locked out while
 * recording, recording needs a non-idle mode, jog/clutch need teleop, play
 * needs playback, and benchmarks only run from idle.
 */

import { SessionMode } from "./protocol.js";

export function allowedCommands(mode: SessionMode, recording: boolean): string[] {
  const out = ["subscribe", "list_episodes"];
  if (!recording) out.push("set_mode");
  if (mode !== "idle") out.push("record");
  if (mode === "teleop") out.push("jog", "clutch");
  if (mode === "playback") out.push("play");
  if (mode === "idle") out.push("bench");
  return out.sort();
}

export function isAllowed(cmd: string, mode: SessionMode, recording: boolean): boolean {
  return allowedCommands(mode, recording).includes(cmd);
}

/** Every (mode, recording) pair the daemon can actually reach. */
export function reachableStates(): { mode: SessionMode; recording: boolean }[] {
  const states: { mode: SessionMode; recording: boolean }[] = [
    { mode: "idle", recording: false },
  ];
  for (const mode of ["teleop", "playback", "policy"] as SessionMode[]) {
    states.push({ mode, recording: false });
    states.push({ mode, recording: true });
  }
  return states;
}
