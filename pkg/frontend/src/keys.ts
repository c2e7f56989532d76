/**
 * Keyboard teleoperation: one key row jogs each joint up, the row below jogs
 * it down, brackets switch arms, and holding space engages the clutch.  The
 * bindings exist so a keyboard can stand in for a leader arm.
 */

import { ConsoleSession } from "./session.js";

export const JOG_UP_KEYS = ["q", "w", "e", "r", "t", "y", "u"];
export const JOG_DOWN_KEYS = ["a", "s", "d", "f", "g", "h", "j"];

export interface KeyInput {
  key: string;
  type: "keydown" | "keyup";
  repeat?: boolean;
}

/** Apply one key event to the session; returns true when it was consumed. */
export function handleKey(session: ConsoleSession, input: KeyInput): boolean {
  const key = input.key.toLowerCase();
  if (key === " " || key === "space" || key === "spacebar") {
    if (input.type === "keydown") {
      if (input.repeat) return true; // hold: already engaged
      session.clutch(true);
    } else {
      session.clutch(false);
    }
    return true;
  }
  if (input.type !== "keydown") return false;
  if (key === "[") {
    session.selectArm(session.settings.selectedArm - 1);
    return true;
  }
  if (key === "]") {
    session.selectArm(session.settings.selectedArm + 1);
    return true;
  }
  const up = JOG_UP_KEYS.indexOf(key);
  if (up >= 0) {
    session.jog(up, 1);
    return true;
  }
  const down = JOG_DOWN_KEYS.indexOf(key);
  if (down >= 0) {
    session.jog(down, -1);
    return true;
  }
  return false;
}

export function attachKeyboard(session: ConsoleSession, target: EventTarget): () => void {
  const onKeyDown = (event: Event) => {
    const e = event as KeyboardEvent;
    if (handleKey(session, { key: e.key, type: "keydown", repeat: e.repeat })) {
      e.preventDefault();
    }
  };
  const onKeyUp = (event: Event) => {
    const e = event as KeyboardEvent;
    if (handleKey(session, { key: e.key, type: "keyup" })) e.preventDefault();
  };
  target.addEventListener("keydown", onKeyDown);
  target.addEventListener("keyup", onKeyUp);
  return () => {
    target.removeEventListener("keydown", onKeyDown);
    target.removeEventListener("keyup", onKeyUp);
  };
}
