import { describe, expect, it } from "vitest";

import { allowedCommands } from "../src/gating.js";
import { ALL_COMMANDS, renderState } from "../src/render.js";
import { ConsoleSession, SessionSettings } from "../src/session.js";
import { FakeSocket, ManualTimers, snapshotMessage } from "./fakes.js";

function liveSession(
  settings: Partial<SessionSettings> = {},
): { session: ConsoleSession; socket: FakeSocket } {
  const socket = new FakeSocket();
  const timers = new ManualTimers();
  const session = new ConsoleSession(() => socket, "ws://test", settings, timers);
  session.connect();
  socket.open();
  return { session, socket };
}

describe("control gating in the view", () => {
  it("disables every control until the first snapshot lands", () => {
    const { session } = liveSession();
    const view = renderState(session);
    for (const cmd of ALL_COMMANDS) {
      expect(view.controls[cmd]).toBe(false);
    }
  });

  it("disables every control when the connection drops", () => {
    const { session, socket } = liveSession();
    socket.receive(snapshotMessage({ mode: "teleop", allowed: ["jog", "subscribe"] }));
    socket.dropConnection();
    const view = renderState(session);
    for (const cmd of ALL_COMMANDS) {
      expect(view.controls[cmd]).toBe(false);
    }
  });

  it("matches the session gating table for the snapshot state", () => {
    const { session, socket } = liveSession();
    socket.receive(snapshotMessage({ mode: "playback", recording: true }));
    const view = renderState(session);
    const allowed = allowedCommands("playback", true);
    for (const cmd of ALL_COMMANDS) {
      expect(view.controls[cmd]).toBe(allowed.includes(cmd));
    }
  });
});

describe("rate gauge", () => {
  it("reads unknown before any benchmark or recording has run", () => {
    const { session, socket } = liveSession();
    socket.receive(snapshotMessage()); // effective_hz 0.0
    expect(renderState(session).rateGauge.band).toBe("unknown");
  });

  it("accepts a rate just inside the tolerance band", () => {
    const { session, socket } = liveSession({ targetRateHz: 60.0, rateToleranceHz: 0.5 });
    socket.receive(snapshotMessage({ metrics: { effective_hz: 59.95, overruns: 3 } }));
    const gauge = renderState(session).rateGauge;
    expect(gauge.hz).toBeCloseTo(59.95);
    expect(gauge.band).toBe("target-met");
  });

  it("flags a rate below the tolerance band as degraded", () => {
    const { session, socket } = liveSession({ targetRateHz: 60.0, rateToleranceHz: 0.5 });
    socket.receive(snapshotMessage({ metrics: { effective_hz: 58.2, overruns: 40 } }));
    expect(renderState(session).rateGauge.band).toBe("degraded");
  });
});

describe("staleness tiles", () => {
  it("shows per-stream freshness and calls out missing streams", () => {
    const { session, socket } = liveSession({
      expectedStreams: ["left_bus", "cam_global"],
      stalenessDegradedMs: 100,
    });
    socket.receive(
      snapshotMessage({
        metrics: {
          effective_hz: 30.0,
          overruns: 0,
          staleness_ms: { left_bus: 4.2, right_bus: 180.0 },
        },
      }),
    );
    const tiles = renderState(session).staleness;
    const byStream = new Map(tiles.map((t) => [t.stream, t]));
    expect(byStream.get("left_bus")).toMatchObject({ ms: 4.2, level: "ok" });
    expect(byStream.get("right_bus")).toMatchObject({ ms: 180.0, level: "degraded" });
    expect(byStream.get("cam_global")).toMatchObject({ ms: null, level: "missing" });
  });
});

describe("degraded input handling", () => {
  it("keeps showing the last good state under a health warning", () => {
    const { session, socket } = liveSession();
    socket.receive(snapshotMessage({ mode: "teleop", joints: Array(14).fill(0.5) }));
    socket.receive("not json at all");
    const view = renderState(session);
    expect(view.healthWarning).not.toBeNull();
    expect(view.mode).toBe("teleop");
    expect(view.arms[0]!.sliders[0]!.rad).toBeCloseTo(0.5);
  });

  it("routes unrecognized payloads to the raw panel", () => {
    const { session, socket } = liveSession();
    socket.receive(snapshotMessage());
    socket.receive({ type: "firmware-event", detail: "x" });
    const view = renderState(session);
    expect(view.rawPanel).toHaveLength(1);
    expect(view.healthWarning).toBeNull(); // unknown kind is not malformed
  });
});

describe("arm layout", () => {
  it("splits the joint vector into seven-joint arms and marks the selection", () => {
    const { session, socket } = liveSession();
    const joints = Array.from({ length: 14 }, (_, i) => i / 10);
    socket.receive(snapshotMessage({ joints }));
    session.selectArm(1);
    const view = renderState(session);
    expect(view.arms).toHaveLength(2);
    expect(view.arms[0]!.selected).toBe(false);
    expect(view.arms[1]!.selected).toBe(true);
    expect(view.arms[1]!.sliders[6]!.rad).toBeCloseTo(1.3);
  });
});
