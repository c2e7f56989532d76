/**
 * Pure projection from session state to a view model the DOM layer can paint
 * without further decisions.  Joint sliders are in radians; the rate gauge is
 * banded against the configured target; staleness tiles compare per-stream
 * lag to the degraded threshold and show expected-but-absent streams as
 * missing.
 */

import { allowedCommands } from "./gating.js";
import { EpisodeItem, SessionMode } from "./protocol.js";
import { ConsoleSession, RetryPrompt, SurfacedError } from "./session.js";

export interface SliderVM {
  joint: number;
  rad: number;
}

export interface ArmVM {
  label: string;
  selected: boolean;
  sliders: SliderVM[];
}

export type GaugeBand = "target-met" | "degraded" | "unknown";

export interface StalenessTile {
  stream: string;
  ms: number | null;
  level: "ok" | "degraded" | "missing";
}

export interface ViewModel {
  connection: string;
  healthWarning: string | null;
  mode: SessionMode | null;
  recording: boolean;
  clutchEngaged: boolean;
  arms: ArmVM[];
  rateGauge: { hz: number | null; band: GaugeBand };
  staleness: StalenessTile[];
  controls: Record<string, boolean>;
  retryPrompts: RetryPrompt[];
  errors: SurfacedError[];
  rawPanel: string[];
  episodes: EpisodeItem[] | null;
}

export const ALL_COMMANDS = [
  "subscribe",
  "set_mode",
  "jog",
  "clutch",
  "record",
  "play",
  "list_episodes",
  "bench",
];

const JOINTS_PER_ARM = 7;

export function renderState(session: ConsoleSession): ViewModel {
  const snapshot = session.snapshot;
  const effective = session.effectiveSession();
  const controls: Record<string, boolean> = {};
  // every control dies with the connection or before the first snapshot
  const live = session.connection === "open" && snapshot !== null;
  const allowed = live
    ? allowedCommands(snapshot!.session.mode, snapshot!.session.recording)
    : [];
  for (const cmd of ALL_COMMANDS) controls[cmd] = allowed.includes(cmd);

  const arms: ArmVM[] = [];
  if (snapshot) {
    for (let a = 0; a * JOINTS_PER_ARM < snapshot.joints.length; a++) {
      const sliders: SliderVM[] = [];
      for (let j = 0; j < JOINTS_PER_ARM; j++) {
        const rad = snapshot.joints[a * JOINTS_PER_ARM + j];
        if (rad === undefined) break;
        sliders.push({ joint: j, rad });
      }
      arms.push({ label: `arm ${a}`, selected: a === session.settings.selectedArm, sliders });
    }
  }

  return {
    connection: session.connection,
    healthWarning: session.healthWarning,
    mode: effective ? effective.mode : null,
    recording: effective ? effective.recording : false,
    clutchEngaged: effective ? effective.clutchEngaged : false,
    arms,
    rateGauge: gauge(snapshot?.metrics, session.settings.targetRateHz, session.settings.rateToleranceHz),
    staleness: stalenessTiles(
      snapshot?.metrics,
      session.settings.expectedStreams,
      session.settings.stalenessDegradedMs,
    ),
    controls,
    retryPrompts: [...session.retryPrompts],
    errors: [...session.errors],
    rawPanel: [...session.rawPanel],
    episodes: session.episodes ? [...session.episodes] : null,
  };
}

function gauge(
  metrics: Record<string, unknown> | undefined,
  targetHz: number,
  toleranceHz: number,
): { hz: number | null; band: GaugeBand } {
  const hz = typeof metrics?.effective_hz === "number" ? metrics.effective_hz : null;
  if (hz === null || hz <= 0) return { hz, band: "unknown" };
  return { hz, band: hz >= targetHz - toleranceHz ? "target-met" : "degraded" };
}

function stalenessTiles(
  metrics: Record<string, unknown> | undefined,
  expected: string[],
  degradedMs: number,
): StalenessTile[] {
  const raw = metrics?.staleness_ms;
  const table: Record<string, unknown> =
    typeof raw === "object" && raw !== null ? (raw as Record<string, unknown>) : {};
  const streams = [...expected];
  for (const stream of Object.keys(table)) {
    if (!streams.includes(stream)) streams.push(stream);
  }
  return streams.map((stream) => {
    const ms = table[stream];
    if (typeof ms !== "number") return { stream, ms: null, level: "missing" };
    return { stream, ms, level: ms <= degradedMs ? "ok" : "degraded" };
  });
}
