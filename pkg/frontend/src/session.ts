/**
 * Connection and command state for one operator console.
 *
 * Single event loop, one socket.  Every outgoing command carries a fresh id;
 * replies are matched back by id.  Mode/clutch/recording changes are applied
 * optimistically as overlays keyed by command id: an error reply rolls the
 * overlay back, an ack keeps it until the next authoritative snapshot, and a
 * timeout turns into a retry prompt (never a silent resend).
 */

import { isAllowed } from "./gating.js";
import {
  ClientCommand,
  EpisodeItem,
  ParsedMessage,
  SessionMode,
  StateSnapshot,
  encodeCommand,
  parseServerMessage,
} from "./protocol.js";
import { ConsoleSocket, SocketFactory } from "./socket.js";

export type ConnectionState = "idle" | "connecting" | "open" | "closed";

export interface SurfacedError {
  code: string;
  message: string;
  id?: string;
}

export interface RetryPrompt {
  id: string;
  command: ClientCommand;
}

export type SendResult = { ok: true; id: string } | { ok: false; reason: string };

export interface SessionSettings {
  jogStepRad: number;
  selectedArm: number;
  commandTimeoutMs: number;
  targetRateHz: number;
  rateToleranceHz: number;
  stalenessDegradedMs: number;
  expectedStreams: string[];
}

export const DEFAULT_SETTINGS: SessionSettings = {
  jogStepRad: 0.05,
  selectedArm: 0,
  commandTimeoutMs: 2000,
  targetRateHz: 30.0,
  rateToleranceHz: 0.5,
  stalenessDegradedMs: 100,
  expectedStreams: [],
};

export interface Timers {
  set(fn: () => void, ms: number): unknown;
  clear(handle: unknown): void;
}

const realTimers: Timers = {
  set: (fn, ms) => setTimeout(fn, ms),
  clear: (handle) => clearTimeout(handle as Parameters<typeof clearTimeout>[0]),
};

interface Overlay {
  mode?: SessionMode;
  recording?: boolean;
  clutch?: boolean;
  acked: boolean;
}

interface Pending {
  command: ClientCommand;
  timer: unknown;
}

const JOINTS_PER_ARM = 7;
const RAW_PANEL_LIMIT = 20;
const ERROR_LIMIT = 50;

export class ConsoleSession {
  readonly settings: SessionSettings;
  connection: ConnectionState = "idle";
  snapshot: StateSnapshot | null = null;
  healthWarning: string | null = null;
  episodes: EpisodeItem[] | null = null;
  errors: SurfacedError[] = [];
  rawPanel: string[] = [];
  retryPrompts: RetryPrompt[] = [];
  snapshotCount = 0;

  private socket: ConsoleSocket | null = null;
  private readonly factory: SocketFactory;
  private readonly url: string;
  private readonly timers: Timers;
  private readonly pending = new Map<string, Pending>();
  private readonly overlays = new Map<string, Overlay>();
  private readonly listeners: (() => void)[] = [];
  private nextId = 1;

  constructor(
    factory: SocketFactory,
    url: string,
    settings: Partial<SessionSettings> = {},
    timers: Timers = realTimers,
  ) {
    this.factory = factory;
    this.url = url;
    this.settings = { ...DEFAULT_SETTINGS, ...settings };
    this.timers = timers;
  }

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  connect(): void {
    if (this.socket) return;
    this.connection = "connecting";
    const socket = this.factory(this.url);
    this.socket = socket;
    socket.onOpen(() => {
      this.connection = "open";
      socket.send(encodeCommand({ cmd: "subscribe" }, this.freshId()));
      this.notify();
    });
    socket.onMessage((text) => this.handleMessage(text));
    socket.onClose(() => {
      this.connection = "closed";
      for (const [, entry] of this.pending) this.timers.clear(entry.timer);
      this.pending.clear();
      this.overlays.clear();
      this.notify();
    });
    this.notify();
  }

  close(): void {
    this.socket?.close();
  }

  /** Session fields with optimistic overlays folded in, for display. */
  effectiveSession(): { mode: SessionMode; recording: boolean; clutchEngaged: boolean } | null {
    if (!this.snapshot) return null;
    let mode = this.snapshot.session.mode;
    let recording = this.snapshot.session.recording;
    let clutchEngaged = this.snapshot.session.clutch_engaged;
    for (const [, overlay] of this.overlays) {
      if (overlay.mode !== undefined) mode = overlay.mode;
      if (overlay.recording !== undefined) recording = overlay.recording;
      if (overlay.clutch !== undefined) clutchEngaged = overlay.clutch;
    }
    return { mode, recording, clutchEngaged };
  }

  /**
   * Gate and send one command.  Refuses locally (without touching the wire)
   * whenever the daemon's state machine would reject the command for the
   * state in the last snapshot.
   */
  send(command: ClientCommand): SendResult {
    if (this.connection !== "open" || !this.socket) {
      return { ok: false, reason: "not connected" };
    }
    if (this.snapshot) {
      const { mode, recording } = this.snapshot.session;
      if (!isAllowed(command.cmd, mode, recording)) {
        return { ok: false, reason: `${command.cmd} is not allowed in ${mode}` };
      }
    }
    const id = this.freshId();
    const overlay = optimisticOverlay(command);
    if (overlay) this.overlays.set(id, overlay);
    const timer = this.timers.set(() => this.expire(id), this.settings.commandTimeoutMs);
    this.pending.set(id, { command, timer });
    this.socket.send(encodeCommand(command, id));
    this.notify();
    return { ok: true, id };
  }

  /** Resend a timed-out command under a fresh id, on explicit user request. */
  retry(promptId: string): SendResult {
    const index = this.retryPrompts.findIndex((p) => p.id === promptId);
    if (index < 0) return { ok: false, reason: "unknown retry prompt" };
    const [prompt] = this.retryPrompts.splice(index, 1);
    return this.send(prompt!.command);
  }

  dismissRetry(promptId: string): void {
    const index = this.retryPrompts.findIndex((p) => p.id === promptId);
    if (index >= 0) this.retryPrompts.splice(index, 1);
    this.notify();
  }

  pendingCount(): number {
    return this.pending.size;
  }

  // -- convenience commands --------------------------------------------------

  armCount(): number {
    if (!this.snapshot) return 0;
    return Math.floor(this.snapshot.joints.length / JOINTS_PER_ARM);
  }

  jog(jointInArm: number, direction: 1 | -1): SendResult {
    const joint = this.settings.selectedArm * JOINTS_PER_ARM + jointInArm;
    return this.send({ cmd: "jog", joint, delta_rad: direction * this.settings.jogStepRad });
  }

  setMode(mode: SessionMode): SendResult {
    return this.send({ cmd: "set_mode", mode });
  }

  clutch(engaged: boolean): SendResult {
    return this.send({ cmd: "clutch", engaged });
  }

  recordStart(task: string): SendResult {
    return this.send({ cmd: "record", action: "start", task });
  }

  recordStop(): SendResult {
    return this.send({ cmd: "record", action: "stop" });
  }

  listEpisodes(): SendResult {
    return this.send({ cmd: "list_episodes" });
  }

  selectArm(arm: number): void {
    const count = Math.max(this.armCount(), 1);
    this.settings.selectedArm = Math.min(Math.max(arm, 0), count - 1);
    this.notify();
  }

  // -- incoming messages -----------------------------------------------------

  handleMessage(text: string): void {
    const parsed = parseServerMessage(text);
    const handler = this.handlers[parsed.kind];
    handler(parsed);
    this.notify();
  }

  /** One renderer per message kind; unknown kinds fall through to the raw panel. */
  private readonly handlers: Record<ParsedMessage["kind"], (p: ParsedMessage) => void> = {
    state: (p) => {
      if (p.kind !== "state") return;
      this.snapshot = p.msg;
      this.snapshotCount += 1;
      this.healthWarning = null;
      for (const [id, overlay] of this.overlays) {
        if (overlay.acked) this.overlays.delete(id);
      }
    },
    ack: (p) => {
      if (p.kind !== "ack") return;
      const id = p.msg.id;
      if (id !== undefined) {
        this.settle(id);
        const overlay = this.overlays.get(id);
        if (overlay) overlay.acked = true;
      }
    },
    error: (p) => {
      if (p.kind !== "error") return;
      const { code, message, id } = p.msg;
      if (id !== undefined) {
        this.settle(id);
        this.overlays.delete(id); // roll back the optimistic change
      }
      this.errors.push({ code, message, id });
      if (this.errors.length > ERROR_LIMIT) this.errors.shift();
    },
    episodes: (p) => {
      if (p.kind !== "episodes") return;
      this.episodes = p.msg.items;
      if (p.msg.id !== undefined) this.settle(p.msg.id);
    },
    unknown: (p) => {
      if (p.kind !== "unknown") return;
      this.rawPanel.push(p.raw);
      if (this.rawPanel.length > RAW_PANEL_LIMIT) this.rawPanel.shift();
    },
    malformed: (p) => {
      if (p.kind !== "malformed") return;
      this.healthWarning = p.reason; // last good snapshot stays on screen
    },
  };

  // -- internals -------------------------------------------------------------

  private freshId(): string {
    return `c${this.nextId++}`;
  }

  private settle(id: string): void {
    const entry = this.pending.get(id);
    if (!entry) return;
    this.timers.clear(entry.timer);
    this.pending.delete(id);
  }

  private expire(id: string): void {
    const entry = this.pending.get(id);
    if (!entry) return;
    this.pending.delete(id);
    this.overlays.delete(id); // unconfirmed: roll back rather than guess
    this.retryPrompts.push({ id, command: entry.command });
    this.notify();
  }
}

function optimisticOverlay(command: ClientCommand): Overlay | null {
  switch (command.cmd) {
    case "set_mode":
      return { mode: command.mode, acked: false };
    case "clutch":
      return { clutch: command.engaged, acked: false };
    case "record":
      return { recording: command.action === "start", acked: false };
    default:
      return null;
  }
}
