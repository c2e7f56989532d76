/**
 * Browser entry point: builds the console DOM, connects to the daemon, and
 * repaints from the view model on every session change plus an animation
 * loop that eases the sliders between snapshots.
 *
 * Serve dist/ from any static server and open with ?ws=host:port (defaults
 * to the page host on port 8765).
 */

import { SliderTween } from "./interpolate.js";
import { attachKeyboard } from "./keys.js";
import { renderState, ViewModel } from "./render.js";
import { ConsoleSession } from "./session.js";
import { browserSocketFactory } from "./socket.js";

function daemonUrl(): string {
  const params = new URLSearchParams(window.location.search);
  const target = params.get("ws") ?? `${window.location.hostname || "127.0.0.1"}:8765`;
  return `ws://${target}`;
}

function el(tag: string, className: string, text = ""): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  if (text) node.textContent = text;
  return node;
}

function buildShell(root: HTMLElement) {
  const header = el("header", "console-header");
  const status = el("span", "connection");
  const warning = el("span", "health-warning");
  const modeLabel = el("span", "mode");
  header.append(status, modeLabel, warning);

  const arms = el("section", "arms");
  const gauges = el("section", "gauges");
  const controls = el("section", "controls");
  const messages = el("section", "messages");
  const episodes = el("section", "episodes");
  root.append(header, arms, gauges, controls, messages, episodes);
  return { status, warning, modeLabel, arms, gauges, controls, messages, episodes };
}

/** Sliders only; cheap enough to run every animation frame. */
function paintArms(shell: ReturnType<typeof buildShell>, vm: ViewModel, eased: number[]): void {
  shell.arms.replaceChildren();
  let flat = 0;
  for (const arm of vm.arms) {
    const box = el("div", arm.selected ? "arm selected" : "arm", arm.label);
    for (const slider of arm.sliders) {
      const value = eased[flat] ?? slider.rad;
      flat += 1;
      const row = el("div", "slider");
      row.textContent = `j${slider.joint} ${value.toFixed(3)} rad`;
      const bar = el("div", "slider-bar");
      bar.style.width = `${Math.min(Math.abs(value) * 30, 100)}%`;
      row.appendChild(bar);
      box.appendChild(row);
    }
    shell.arms.appendChild(box);
  }
}

/** Full repaint on session changes; buttons are rebuilt here, not per frame. */
function paint(
  shell: ReturnType<typeof buildShell>,
  vm: ViewModel,
  eased: number[],
  session: ConsoleSession,
): void {
  shell.status.textContent = vm.connection;
  shell.warning.textContent = vm.healthWarning ?? "";
  shell.modeLabel.textContent = vm.mode
    ? `${vm.mode}${vm.recording ? " (recording)" : ""}${vm.clutchEngaged ? " [clutch]" : ""}`
    : "no state yet";

  paintArms(shell, vm, eased);

  shell.gauges.replaceChildren();
  const rate = el("div", `gauge rate ${vm.rateGauge.band}`);
  rate.textContent = vm.rateGauge.hz === null ? "rate: --" : `rate: ${vm.rateGauge.hz.toFixed(2)} Hz`;
  shell.gauges.appendChild(rate);
  for (const tile of vm.staleness) {
    const node = el("div", `gauge staleness ${tile.level}`);
    node.textContent = tile.ms === null ? `${tile.stream}: missing` : `${tile.stream}: ${tile.ms.toFixed(1)} ms`;
    shell.gauges.appendChild(node);
  }

  shell.controls.replaceChildren();
  const addButton = (label: string, enabled: boolean, onClick: () => void) => {
    const button = shell.controls.appendChild(document.createElement("button"));
    button.textContent = label;
    button.disabled = !enabled;
    button.addEventListener("click", onClick);
  };
  for (const mode of ["idle", "teleop", "playback", "policy"] as const) {
    addButton(`mode: ${mode}`, vm.controls.set_mode ?? false, () => session.setMode(mode));
  }
  addButton(
    vm.clutchEngaged ? "clutch release" : "clutch engage",
    vm.controls.clutch ?? false,
    () => session.clutch(!vm.clutchEngaged),
  );
  addButton(
    vm.recording ? "record stop" : "record start",
    vm.controls.record ?? false,
    () => (vm.recording ? session.recordStop() : session.recordStart("console")),
  );
  addButton("list episodes", vm.controls.list_episodes ?? false, () => session.listEpisodes());
  addButton("bench", vm.controls.bench ?? false, () =>
    session.send({ cmd: "bench", mode: "parallel" }),
  );
  addButton("play plan...", vm.controls.play ?? false, () => {
    const path = window.prompt("plan file path on the daemon host");
    if (path) session.send({ cmd: "play", plan_path: path });
  });

  shell.messages.replaceChildren();
  for (const err of vm.errors.slice(-5)) {
    shell.messages.appendChild(el("div", "error", `${err.code}: ${err.message}`));
  }
  for (const prompt of vm.retryPrompts) {
    const row = el("div", "retry", `timed out: ${prompt.command.cmd} `);
    const retry = row.appendChild(document.createElement("button"));
    retry.textContent = "retry";
    retry.addEventListener("click", () => session.retry(prompt.id));
    const dismiss = row.appendChild(document.createElement("button"));
    dismiss.textContent = "dismiss";
    dismiss.addEventListener("click", () => session.dismissRetry(prompt.id));
    shell.messages.appendChild(row);
  }
  for (const raw of vm.rawPanel.slice(-3)) {
    shell.messages.appendChild(el("pre", "raw", raw));
  }

  shell.episodes.replaceChildren();
  for (const ep of vm.episodes ?? []) {
    shell.episodes.appendChild(el("div", "episode", `${ep.id} ${ep.task} (${ep.frames} frames)`));
  }
}

export function start(root: HTMLElement): ConsoleSession {
  const session = new ConsoleSession(browserSocketFactory, daemonUrl(), {
    expectedStreams: ["left_bus", "right_bus", "cam_global"],
  });
  const shell = buildShell(root);
  const tween = new SliderTween();
  let vm = renderState(session);

  session.onChange(() => {
    vm = renderState(session);
    if (session.snapshot) tween.setTargets(session.snapshot.joints);
    paint(shell, vm, tween.update(performance.now()), session);
  });

  const frame = () => {
    paintArms(shell, vm, tween.update(performance.now()));
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);

  attachKeyboard(session, window);
  session.connect();
  return session;
}

if (typeof document !== "undefined" && document.getElementById("console-root")) {
  start(document.getElementById("console-root")!);
}
