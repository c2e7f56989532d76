/**
 * Client-side easing for joint sliders between 10 Hz snapshots.
 *
 * Exponential approach toward the latest snapshot values: smooth at display
 * frame rates, never overshoots, and converges to the target between
 * broadcasts.
 */

export class SliderTween {
  private display: number[] = [];
  private targets: number[] = [];
  private lastMs: number | null = null;
  private readonly timeConstantMs: number;

  constructor(timeConstantMs = 120) {
    if (!(timeConstantMs > 0)) throw new Error(`time constant must be > 0, got ${timeConstantMs}`);
    this.timeConstantMs = timeConstantMs;
  }

  /** Feed the latest snapshot's joint values. */
  setTargets(values: number[]): void {
    if (values.length !== this.display.length) {
      this.display = [...values]; // dimension change: snap, do not animate
      this.lastMs = null;
    }
    this.targets = [...values];
  }

  /** Advance to `nowMs` and return the values to draw. */
  update(nowMs: number): number[] {
    if (this.lastMs === null) {
      this.lastMs = nowMs;
      this.display = [...this.targets];
      return [...this.display];
    }
    const dt = Math.max(nowMs - this.lastMs, 0);
    this.lastMs = nowMs;
    const blend = 1 - Math.exp(-dt / this.timeConstantMs);
    this.display = this.display.map((value, i) => {
      const target = this.targets[i] ?? value;
      return value + (target - value) * blend;
    });
    return [...this.display];
  }
}
