import { describe, expect, it } from "vitest";

import { SliderTween } from "../src/interpolate.js";

describe("slider tween", () => {
  it("approaches the target without overshoot", () => {
    const tween = new SliderTween(120);
    tween.setTargets([0]);
    tween.update(0);
    tween.setTargets([1]);
    let prev = 0;
    for (let ms = 16; ms <= 1600; ms += 16) {
      const [value] = tween.update(ms);
      expect(value).toBeGreaterThanOrEqual(prev);
      expect(value).toBeLessThanOrEqual(1);
      prev = value!;
    }
    expect(prev).toBeCloseTo(1, 3); // settled after ~13 time constants
  });

  it("moves roughly one time constant's worth per tau", () => {
    const tween = new SliderTween(100);
    tween.setTargets([0]);
    tween.update(0);
    tween.setTargets([1]);
    const [value] = tween.update(100);
    expect(value).toBeCloseTo(1 - Math.exp(-1), 5);
  });

  it("snaps when the joint count changes", () => {
    const tween = new SliderTween(120);
    tween.setTargets([0, 0]);
    tween.update(0);
    tween.setTargets([5, 5, 5]);
    expect(tween.update(16)).toEqual([5, 5, 5]);
  });

  it("tracks a moving target independently per joint", () => {
    const tween = new SliderTween(120);
    tween.setTargets([0, 10]);
    tween.update(0);
    tween.setTargets([1, -1]);
    const [a, b] = tween.update(50);
    expect(a).toBeGreaterThan(0);
    expect(a).toBeLessThan(1);
    expect(b).toBeLessThan(10);
    expect(b).toBeGreaterThan(-1);
  });

  it("returns a copy the caller can mutate safely", () => {
    const tween = new SliderTween(120);
    tween.setTargets([2]);
    const out = tween.update(0);
    out[0] = 99;
    expect(tween.update(16)[0]).not.toBe(99);
  });
});
