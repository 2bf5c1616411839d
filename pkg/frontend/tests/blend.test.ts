import { describe, expect, it } from "vitest";

import { clampBlend, layerOpacities } from "../src/blend.js";

describe("blend math", () => {
  it("endpoint 0 is pure X-ray", () => {
    expect(layerOpacities(0)).toEqual({ xray: 1, drr: 0 });
  });

  it("endpoint 1 is pure DRR", () => {
    expect(layerOpacities(1)).toEqual({ xray: 1, drr: 1 });
  });

  it("midpoint half-blends the DRR over the X-ray", () => {
    expect(layerOpacities(0.5).drr).toBeCloseTo(0.5);
  });

  it("clamps out-of-range and NaN input", () => {
    expect(clampBlend(-0.3)).toBe(0);
    expect(clampBlend(1.7)).toBe(1);
    expect(clampBlend(Number.NaN)).toBe(0);
  });
});
