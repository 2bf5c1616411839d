/** Overlay-blend math for the X-ray/DRR comparison viewer.
 *
 * The X-ray sits at the bottom at full opacity; the DRR is stacked on top
 * with opacity equal to the blend value.  Blend 0 shows the pure X-ray,
 * blend 1 covers it completely with the DRR.
 */

export interface LayerOpacities {
  xray: number;
  drr: number;
}

export function clampBlend(value: number): number {
  if (Number.isNaN(value)) return 0;
  return Math.min(1, Math.max(0, value));
}

export function layerOpacities(blend: number): LayerOpacities {
  const b = clampBlend(blend);
  return { xray: 1, drr: b };
}
