/** Pure polyline geometry. All emitted points are image pixel coordinates,
 * whatever the display zoom and pan; the canvas is only a lens. */

import type { Point } from "./schema";

export interface Viewport {
  zoom: number;
  panX: number;
  panY: number;
  width: number; // image dimensions, pixels
  height: number;
}

export function defaultViewport(width: number, height: number): Viewport {
  return { zoom: 1, panX: 0, panY: 0, width, height };
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

/** Display (canvas) coordinates -> image coordinates, clamped to the image. */
export function toImage(vp: Viewport, dx: number, dy: number): Point {
  const x = clamp((dx - vp.panX) / vp.zoom, 0, vp.width - 1);
  const y = clamp((dy - vp.panY) / vp.zoom, 0, vp.height - 1);
  return [x, y];
}

export function toDisplay(vp: Viewport, p: Point): Point {
  return [p[0] * vp.zoom + vp.panX, p[1] * vp.zoom + vp.panY];
}

export function addVertex(points: Point[], vp: Viewport, dx: number, dy: number): Point[] {
  return [...points, toImage(vp, dx, dy)];
}

export function undoVertex(points: Point[]): Point[] {
  return points.slice(0, -1);
}

export function moveVertex(points: Point[], index: number, vp: Viewport,
                           dx: number, dy: number): Point[] {
  if (index < 0 || index >= points.length) return points;
  const next = points.slice();
  next[index] = toImage(vp, dx, dy);
  return next;
}

/** Index of the vertex within tolPx display pixels of (dx, dy), else null. */
export function nearestVertex(points: Point[], vp: Viewport, dx: number, dy: number,
                              tolPx = 6): number | null {
  let best: number | null = null;
  let bestDist = tolPx;
  points.forEach((p, i) => {
    const [px, py] = toDisplay(vp, p);
    const dist = Math.hypot(px - dx, py - dy);
    if (dist <= bestDist) {
      best = i;
      bestDist = dist;
    }
  });
  return best;
}

export function zoomBy(vp: Viewport, factor: number): Viewport {
  const zoom = clamp(vp.zoom * factor, 0.25, 16);
  return { ...vp, zoom };
}
