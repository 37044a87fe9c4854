/** Unsent work survives reloads in localStorage, keyed by session. This is
 * the single piece of client state allowed to outlive a render. */

import type { Point } from "./schema";

export interface Draft {
  state: string;
  points: Point[];
  uncertain: boolean;
}

export function emptyDraft(state: string): Draft {
  return { state, points: [], uncertain: false };
}

const key = (sessionId: string) => `annotate-ui/draft/${sessionId}`;

export function saveDraft(sessionId: string, draft: Draft): void {
  localStorage.setItem(key(sessionId), JSON.stringify(draft));
}

export function loadDraft(sessionId: string): Draft | null {
  const raw = localStorage.getItem(key(sessionId));
  if (!raw) return null;
  try {
    const parsed = JSON.parse(raw) as Draft;
    if (typeof parsed.state !== "string" || !Array.isArray(parsed.points)) return null;
    return parsed;
  } catch {
    return null;
  }
}

export function clearDraft(sessionId: string): void {
  localStorage.removeItem(key(sessionId));
}
