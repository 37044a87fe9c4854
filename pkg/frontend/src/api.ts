/** Thin REST client over the controller + session engine. Submissions are
 * serialized: one POST in flight at a time, later ones queue behind it. */

import type { QueryView, SessionView } from "./schema";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class ApiClient {
  private queue: Promise<unknown> = Promise.resolve();

  constructor(private base = "") {}

  imageUrl(sampleId: string): string {
    return `${this.base}/images/${sampleId}.png`;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.base + path, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        /* plain-text error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    const run = () =>
      this.request<T>(path, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      });
    const next = this.queue.then(run, run);
    this.queue = next.catch(() => undefined);
    return next;
  }

  latestQuery(): Promise<QueryView> {
    return this.request<QueryView>("/queries/latest");
  }

  createSession(sampleId: string, annotatorId = "ui"): Promise<SessionView> {
    return this.post<SessionView>("/sessions", {
      sample_id: sampleId,
      annotator_id: annotatorId,
    });
  }

  getSession(sessionId: string): Promise<SessionView> {
    return this.request<SessionView>(`/sessions/${sessionId}`);
  }

  answer(sessionId: string, answer: unknown): Promise<SessionView> {
    return this.post<SessionView>(`/sessions/${sessionId}/answer`, { answer });
  }

  jump(sessionId: string, state: string): Promise<SessionView> {
    return this.post<SessionView>(`/sessions/${sessionId}/jump`, { state });
  }
}
