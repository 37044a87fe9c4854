/** Orchestration: fetch the live query, open a session per sample, and walk
 * the protocol. All rendering flows through view.render from (session, draft,
 * viewport, flags); the unsent draft is the only persisted client state. */

import { ApiClient, ApiError } from "./api";
import { clearDraft, emptyDraft, loadDraft, saveDraft, type Draft } from "./drafts";
import {
  addVertex,
  defaultViewport,
  moveVertex,
  undoVertex,
  zoomBy,
  type Viewport,
} from "./polyline";
import { lineValidationError, type LinePayload, type SessionView } from "./schema";
import { render, type Handlers } from "./view";

const IMAGE_SIZE = 64; // synthetic slices are square; real loaders can override

export class App {
  session: SessionView | null = null;
  draft: Draft = emptyDraft("");
  viewport: Viewport = defaultViewport(IMAGE_SIZE, IMAGE_SIZE);
  validation: string | null = null;
  rejection: string | null = null;
  offline = false;

  constructor(private root: HTMLElement, private api: ApiClient,
              private imageBase = "") {}

  async init(sampleId?: string): Promise<void> {
    if (!sampleId) {
      const query = await this.api.latestQuery();
      if (query.samples.length === 0) throw new Error("the latest query is empty");
      sampleId = query.samples[0].sample_id;
    }
    this.adopt(await this.api.createSession(sampleId));
  }

  /** Install a fresh server view, restoring any stored draft for its state. */
  adopt(session: SessionView): void {
    this.session = session;
    const stored = loadDraft(session.session_id);
    this.draft = stored && stored.state === session.current_state
      ? stored
      : emptyDraft(session.current_state);
    this.validation = null;
    this.rejection = null;
    this.offline = false;
    this.paint();
  }

  paint(): void {
    if (!this.session) return;
    this.root.replaceChildren(render({
      session: this.session,
      draft: this.draft,
      viewport: this.viewport,
      imageBase: this.imageBase,
      validation: this.validation,
      rejection: this.rejection,
      offline: this.offline,
    }, this.handlers()));
  }

  private storeDraft(): void {
    if (this.session) saveDraft(this.session.session_id, this.draft);
  }

  private answerForCurrentState(): unknown | null {
    const state = this.session!.state;
    if (state.type === "octSegmentation") {
      this.validation = lineValidationError(this.draft.points);
      if (this.validation) return null;
      const payload: LinePayload = {
        points: this.draft.points,
        uncertain: this.draft.uncertain,
      };
      return payload;
    }
    if (state.type === "load") return "next";
    return "done"; // summary and other pass-through states
  }

  private async submit(answer: unknown): Promise<void> {
    if (!this.session) return;
    try {
      const next = await this.api.answer(this.session.session_id, answer);
      clearDraft(this.session.session_id);
      this.adopt(next);
    } catch (err) {
      if (err instanceof ApiError) {
        // the server rejected the payload; stay on the state and say why
        this.rejection = err.detail;
        this.offline = false;
      } else {
        this.offline = true; // network failure: draft stays for retry
        this.rejection = null;
      }
      this.storeDraft();
      this.paint();
    }
  }

  private handlers(): Handlers {
    return {
      onContinue: () => {
        const answer = this.answerForCurrentState();
        if (answer === null) {
          this.paint();
          return;
        }
        void this.submit(answer);
      },
      onOption: (option) => void this.submit(option),
      onToggleUncertain: () => {
        this.draft = { ...this.draft, uncertain: !this.draft.uncertain };
        this.storeDraft();
        this.paint();
      },
      onUndo: () => {
        this.draft = { ...this.draft, points: undoVertex(this.draft.points) };
        this.storeDraft();
        this.paint();
      },
      onJump: (state) => {
        if (!this.session) return;
        void this.api.jump(this.session.session_id, state)
          .then((next) => this.adopt(next))
          .catch(() => {
            this.offline = true;
            this.paint();
          });
      },
      onCanvasClick: (dx, dy) => {
        this.draft = { ...this.draft, points: addVertex(this.draft.points, this.viewport, dx, dy) };
        this.validation = null;
        this.storeDraft();
        this.paint();
      },
      onCanvasDrag: (index, dx, dy) => {
        this.draft = {
          ...this.draft,
          points: moveVertex(this.draft.points, index, this.viewport, dx, dy),
        };
        this.storeDraft();
        this.paint();
      },
      onZoom: (factor) => {
        this.viewport = zoomBy(this.viewport, factor);
        this.paint();
      },
      onRetry: () => {
        const answer = this.answerForCurrentState();
        if (answer !== null) void this.submit(answer);
      },
    };
  }
}
