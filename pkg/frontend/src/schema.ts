/** Shared AnnotationRecord schema: the payloads this client submits must map
 * onto exactly the item shapes the server's record parser accepts. The
 * canonical bytes live in tests/fixtures/annotation_record.json, which the
 * backend test suite parses with its own reader. */

export type Point = [number, number];

export interface LinePayload {
  points: Point[];
  uncertain: boolean;
  class?: string;
}

export interface LineItem {
  kind: "line";
  class: string;
  points: Point[];
  uncertain: boolean;
}

export interface SelectItem {
  kind: "select";
  question: string;
  answer: string;
}

export type RecordItem = LineItem | SelectItem;

export interface AnnotationRecord {
  sample_id: string;
  annotator_id: string;
  timestamp: string;
  items: RecordItem[];
}

export interface StateView {
  type: string;
  question: string | null;
  annotation_type: string | null;
  options: string[];
  dataloader: string | null;
}

export interface SessionView {
  session_id: string;
  sample_id: string;
  current_state: string;
  state: StateView;
  answers: Record<string, unknown>;
  visited: string[];
  completed: boolean;
  draft: string | null;
  progress: { visited: number; total: number };
  states: { name: string; type: string; question: string | null }[];
  record_status?: { accepted: boolean; reason: string | null };
}

export interface QueryView {
  round: number;
  strategy: string;
  rng_seed: number;
  samples: { sample_id: string; score: number; image_url: string }[];
}

/** Mirror of the server's class resolution: explicit payload class, then the
 * state's question, then the state name. */
export function lineItem(state: StateView, stateName: string, payload: LinePayload): LineItem {
  return {
    kind: "line",
    class: payload.class ?? state.question ?? stateName,
    points: payload.points.map(([x, y]) => [x, y] as Point),
    uncertain: Boolean(payload.uncertain),
  };
}

export function selectItem(state: StateView, stateName: string, answer: string): SelectItem {
  return { kind: "select", question: state.question ?? stateName, answer };
}

export function serializeRecord(record: AnnotationRecord): string {
  return JSON.stringify(record);
}

/** Inline validation for the continue button; null means submittable. */
export function lineValidationError(points: Point[]): string | null {
  if (points.length < 2) return "draw at least 2 points before continuing";
  return null;
}
