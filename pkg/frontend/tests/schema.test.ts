import { describe, expect, it } from "vitest";

import FIXTURE_RAW from "./fixtures/annotation_record.json?raw";

import {
  lineItem,
  selectItem,
  serializeRecord,
  type AnnotationRecord,
  type StateView,
} from "../src/schema";

const FIXTURE = FIXTURE_RAW.trim();

const SEG_STATE: StateView = {
  type: "octSegmentation",
  question: "Inner Limiting Membrane",
  annotation_type: "line",
  options: [],
  dataloader: null,
};

const SELECT_STATE: StateView = {
  type: "select",
  question: "Macular Foramen",
  annotation_type: null,
  options: ["-", "pseudo", "lamellar", "full-thickness"],
  dataloader: null,
};

describe("shared AnnotationRecord schema", () => {
  it("submitted payloads serialize byte-for-byte to the shared fixture", () => {
    const record: AnnotationRecord = {
      sample_id: "vol_000_slice_000",
      annotator_id: "ui",
      timestamp: "2026-01-01T00:00:00+00:00",
      items: [
        lineItem(SEG_STATE, "seg_ilm", {
          points: [[0.5, 10.5], [31.5, 11.25], [63.5, 12.25]],
          uncertain: true,
        }),
        selectItem(SELECT_STATE, "macular_foramen", "pseudo"),
      ],
    };
    expect(serializeRecord(record)).toBe(FIXTURE);
  });

  it("class resolution mirrors the server: payload class, question, state name", () => {
    const payload = { points: [[0, 1]] as [number, number][], uncertain: false };
    expect(lineItem(SEG_STATE, "seg_ilm", { ...payload, class: "override" }).class)
      .toBe("override");
    expect(lineItem(SEG_STATE, "seg_ilm", payload).class)
      .toBe("Inner Limiting Membrane");
    expect(lineItem({ ...SEG_STATE, question: null }, "seg_ilm", payload).class)
      .toBe("seg_ilm");
  });

  it("the uncertain flag travels with line payloads", () => {
    const item = lineItem(SEG_STATE, "seg_ilm",
      { points: [[0, 1], [2, 3]], uncertain: true });
    expect(item.uncertain).toBe(true);
    expect(JSON.parse(JSON.stringify(item)).uncertain).toBe(true);
  });
});
