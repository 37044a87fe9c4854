/** DOM rendering. `render` is a pure function of the fetched session, the
 * local draft, and transient status flags; it owns no state of its own. */

import type { Draft } from "./drafts";
import type { Point, SessionView } from "./schema";
import { nearestVertex, toDisplay, type Viewport } from "./polyline";

export interface Handlers {
  onContinue(): void;
  onOption(option: string): void;
  onToggleUncertain(): void;
  onUndo(): void;
  onJump(state: string): void;
  onCanvasClick(dx: number, dy: number): void;
  onCanvasDrag(index: number, dx: number, dy: number): void;
  onZoom(factor: number): void;
  onRetry(): void;
}

export interface ViewModel {
  session: SessionView;
  draft: Draft;
  viewport: Viewport;
  imageBase: string;
  validation: string | null;
  rejection: string | null;
  offline: boolean;
}

const LINE_PALETTE = ["#ffb000", "#2fbf71", "#4ea8de", "#b07cff", "#f26d6d", "#7bd389"];

/** Stable color per segmentation state, in protocol order; current is red. */
export function layerColor(vm: ViewModel, stateName: string): string {
  if (stateName === vm.session.current_state) return "#ff2d2d";
  const layers = vm.session.states.filter((s) => s.type === "octSegmentation");
  const idx = layers.findIndex((s) => s.name === stateName);
  return LINE_PALETTE[Math.max(idx, 0) % LINE_PALETTE.length];
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className: string, text?: string): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderProgress(vm: ViewModel): HTMLElement {
  const { visited, total } = vm.session.progress;
  const pct = total > 0 ? Math.round((100 * visited) / total) : 0;
  const wrap = el("div", "progress");
  wrap.setAttribute("role", "progressbar");
  wrap.setAttribute("aria-valuenow", String(pct));
  const fill = el("div", "progress-fill");
  fill.style.width = `${pct}%`;
  wrap.appendChild(fill);
  wrap.appendChild(el("span", "progress-text", `${visited} / ${total}`));
  return wrap;
}

function renderSlo(vm: ViewModel): HTMLElement {
  const box = el("figure", "slo-box");
  const img = el("img", "slo-thumb");
  img.src = `${vm.imageBase}/images/${vm.session.sample_id}.png`;
  img.alt = `SLO thumbnail for ${vm.session.sample_id}`;
  box.appendChild(img);
  box.appendChild(el("figcaption", "slo-caption", vm.session.sample_id));
  return box;
}

function renderSummaryList(vm: ViewModel, handlers: Handlers): HTMLElement {
  const list = el("ul", "summary-list");
  for (const state of vm.session.states) {
    if (!(state.name in vm.session.answers)) continue;
    if (state.type === "load" || state.type === "end") continue;
    const item = el("li", "summary-item");
    const swatch = el("span", "summary-swatch");
    if (state.type === "octSegmentation") swatch.style.background = layerColor(vm, state.name);
    item.appendChild(swatch);
    const answer = vm.session.answers[state.name];
    const shown = typeof answer === "string" ? answer : "line drawn";
    item.appendChild(el("span", "summary-text", `${state.question ?? state.name}: ${shown}`));
    const link = el("a", "summary-jump", "edit");
    link.href = "#";
    link.dataset.jump = state.name;
    link.addEventListener("click", (ev) => {
      ev.preventDefault();
      handlers.onJump(state.name);
    });
    item.appendChild(link);
    list.appendChild(item);
  }
  return list;
}

function paintScene(ctx: CanvasRenderingContext2D, vm: ViewModel,
                    image: HTMLImageElement | null): void {
  const vp = vm.viewport;
  ctx.clearRect(0, 0, vp.width * vp.zoom, vp.height * vp.zoom);
  if (image) {
    ctx.drawImage(image, vp.panX, vp.panY, vp.width * vp.zoom, vp.height * vp.zoom);
  }
  const drawLine = (points: Point[], color: string, emphasized: boolean) => {
    if (points.length === 0) return;
    ctx.strokeStyle = color;
    ctx.globalAlpha = emphasized ? 1.0 : 0.55;
    ctx.lineWidth = emphasized ? 2 : 1.5;
    ctx.beginPath();
    points.forEach((p, i) => {
      const [x, y] = toDisplay(vp, p);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
    for (const p of points) {
      const [x, y] = toDisplay(vp, p);
      ctx.fillStyle = color;
      ctx.fillRect(x - 2, y - 2, 4, 4);
    }
    ctx.globalAlpha = 1.0;
  };
  for (const state of vm.session.states) {
    if (state.type !== "octSegmentation" || state.name === vm.session.current_state) continue;
    const answer = vm.session.answers[state.name] as { points?: Point[] } | undefined;
    if (answer?.points) drawLine(answer.points, layerColor(vm, state.name), false);
  }
  drawLine(vm.draft.points, "#ff2d2d", true);
}

function renderCanvas(vm: ViewModel, handlers: Handlers): HTMLElement {
  const wrap = el("div", "canvas-wrap");
  const canvas = el("canvas", "slice-canvas");
  canvas.width = vm.viewport.width * vm.viewport.zoom;
  canvas.height = vm.viewport.height * vm.viewport.zoom;
  canvas.addEventListener("mousedown", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const dx = ev.clientX - rect.left;
    const dy = ev.clientY - rect.top;
    const hit = nearestVertex(vm.draft.points, vm.viewport, dx, dy);
    if (hit === null) {
      handlers.onCanvasClick(dx, dy);
      return;
    }
    // drag an existing vertex; listeners go on window because every draft
    // update re-renders and replaces the canvas node mid-drag
    const move = (mv: MouseEvent) =>
      handlers.onCanvasDrag(hit, mv.clientX - rect.left, mv.clientY - rect.top);
    const up = () => {
      window.removeEventListener("mousemove", move);
      window.removeEventListener("mouseup", up);
    };
    window.addEventListener("mousemove", move);
    window.addEventListener("mouseup", up);
  });

  let ctx: CanvasRenderingContext2D | null = null;
  try {
    ctx = canvas.getContext("2d");
  } catch {
    ctx = null; // jsdom has no 2d backend; the DOM contract is still testable
  }
  if (ctx) {
    const image = new Image();
    image.onload = () => paintScene(ctx!, vm, image);
    image.src = `${vm.imageBase}/images/${vm.session.sample_id}.png`;
    paintScene(ctx, vm, null);
  }

  const tools = el("div", "line-tools");
  const undo = el("button", "undo-btn", "undo point");
  undo.addEventListener("click", handlers.onUndo);
  const zoomIn = el("button", "zoom-in-btn", "+");
  zoomIn.addEventListener("click", () => handlers.onZoom(2));
  const zoomOut = el("button", "zoom-out-btn", "-");
  zoomOut.addEventListener("click", () => handlers.onZoom(0.5));
  const zoomLabel = el("span", "zoom-label", `${vm.viewport.zoom}x`);
  tools.append(undo, zoomOut, zoomLabel, zoomIn);

  wrap.append(canvas, tools);
  return wrap;
}

function renderUncertain(vm: ViewModel, handlers: Handlers): HTMLElement {
  const btn = el("button", "uncertain-btn", "uncertain");
  btn.setAttribute("aria-pressed", String(vm.draft.uncertain));
  if (vm.draft.uncertain) btn.classList.add("active");
  btn.addEventListener("click", handlers.onToggleUncertain);
  return btn;
}

function renderContinue(handlers: Handlers, label = "continue"): HTMLElement {
  const btn = el("button", "continue-btn", label);
  btn.addEventListener("click", handlers.onContinue);
  return btn;
}

function renderOptions(vm: ViewModel, handlers: Handlers): HTMLElement {
  const list = el("div", "option-list");
  for (const option of vm.session.state.options) {
    const btn = el("button", "option-btn", option);
    btn.dataset.option = option;
    btn.addEventListener("click", () => handlers.onOption(option));
    list.appendChild(btn);
  }
  return list;
}

function renderBody(vm: ViewModel, handlers: Handlers): HTMLElement {
  const body = el("div", "state-body");
  const state = vm.session.state;
  switch (state.type) {
    case "load":
      body.appendChild(el("p", "load-note",
        `load ${state.dataloader ?? "sample"} for ${vm.session.sample_id}`));
      body.appendChild(renderContinue(handlers, "start"));
      break;
    case "octSegmentation":
      body.appendChild(renderCanvas(vm, handlers));
      body.appendChild(renderUncertain(vm, handlers));
      body.appendChild(renderContinue(handlers));
      break;
    case "select":
      body.appendChild(renderOptions(vm, handlers));
      break;
    case "summary_oct":
      body.appendChild(renderSummaryList(vm, handlers));
      body.appendChild(renderContinue(handlers, "finish"));
      break;
    case "end":
      body.appendChild(el("div", "end-confirmation",
        "annotation complete; the record has been submitted"));
      body.appendChild(renderSummaryList(vm, handlers));
      break;
    default: {
      const panel = el("div", "error-panel",
        `unknown state type "${state.type}" - the session is preserved, reload or jump`);
      body.appendChild(panel);
      body.appendChild(renderSummaryList(vm, handlers));
    }
  }
  return body;
}

export function render(vm: ViewModel, handlers: Handlers): HTMLElement {
  const root = el("div", "annotate-root");
  root.appendChild(renderProgress(vm));

  const label = vm.session.state.question ?? vm.session.current_state;
  root.appendChild(el("h2", "current-layer", label));

  const columns = el("div", "columns");
  columns.appendChild(renderBody(vm, handlers));
  columns.appendChild(renderSlo(vm));
  root.appendChild(columns);

  if (vm.validation) root.appendChild(el("div", "validation-msg", vm.validation));
  if (vm.rejection) root.appendChild(el("div", "rejection-msg", vm.rejection));
  if (vm.offline) {
    const banner = el("div", "retry-banner",
      "submission failed; your draft is saved locally - ");
    const retry = el("button", "retry-btn", "retry");
    retry.addEventListener("click", handlers.onRetry);
    banner.appendChild(retry);
    root.appendChild(banner);
  }

  if (vm.session.state.type !== "summary_oct" && vm.session.state.type !== "end") {
    root.appendChild(renderSummaryList(vm, handlers));
  }
  return root;
}
