/** DOM builders for the review console screens.
 *
 * Everything here renders exactly what the payload carries.  AI assistance
 * is shown if and only if the corresponding field arrived; a payload whose
 * fields disagree with its declared condition produces a blocking error
 * screen instead of a best-effort render.
 */

import { clampBlend, layerOpacities } from "./blend.js";
import type { CasePayload, Condition, Decision, SurveyBody } from "./types.js";
import { AI_EVAL_ITEMS, TLX_SCALES } from "./types.js";

export interface CaseView {
  payload: CasePayload;
  blend: number; // 0 = pure X-ray, 1 = pure DRR
  heatmapVisible: boolean;
  zoom: number;
}

export function newCaseView(payload: CasePayload): CaseView {
  return { payload, blend: 0.5, heatmapVisible: true, zoom: 1 };
}

const AI_FIELDS = ["ai_prediction", "ai_probability", "heatmap_url", "prediction_set"] as const;

const LICENSED: Record<Condition, ReadonlySet<string>> = {
  HUMAN_ONLY: new Set<string>(),
  AI_ONLY: new Set(["ai_prediction", "ai_probability"]),
  HUMAN_AI: new Set(["ai_prediction", "ai_probability"]),
  HUMAN_XAI: new Set(AI_FIELDS),
};

/** Licensed-field check; any violation blocks rendering. */
export function payloadViolations(payload: CasePayload): string[] {
  const allowed = LICENSED[payload.condition];
  if (!allowed) return [`unknown condition ${payload.condition}`];
  const violations: string[] = [];
  for (const field of AI_FIELDS) {
    const present = payload[field] !== undefined;
    if (present && !allowed.has(field)) {
      violations.push(`field ${field} is not licensed in ${payload.condition}`);
    }
    if (!present && allowed.has(field)) {
      violations.push(`field ${field} is missing for ${payload.condition}`);
    }
  }
  const wantInput = payload.condition !== "AI_ONLY";
  if (payload.human_input_enabled !== wantInput) {
    violations.push(`human_input_enabled must be ${wantInput} in ${payload.condition}`);
  }
  return violations;
}

export interface CaseHandlers {
  onDecision: (decision: Decision) => void;
  onBlendChange?: (blend: number) => void;
  onFirstPaint?: () => void;
}

export function renderErrorScreen(violations: string[]): HTMLElement {
  const el = document.createElement("div");
  el.className = "error-screen";
  const h = document.createElement("h2");
  h.textContent = "Protocol error";
  el.appendChild(h);
  const list = document.createElement("ul");
  for (const v of violations) {
    const li = document.createElement("li");
    li.textContent = v;
    list.appendChild(li);
  }
  el.appendChild(list);
  const note = document.createElement("p");
  note.textContent = "This case cannot be shown. Please contact the study coordinator.";
  el.appendChild(note);
  return el;
}

export function renderCase(view: CaseView, handlers: CaseHandlers): HTMLElement {
  const violations = payloadViolations(view.payload);
  if (violations.length > 0) {
    return renderErrorScreen(violations);
  }
  const payload = view.payload;
  const root = document.createElement("div");
  root.className = "case-screen";
  root.dataset.condition = payload.condition;
  root.dataset.caseId = payload.case_id;

  const progress = document.createElement("div");
  progress.className = "progress";
  progress.textContent =
    `Case ${payload.case_index + 1} of ${payload.cases_total} - ${conditionTitle(payload.condition)}`;
  root.appendChild(progress);

  root.appendChild(buildViewer(view, handlers));

  const aiPanel = buildAiPanel(payload, view);
  if (aiPanel !== null) {
    root.appendChild(aiPanel);
  }

  root.appendChild(buildDecisionBar(payload, handlers));
  return root;
}

function conditionTitle(condition: Condition): string {
  switch (condition) {
    case "HUMAN_ONLY":
      return "Your judgment only";
    case "AI_ONLY":
      return "Automatic decision";
    case "HUMAN_AI":
      return "AI assistance";
    case "HUMAN_XAI":
      return "AI assistance with explanation";
  }
}

function buildViewer(view: CaseView, handlers: CaseHandlers): HTMLElement {
  const viewer = document.createElement("div");
  viewer.className = "viewer";
  viewer.style.transform = `scale(${view.zoom})`;

  const opacities = layerOpacities(view.blend);
  const xray = document.createElement("img");
  xray.className = "layer layer-xray";
  xray.src = view.payload.xray_url;
  xray.alt = "X-ray";
  xray.style.opacity = String(opacities.xray);
  // Latency timing starts on first image paint, not on fetch.
  xray.addEventListener("load", () => handlers.onFirstPaint?.(), { once: true });
  viewer.appendChild(xray);

  const drr = document.createElement("img");
  drr.className = "layer layer-drr";
  drr.src = view.payload.drr_url;
  drr.alt = "DRR";
  drr.style.opacity = String(opacities.drr);
  viewer.appendChild(drr);

  if (view.payload.heatmap_url !== undefined && view.heatmapVisible) {
    const heatmap = document.createElement("img");
    heatmap.className = "layer layer-heatmap";
    heatmap.src = view.payload.heatmap_url;
    heatmap.alt = "importance heatmap";
    viewer.appendChild(heatmap);
  }

  const blend = document.createElement("input");
  blend.type = "range";
  blend.className = "blend-slider";
  blend.min = "0";
  blend.max = "1";
  blend.step = "0.01";
  blend.value = String(view.blend);
  blend.setAttribute("aria-label", "X-ray / DRR blend");
  blend.addEventListener("input", () => {
    const value = clampBlend(Number(blend.value));
    drr.style.opacity = String(layerOpacities(value).drr);
    handlers.onBlendChange?.(value);
  });
  const blendRow = document.createElement("div");
  blendRow.className = "blend-row";
  const left = document.createElement("span");
  left.textContent = "X-ray";
  const right = document.createElement("span");
  right.textContent = "DRR";
  blendRow.append(left, blend, right);
  viewer.appendChild(blendRow);
  return viewer;
}

/** The assistance panel; null when the payload carries no AI fields. */
function buildAiPanel(payload: CasePayload, view: CaseView): HTMLElement | null {
  if (payload.ai_prediction === undefined) {
    return null;
  }
  const panel = document.createElement("aside");
  panel.className = "ai-panel";

  const badge = document.createElement("div");
  badge.className = `prediction-badge prediction-${payload.ai_prediction.toLowerCase()}`;
  const probability = payload.ai_probability ?? 0;
  const shownProb =
    payload.ai_prediction === "ACCEPT" ? probability : 1 - probability;
  badge.textContent = `AI: ${payload.ai_prediction} (${(shownProb * 100).toFixed(0)}% confidence)`;
  panel.appendChild(badge);

  if (payload.prediction_set !== undefined) {
    const certainty = document.createElement("div");
    certainty.className = "certainty-badge";
    const set = payload.prediction_set;
    if (set.labels.length === 1 && set.certain) {
      certainty.textContent = `certain: ${set.labels[0]}`;
      certainty.dataset.state = "certain";
    } else {
      certainty.textContent = "uncertain";
      certainty.dataset.state = "uncertain";
    }
    panel.appendChild(certainty);
  }

  if (payload.heatmap_url !== undefined) {
    const toggle = document.createElement("label");
    toggle.className = "heatmap-toggle";
    const box = document.createElement("input");
    box.type = "checkbox";
    box.checked = view.heatmapVisible;
    box.addEventListener("change", () => {
      view.heatmapVisible = box.checked;
      const layer = document.querySelector(".layer-heatmap") as HTMLElement | null;
      if (layer) layer.style.display = box.checked ? "" : "none";
    });
    toggle.appendChild(box);
    toggle.appendChild(document.createTextNode(" show importance heatmap"));
    panel.appendChild(toggle);
  }
  return panel;
}

function buildDecisionBar(payload: CasePayload, handlers: CaseHandlers): HTMLElement {
  const bar = document.createElement("div");
  bar.className = "decision-bar";
  for (const decision of ["ACCEPT", "REJECT"] as Decision[]) {
    const button = document.createElement("button");
    button.className = `decision-button decision-${decision.toLowerCase()}`;
    button.textContent = decision === "ACCEPT" ? "Accept registration" : "Reject registration";
    button.disabled = !payload.human_input_enabled;
    button.addEventListener("click", () => {
      if (!button.disabled) handlers.onDecision(decision);
    });
    bar.appendChild(button);
  }
  if (!payload.human_input_enabled) {
    const note = document.createElement("p");
    note.className = "auto-note";
    note.textContent = "The AI decides in this condition; review and continue.";
    bar.appendChild(note);
    const cont = document.createElement("button");
    cont.className = "continue-button";
    cont.textContent = "Continue";
    bar.appendChild(cont);
  }
  return bar;
}

export function renderSurveyForm(
  condition: Condition,
  onSubmit: (body: SurveyBody) => void,
): HTMLElement {
  const form = document.createElement("form");
  form.className = "survey-form";
  form.dataset.condition = condition;

  const heading = document.createElement("h2");
  heading.textContent = "How was that block?";
  form.appendChild(heading);

  const scaleInputs = new Map<string, HTMLInputElement>();
  for (const scale of TLX_SCALES) {
    const row = document.createElement("label");
    row.className = "tlx-row";
    row.textContent = `${scale} demand/load (0-100): `;
    const input = document.createElement("input");
    input.type = "number";
    input.name = `tlx_${scale}`;
    input.min = "0";
    input.max = "100";
    input.required = true;
    row.appendChild(input);
    form.appendChild(row);
    scaleInputs.set(scale, input);
  }

  const aiInputs = new Map<string, HTMLInputElement>();
  if (condition !== "HUMAN_ONLY") {
    for (const item of AI_EVAL_ITEMS) {
      const row = document.createElement("label");
      row.className = "ai-eval-row";
      row.textContent = `${item} of the AI (1-7): `;
      const input = document.createElement("input");
      input.type = "number";
      input.name = `ai_${item}`;
      input.min = "1";
      input.max = "7";
      input.required = true;
      row.appendChild(input);
      form.appendChild(row);
      aiInputs.set(item, input);
    }
  }

  const freeText = document.createElement("textarea");
  freeText.name = "free_text";
  freeText.placeholder = "Anything else? (optional)";
  form.appendChild(freeText);

  const submit = document.createElement("button");
  submit.type = "submit";
  submit.textContent = "Submit survey";
  submit.disabled = true;
  form.appendChild(submit);

  const refresh = () => {
    const allFilled =
      [...scaleInputs.values()].every((i) => i.value !== "" && inRange(i)) &&
      [...aiInputs.values()].every((i) => i.value !== "" && inRange(i));
    submit.disabled = !allFilled;
  };
  form.addEventListener("input", refresh);

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    refresh();
    if (submit.disabled) return;
    const tlx = {} as SurveyBody["tlx"];
    for (const [scale, input] of scaleInputs) {
      tlx[scale as keyof SurveyBody["tlx"]] = Number(input.value);
    }
    const body: SurveyBody = { condition, tlx, free_text: freeText.value };
    if (aiInputs.size > 0) {
      body.ai_items = {};
      for (const [item, input] of aiInputs) {
        body.ai_items[item as keyof NonNullable<SurveyBody["ai_items"]>] = Number(input.value);
      }
    }
    onSubmit(body);
  });
  return form;
}

function inRange(input: HTMLInputElement): boolean {
  const v = Number(input.value);
  return v >= Number(input.min) && v <= Number(input.max) && Number.isInteger(v);
}

export function renderDoneScreen(): HTMLElement {
  const el = document.createElement("div");
  el.className = "done-screen";
  const h = document.createElement("h2");
  h.textContent = "Session complete";
  el.appendChild(h);
  const form = document.createElement("form");
  form.className = "demographics-form";
  const note = document.createElement("p");
  note.textContent =
    "Thank you. A few final questions about you (all optional).";
  form.appendChild(note);
  for (const field of ["role", "years of experience", "familiarity with X-ray imaging"]) {
    const row = document.createElement("label");
    row.textContent = `${field}: `;
    const input = document.createElement("input");
    input.name = field.replace(/\s+/g, "_");
    row.appendChild(input);
    form.appendChild(row);
  }
  el.appendChild(form);
  return el;
}

export function renderInstructions(onStart: () => void): HTMLElement {
  const el = document.createElement("div");
  el.className = "instructions-screen";
  const h = document.createElement("h2");
  h.textContent = "Registration review";
  el.appendChild(h);
  const p = document.createElement("p");
  p.textContent =
    "You will see pairs of images: a reference X-ray and a rendered overlay " +
    "produced by a registration algorithm. Use the blend slider to compare " +
    "them and decide whether the alignment is good enough to accept. Some " +
    "blocks include an AI second opinion; weigh it as you see fit. After " +
    "each block you will answer a short workload survey.";
  el.appendChild(p);
  const start = document.createElement("button");
  start.className = "start-button";
  start.textContent = "Start";
  start.addEventListener("click", onStart);
  el.appendChild(start);
  return el;
}
