/** Console wiring: fetch -> render -> submit loop against the /v1 API. */

import { ReviewApi } from "./api.js";
import { applyServerPayload, initialFlowState, surveySubmitted } from "./state.js";
import type { ConditionFlowState } from "./state.js";
import type { CasePayload, Decision } from "./types.js";
import {
  newCaseView,
  renderCase,
  renderDoneScreen,
  renderInstructions,
  renderSurveyForm,
} from "./views.js";

const api = new ReviewApi();

interface AppState {
  sessionId: string;
  flow: ConditionFlowState;
  firstPaintAt: number | null;
  submitting: boolean;
}

function mount(el: HTMLElement): void {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app container");
  root.replaceChildren(el);
}

async function advance(state: AppState): Promise<void> {
  const payload = await api.nextCase(state.sessionId);
  const { state: flow, screen } = applyServerPayload(state.flow, payload);
  state.flow = flow;
  if (screen.kind === "done") {
    mount(renderDoneScreen());
    return;
  }
  if (screen.kind === "survey") {
    mount(
      renderSurveyForm(screen.condition, async (body) => {
        await api.submitSurvey(state.sessionId, body);
        state.flow = surveySubmitted(state.flow);
        await advance(state);
      }),
    );
    return;
  }
  showCase(state, screen.payload);
}

function showCase(state: AppState, payload: CasePayload): void {
  state.firstPaintAt = null;
  state.submitting = false;
  const view = newCaseView(payload);
  const el = renderCase(view, {
    onFirstPaint: () => {
      state.firstPaintAt = performance.now();
    },
    onDecision: async (decision: Decision) => {
      if (state.submitting) return; // client-side duplicate guard
      state.submitting = true;
      const latency =
        state.firstPaintAt === null ? null : performance.now() - state.firstPaintAt;
      await api.submitDecision(state.sessionId, payload.case_id, decision, latency);
      await advance(state);
    },
  });
  if (!payload.human_input_enabled) {
    const cont = el.querySelector(".continue-button");
    cont?.addEventListener("click", () => void advance(state));
  }
  mount(el);
}

async function start(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const participant = params.get("participant") ?? `anon-${Date.now() % 100000}`;
  const seed = Number(params.get("seed") ?? Math.floor(Math.random() * 1e6));
  const session = await api.createSession(participant, seed);
  const state: AppState = {
    sessionId: session.session_id,
    flow: initialFlowState(session.condition_order),
    firstPaintAt: null,
    submitting: false,
  };
  mount(renderInstructions(() => void advance(state)));
}

window.addEventListener("DOMContentLoaded", () => {
  void start().catch((err) => {
    const el = document.createElement("pre");
    el.className = "fatal-error";
    el.textContent = `Failed to start session: ${err}`;
    mount(el);
  });
});
