import { beforeEach, describe, expect, it, vi } from "vitest";

import type { CasePayload } from "../src/types.js";
import {
  newCaseView,
  payloadViolations,
  renderCase,
  renderSurveyForm,
} from "../src/views.js";

function basePayload(overrides: Partial<CasePayload> = {}): CasePayload {
  return {
    status: "case",
    session_id: "s1",
    condition: "HUMAN_ONLY",
    case_id: "tp-01",
    case_index: 0,
    cases_total: 12,
    xray_url: "/v1/assets/tp-01/xray.png",
    drr_url: "/v1/assets/tp-01/drr.png",
    human_input_enabled: true,
    ...overrides,
  };
}

function xaiPayload(): CasePayload {
  return basePayload({
    condition: "HUMAN_XAI",
    ai_prediction: "ACCEPT",
    ai_probability: 0.91,
    heatmap_url: "/v1/assets/tp-01/heatmap.png",
    prediction_set: { labels: ["ACCEPT"], certain: true, fallback: false },
  });
}

const noopHandlers = { onDecision: () => {} };

beforeEach(() => {
  document.body.innerHTML = "";
});

describe("payload visibility contract", () => {
  it("HUMAN_ONLY renders no AI panel at all", () => {
    const el = renderCase(newCaseView(basePayload()), noopHandlers);
    expect(el.querySelector(".ai-panel")).toBeNull();
    expect(el.querySelector(".prediction-badge")).toBeNull();
    expect(el.querySelector(".certainty-badge")).toBeNull();
    expect(el.querySelector(".heatmap-toggle")).toBeNull();
    expect(el.textContent).not.toContain("AI");
  });

  it("HUMAN_XAI renders prediction, probability, heatmap toggle, certainty badge", () => {
    const el = renderCase(newCaseView(xaiPayload()), noopHandlers);
    const badge = el.querySelector(".prediction-badge");
    expect(badge?.textContent).toContain("ACCEPT");
    expect(badge?.textContent).toContain("91%");
    expect(el.querySelector(".heatmap-toggle input")).not.toBeNull();
    const certainty = el.querySelector(".certainty-badge");
    expect(certainty?.textContent).toBe("certain: ACCEPT");
  });

  it("two-label prediction set renders the uncertain indicator", () => {
    const payload = xaiPayload();
    payload.prediction_set = {
      labels: ["ACCEPT", "REJECT"],
      certain: false,
      fallback: false,
    };
    const el = renderCase(newCaseView(payload), noopHandlers);
    expect(el.querySelector(".certainty-badge")?.textContent).toBe("uncertain");
  });

  it("HUMAN_AI shows prediction but neither heatmap nor certainty", () => {
    const payload = basePayload({
      condition: "HUMAN_AI",
      ai_prediction: "REJECT",
      ai_probability: 0.2,
    });
    const el = renderCase(newCaseView(payload), noopHandlers);
    expect(el.querySelector(".prediction-badge")?.textContent).toContain("REJECT");
    expect(el.querySelector(".heatmap-toggle")).toBeNull();
    expect(el.querySelector(".certainty-badge")).toBeNull();
  });

  it("tampered HUMAN_ONLY payload with AI fields renders a blocking error", () => {
    const payload = basePayload({ ai_prediction: "ACCEPT", ai_probability: 0.9 });
    const el = renderCase(newCaseView(payload), noopHandlers);
    expect(el.className).toBe("error-screen");
    expect(el.querySelector(".prediction-badge")).toBeNull();
    expect(el.querySelector(".decision-button")).toBeNull();
  });

  it("HUMAN_XAI payload missing its licensed fields is blocked, not rendered", () => {
    const payload = basePayload({ condition: "HUMAN_XAI" });
    const el = renderCase(newCaseView(payload), noopHandlers);
    expect(el.className).toBe("error-screen");
  });

  it("violations list names each offending field", () => {
    const payload = basePayload({ ai_probability: 0.5 });
    const violations = payloadViolations(payload);
    expect(violations).toHaveLength(1);
    expect(violations[0]).toContain("ai_probability");
  });
});

describe("decision controls", () => {
  it("accept/reject disabled in AI_ONLY with a continue affordance", () => {
    const payload = basePayload({
      condition: "AI_ONLY",
      human_input_enabled: false,
      ai_prediction: "ACCEPT",
      ai_probability: 0.8,
    });
    const el = renderCase(newCaseView(payload), noopHandlers);
    const buttons = el.querySelectorAll<HTMLButtonElement>(".decision-button");
    expect(buttons).toHaveLength(2);
    for (const b of buttons) expect(b.disabled).toBe(true);
    expect(el.querySelector(".continue-button")).not.toBeNull();
  });

  it("clicking accept fires the decision handler once", () => {
    const onDecision = vi.fn();
    const el = renderCase(newCaseView(basePayload()), { onDecision });
    const accept = el.querySelector<HTMLButtonElement>(".decision-accept")!;
    accept.click();
    expect(onDecision).toHaveBeenCalledExactlyOnceWith("ACCEPT");
  });

  it("latency starts on first image paint", () => {
    const onFirstPaint = vi.fn();
    const el = renderCase(newCaseView(basePayload()), {
      onDecision: () => {},
      onFirstPaint,
    });
    expect(onFirstPaint).not.toHaveBeenCalled();
    el.querySelector<HTMLImageElement>(".layer-xray")!.dispatchEvent(new Event("load"));
    expect(onFirstPaint).toHaveBeenCalledTimes(1);
  });
});

describe("blend slider", () => {
  function opacityAt(blendValue: string): { xray: string; drr: string } {
    const el = renderCase(newCaseView(basePayload()), noopHandlers);
    document.body.appendChild(el);
    const slider = el.querySelector<HTMLInputElement>(".blend-slider")!;
    slider.value = blendValue;
    slider.dispatchEvent(new Event("input"));
    return {
      xray: el.querySelector<HTMLImageElement>(".layer-xray")!.style.opacity,
      drr: el.querySelector<HTMLImageElement>(".layer-drr")!.style.opacity,
    };
  }

  it("blend 0 shows the pure X-ray", () => {
    const { xray, drr } = opacityAt("0");
    expect(xray).toBe("1");
    expect(drr).toBe("0");
  });

  it("blend 1 shows the pure DRR", () => {
    const { xray, drr } = opacityAt("1");
    expect(xray).toBe("1"); // fully covered by the DRR layer on top
    expect(drr).toBe("1");
  });
});

describe("survey form", () => {
  it("submit disabled while any scale is blank", () => {
    const form = renderSurveyForm("HUMAN_ONLY", () => {});
    document.body.appendChild(form);
    const submit = form.querySelector<HTMLButtonElement>("button[type=submit]")!;
    expect(submit.disabled).toBe(true);
    const inputs = form.querySelectorAll<HTMLInputElement>("input[type=number]");
    inputs.forEach((input, i) => {
      if (i > 0) input.value = "50";
    });
    form.dispatchEvent(new Event("input"));
    expect(submit.disabled).toBe(true); // first scale still blank
    inputs[0].value = "50";
    form.dispatchEvent(new Event("input"));
    expect(submit.disabled).toBe(false);
  });

  it("HUMAN_ONLY survey has no AI-evaluation items", () => {
    const form = renderSurveyForm("HUMAN_ONLY", () => {});
    expect(form.querySelectorAll(".ai-eval-row")).toHaveLength(0);
  });

  it("HUMAN_XAI survey collects AI items and posts them", () => {
    const onSubmit = vi.fn();
    const form = renderSurveyForm("HUMAN_XAI", onSubmit);
    document.body.appendChild(form);
    expect(form.querySelectorAll(".ai-eval-row")).toHaveLength(3);
    form.querySelectorAll<HTMLInputElement>(".tlx-row input").forEach((i) => (i.value = "25"));
    form.querySelectorAll<HTMLInputElement>(".ai-eval-row input").forEach((i) => (i.value = "6"));
    form.dispatchEvent(new Event("input"));
    form.dispatchEvent(new Event("submit"));
    expect(onSubmit).toHaveBeenCalledTimes(1);
    const body = onSubmit.mock.calls[0][0];
    expect(body.condition).toBe("HUMAN_XAI");
    expect(body.tlx.mental).toBe(25);
    expect(body.ai_items.trust).toBe(6);
  });

  it("out-of-range TLX value keeps submit disabled", () => {
    const form = renderSurveyForm("HUMAN_ONLY", () => {});
    document.body.appendChild(form);
    const inputs = form.querySelectorAll<HTMLInputElement>("input[type=number]");
    inputs.forEach((input) => (input.value = "101"));
    form.dispatchEvent(new Event("input"));
    const submit = form.querySelector<HTMLButtonElement>("button[type=submit]")!;
    expect(submit.disabled).toBe(true);
  });
});
