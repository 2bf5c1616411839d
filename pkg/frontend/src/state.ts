/** Client-side session flow: condition progression gated by surveys. */

import type { CasePayload, Condition, NextPayload } from "./types.js";

export type Screen =
  | { kind: "case"; payload: CasePayload }
  | { kind: "survey"; condition: Condition }
  | { kind: "done" };

export interface ConditionFlowState {
  conditionIndex: number;
  casesAnswered: number;
  surveyPending: boolean;
  conditionOrder: Condition[];
}

export function initialFlowState(conditionOrder: Condition[]): ConditionFlowState {
  return { conditionIndex: 0, casesAnswered: 0, surveyPending: false, conditionOrder };
}

/**
 * Fold a server response into the flow state and decide what to show.
 * The survey screen gates every condition transition: while
 * `surveyPending` is set, cases are not shown even if the server has more.
 */
export function applyServerPayload(
  state: ConditionFlowState,
  payload: NextPayload,
): { state: ConditionFlowState; screen: Screen } {
  if (payload.status === "session_complete") {
    return { state, screen: { kind: "done" } };
  }
  if (payload.status === "condition_complete") {
    const next = { ...state, surveyPending: true };
    return { state: next, screen: { kind: "survey", condition: payload.condition } };
  }
  if (state.surveyPending) {
    // Defensive: never show a case while a survey is owed.
    const condition = state.conditionOrder[state.conditionIndex];
    return { state, screen: { kind: "survey", condition } };
  }
  const index = state.conditionOrder.indexOf(payload.condition);
  const next: ConditionFlowState = {
    ...state,
    conditionIndex: index >= 0 ? index : state.conditionIndex,
    casesAnswered: payload.case_index,
  };
  return { state: next, screen: { kind: "case", payload } };
}

export function surveySubmitted(state: ConditionFlowState): ConditionFlowState {
  return {
    ...state,
    surveyPending: false,
    conditionIndex: Math.min(state.conditionIndex + 1, state.conditionOrder.length - 1),
    casesAnswered: 0,
  };
}
