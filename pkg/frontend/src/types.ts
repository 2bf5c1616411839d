/** Payload shapes served by the /v1 review API. */

export type Condition = "HUMAN_ONLY" | "AI_ONLY" | "HUMAN_AI" | "HUMAN_XAI";

export type Decision = "ACCEPT" | "REJECT";

export interface PredictionSet {
  labels: Decision[];
  certain: boolean;
  fallback: boolean;
}

/**
 * One assessment case.  The AI fields are present only when the active
 * condition licenses them; the client must render exactly what arrived and
 * never synthesize missing assistance.
 */
export interface CasePayload {
  status: "case";
  session_id: string;
  condition: Condition;
  case_id: string;
  case_index: number;
  cases_total: number;
  xray_url: string;
  drr_url: string;
  human_input_enabled: boolean;
  ai_prediction?: Decision;
  ai_probability?: number;
  heatmap_url?: string;
  prediction_set?: PredictionSet;
}

export interface ConditionCompleteSignal {
  status: "condition_complete";
  session_id: string;
  condition: Condition;
  survey_required: boolean;
}

export interface SessionCompleteSignal {
  status: "session_complete";
  session_id: string;
}

export type NextPayload = CasePayload | ConditionCompleteSignal | SessionCompleteSignal;

export interface SessionInfo {
  session_id: string;
  participant: string;
  condition_order: Condition[];
  cases_per_condition: Record<Condition, number>;
  status: string;
}

export const TLX_SCALES = [
  "mental",
  "physical",
  "temporal",
  "performance",
  "effort",
  "frustration",
] as const;

export type TlxScale = (typeof TLX_SCALES)[number];

export const AI_EVAL_ITEMS = ["usefulness", "trust", "understanding"] as const;

export type AiEvalItem = (typeof AI_EVAL_ITEMS)[number];

export interface SurveyBody {
  condition: Condition;
  tlx: Record<TlxScale, number>;
  ai_items?: Partial<Record<AiEvalItem, number>>;
  free_text?: string;
}
