/** Typed client for the /v1 review API with idempotent retry on decisions. */

import type { Decision, NextPayload, SessionInfo, SurveyBody } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function parseOrThrow(resp: Response): Promise<any> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      detail = body.detail ?? detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, detail);
  }
  return resp.json();
}

export class ReviewApi {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  async createSession(participant: string, seed: number): Promise<SessionInfo> {
    const resp = await this.fetchFn(`${this.base}/v1/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ participant, seed }),
    });
    return parseOrThrow(resp);
  }

  async nextCase(sessionId: string): Promise<NextPayload> {
    const resp = await this.fetchFn(`${this.base}/v1/sessions/${sessionId}/next`);
    return parseOrThrow(resp);
  }

  /**
   * Post a decision; retried on network failure.  The server treats a
   * repeat of an already-recorded (case, condition) as a conflict, which a
   * retry converts into success: the first attempt must have landed.
   */
  async submitDecision(
    sessionId: string,
    caseId: string,
    decision: Decision,
    clientLatencyMs: number | null,
    retries = 2,
  ): Promise<void> {
    for (let attempt = 0; ; attempt++) {
      try {
        const resp = await this.fetchFn(`${this.base}/v1/sessions/${sessionId}/decisions`, {
          method: "POST",
          headers: { "content-type": "application/json" },
          body: JSON.stringify({
            case_id: caseId,
            decision,
            client_latency_ms: clientLatencyMs,
          }),
        });
        if (resp.status === 409 && attempt > 0) {
          return; // duplicate conflict after a retry: first attempt landed
        }
        await parseOrThrow(resp);
        return;
      } catch (err) {
        if (err instanceof ApiError) throw err;
        if (attempt >= retries) throw err;
      }
    }
  }

  async submitSurvey(sessionId: string, body: SurveyBody): Promise<void> {
    const resp = await this.fetchFn(`${this.base}/v1/sessions/${sessionId}/surveys`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    await parseOrThrow(resp);
  }
}
