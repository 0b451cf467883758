/**
 * Typed client for the t1dtwin inference service.
 *
 * The UI never computes physiology itself: every curve and number rendered
 * comes verbatim from these endpoints (see docs/api.json in the core repo).
 */

export interface ParamSummary {
  median: number;
  'q2.5': number;
  'q97.5': number;
}

export interface InferResponse {
  posterior_id: string;
  model_id: string;
  n_samples: number;
  leakage_rate: number;
  summary: Record<string, ParamSummary>;
}

export interface SimulateResponse {
  t: number[];
  median: number[];
  q05: number[];
  q95: number[];
  n_dropped: number;
}

export interface ScenarioJson {
  horizon_min: number;
  basal_rate: number;
  meals: { t_min: number; grams: number; duration_min: number }[];
  boluses: { t_min: number; dose: number }[];
}

export type ReplaySetting = 'in_sample' | 'next_day' | 'altered_meals';

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = 'ApiError';
  }
}

async function asError(response: Response): Promise<ApiError> {
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (typeof body.detail === 'string') detail = body.detail;
  } catch {
    /* non-JSON error body; keep the status text */
  }
  return new ApiError(response.status, detail);
}

export class TwinClient {
  constructor(
    private baseUrl: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  async health(): Promise<{ status: string; model_id: string }> {
    const r = await this.fetchFn(`${this.baseUrl}/health`);
    if (!r.ok) throw await asError(r);
    return r.json();
  }

  async infer(cgm: number[], samples = 1000, seed = 0): Promise<InferResponse> {
    const r = await this.fetchFn(`${this.baseUrl}/infer`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ cgm, samples, seed }),
    });
    if (!r.ok) throw await asError(r);
    return r.json();
  }

  async simulate(
    posteriorId: string,
    scenario: ScenarioJson,
    setting: ReplaySetting = 'in_sample',
    signal?: AbortSignal,
  ): Promise<SimulateResponse> {
    const r = await this.fetchFn(`${this.baseUrl}/simulate`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ posterior_id: posteriorId, scenario, setting }),
      signal,
    });
    if (!r.ok) throw await asError(r);
    return r.json();
  }
}
