import type {
  CreateSessionBody,
  HealthResponse,
  PoliciesResponse,
  Recommendation,
  SessionSummary,
  StepBody,
  StepResponse,
  TrajectoryResponse,
} from "./types";

/** Error responses carry {error: {code, message}}; both are surfaced. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

/** The service could not be reached at all (down, refused, DNS). */
export class NetworkError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "NetworkError";
  }
}

export type FetchFn = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly base: string,
    private readonly fetchFn: FetchFn,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchFn(this.base + path, init);
    } catch (exc) {
      throw new NetworkError(
        exc instanceof Error ? exc.message : String(exc),
      );
    }
    if (!resp.ok) {
      let code = `http_${resp.status}`;
      let message = resp.statusText || `request failed (${resp.status})`;
      try {
        const body = await resp.json();
        if (body?.error?.code) {
          code = body.error.code;
          message = body.error.message ?? message;
        } else if (Array.isArray(body?.detail)) {
          // FastAPI request-validation failures have no service envelope.
          code = "invalid_request";
          message = body.detail
            .map((d: { msg?: string }) => d.msg ?? "invalid field")
            .join("; ");
        }
      } catch {
        // structureless error body; keep the status-derived fallbacks
      }
      throw new ApiError(resp.status, code, message);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  health(): Promise<HealthResponse> {
    return this.request("/health");
  }

  policies(): Promise<PoliciesResponse> {
    return this.request("/policies");
  }

  createSession(body: CreateSessionBody): Promise<SessionSummary> {
    return this.post("/sessions", body);
  }

  getSession(id: string): Promise<SessionSummary> {
    return this.request(`/sessions/${id}`);
  }

  recommendation(id: string): Promise<Recommendation> {
    return this.request(`/sessions/${id}/recommendation`);
  }

  step(id: string, body: StepBody): Promise<StepResponse> {
    return this.post(`/sessions/${id}/step`, body);
  }

  trajectory(id: string): Promise<TrajectoryResponse> {
    return this.request(`/sessions/${id}/trajectory`);
  }
}
