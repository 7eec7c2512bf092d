/**
 * Typed client for the session-service REST API. All state lives on the
 * server; this module only moves JSON.
 */

export interface ProblemSummary {
  id: string;
  question: string;
  domain: string;
}

export interface PersonaSummary {
  id: string;
  background: string;
}

export interface Catalog {
  endpoints: string[];
  model_variants: Record<string, string>;
  domains: string[];
  problems: ProblemSummary[];
  personas: PersonaSummary[];
}

export interface TurnView {
  index: number;
  from: "human" | "gpt";
  value: string;
  label: string | null;
}

export interface PersonaCard {
  id: string;
  background: string;
  strengths: string;
  challenges: string;
}

export interface SessionView {
  id: string;
  model_tag: string;
  endpoint: string;
  domain: string;
  closed: boolean;
  pending: boolean;
  problem: { id: string; question: string; final_answer: string };
  persona: PersonaCard | null;
  turns: TurnView[];
  unlabeled_tutor_turns: number[];
}

export interface SessionSummary {
  id: string;
  model_tag: string;
  domain: string;
  n_turns: number;
  closed: boolean;
  fully_labeled: boolean;
}

export interface MetricsRow {
  model_tag: string;
  domain: string;
  avg_conv_length: number;
  stage_pct: number[];
  error_rate: number;
  n_labels: number;
  n_dialogues: number;
}

export interface CreateSessionRequest {
  model_tag: string;
  endpoint: string;
  problem_id: string;
  domain: string;
  persona_id?: string | null;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    detail: string,
  ) {
    super(detail);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    const text = await response.text();
    if (!response.ok) {
      let detail = text;
      try {
        detail = (JSON.parse(text) as { detail?: string }).detail ?? text;
      } catch {
        // non-JSON error body: report it as-is
      }
      throw new ApiError(response.status, detail);
    }
    return JSON.parse(text) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  getCatalog(): Promise<Catalog> {
    return this.request<Catalog>("/catalog");
  }

  createSession(body: CreateSessionRequest): Promise<{ id: string }> {
    return this.post<{ id: string }>("/sessions", body);
  }

  listSessions(): Promise<SessionSummary[]> {
    return this.request<SessionSummary[]>("/sessions");
  }

  getSession(id: string): Promise<SessionView> {
    return this.request<SessionView>(`/sessions/${id}`);
  }

  sendMessage(id: string, text: string): Promise<TurnView> {
    return this.post<TurnView>(`/sessions/${id}/messages`, { text });
  }

  labelTurn(id: string, turnIndex: number, label: string): Promise<unknown> {
    return this.post(`/sessions/${id}/labels`, { turn_index: turnIndex, label });
  }

  closeSession(id: string): Promise<unknown> {
    return this.post(`/sessions/${id}/close`, {});
  }

  exportSession(id: string): Promise<unknown> {
    return this.request<unknown>(`/sessions/${id}/export`);
  }

  getMetrics(groupBy = "model,domain"): Promise<{ rows: MetricsRow[]; n_sessions: number }> {
    return this.request(`/metrics?group_by=${encodeURIComponent(groupBy)}`);
  }
}
