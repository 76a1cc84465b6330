// Typed client for the study service JSON API.

export interface TrialView {
  trial_id: string;
  left_url: string;
  right_url: string;
  category: string;
}

export interface RankingRow {
  method: string;
  mu: number;
  sigma: number;
  win_rate: number | null;
  appearances: number;
}

export type Choice = "left" | "right" | "tie";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class StudyApi {
  constructor(private baseUrl: string = "") {}

  private url(path: string): string {
    return this.baseUrl + path;
  }

  async fetchTrial(): Promise<TrialView> {
    const resp = await fetch(this.url("/api/trial"));
    if (!resp.ok) {
      throw new ApiError(resp.status, `trial request failed (${resp.status})`);
    }
    return (await resp.json()) as TrialView;
  }

  /** Returns the HTTP status so the caller can treat 409 (already voted)
      differently from transport failures. */
  async submitVote(trialId: string, choice: Choice, participant: string): Promise<number> {
    const resp = await fetch(this.url("/api/vote"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ trial_id: trialId, choice, participant }),
    });
    return resp.status;
  }

  async fetchRanking(): Promise<RankingRow[]> {
    const resp = await fetch(this.url("/api/ranking"));
    if (!resp.ok) {
      throw new ApiError(resp.status, `ranking request failed (${resp.status})`);
    }
    return (await resp.json()) as RankingRow[];
  }

  imageUrl(path: string): string {
    return this.url(path);
  }
}
