/** Typed client for the review service HTTP API.
 *
 * The service owns all record state; this client only reads payloads and
 * submits verdicts. Every field rendered by the UI comes from these types.
 */

export type Verdict = "APPROVE" | "REJECT" | "EDIT";

export interface EvidenceItem {
  kind: string;
  text: string;
  backend_id: string;
  tracklet_id: string | null;
}

export interface AuditEntry {
  verdict: string;
  reviewer_id: string;
  timestamp: string;
  prior_reason: string | null;
  prior_labels: string[] | null;
  prior_intensity: number | null;
}

export interface ReviewCard {
  clip_id: string;
  source_dataset: string;
  evidence: EvidenceItem[];
  reason: string;
  open_vocab_labels: string[];
  intensity: number;
  alignment_score: number | null;
  review_status: string;
  audit: AuditEntry[];
  record_version: number;
  /** media endpoints derived from the service base URL */
  video_url: string;
  audio_url: string;
}

export interface ReviewEdits {
  reason?: string;
  labels?: string[];
  intensity?: number;
}

export interface QueueStats {
  status_counts: Record<string, number>;
  total: number;
}

/** Verdict rejected because the record changed or was already reviewed. */
export class ConflictError extends Error {
  readonly reason: string;
  readonly currentVersion: number | null;

  constructor(detail: string, reason: string, currentVersion: number | null) {
    super(detail);
    this.name = "ConflictError";
    this.reason = reason;
    this.currentVersion = currentVersion;
  }
}

export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
    this.status = status;
  }
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: string };
    return body.detail ?? response.statusText;
  } catch {
    return response.statusText;
  }
}

export class ReviewApi {
  readonly baseUrl: string;
  readonly reviewerId: string;
  private readonly fetchFn: typeof fetch;

  constructor(baseUrl: string, reviewerId: string, fetchFn: typeof fetch = fetch) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.reviewerId = reviewerId;
    this.fetchFn = fetchFn;
  }

  mediaUrl(clipId: string): string {
    return `${this.baseUrl}/api/media/${encodeURIComponent(clipId)}`;
  }

  private toCard(payload: Record<string, unknown>): ReviewCard {
    const clipId = payload["clip_id"] as string;
    return {
      ...(payload as unknown as Omit<ReviewCard, "video_url" | "audio_url">),
      video_url: this.mediaUrl(clipId),
      audio_url: this.mediaUrl(clipId),
    };
  }

  /** Next leased record for this reviewer, or null when the queue is empty. */
  async fetchNext(): Promise<ReviewCard | null> {
    const url = `${this.baseUrl}/api/queue/next?reviewer=${encodeURIComponent(this.reviewerId)}`;
    const response = await this.fetchFn(url);
    if (response.status === 204) {
      return null;
    }
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return this.toCard((await response.json()) as Record<string, unknown>);
  }

  async fetchRecord(clipId: string): Promise<ReviewCard> {
    const response = await this.fetchFn(
      `${this.baseUrl}/api/record/${encodeURIComponent(clipId)}`,
    );
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return this.toCard((await response.json()) as Record<string, unknown>);
  }

  /**
   * POST one verdict with the version the card was rendered from.
   * A 409 means someone else reviewed the record first; the caller must
   * re-fetch and decide again, never retry blindly.
   */
  async submitVerdict(
    clipId: string,
    verdict: Verdict,
    recordVersion: number,
    edits?: ReviewEdits,
  ): Promise<ReviewCard> {
    const body: Record<string, unknown> = {
      verdict,
      reviewer_id: this.reviewerId,
      record_version: recordVersion,
    };
    if (edits !== undefined) {
      body["edits"] = edits;
    }
    const response = await this.fetchFn(
      `${this.baseUrl}/api/record/${encodeURIComponent(clipId)}/review`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      },
    );
    if (response.status === 409) {
      const conflict = (await response.json()) as {
        detail?: string;
        reason?: string;
        current_version?: number;
      };
      throw new ConflictError(
        conflict.detail ?? "record changed underneath this verdict",
        conflict.reason ?? "conflict",
        conflict.current_version ?? null,
      );
    }
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return this.toCard((await response.json()) as Record<string, unknown>);
  }

  async stats(): Promise<QueueStats> {
    const response = await this.fetchFn(`${this.baseUrl}/api/queue/stats`);
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return (await response.json()) as QueueStats;
  }
}
