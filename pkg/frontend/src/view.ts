// Pure view-model layer: response validation, formatting, and HTML
// rendering. No computation on model outputs beyond formatting.

export interface GeneratedEntry {
  title: string;
  score: number;
}

export interface RetrievedEntry {
  title: string;
  url: string;
  score: number;
}

export interface QueryResponse {
  generated: GeneratedEntry[];
  retrieved: RetrievedEntry[];
}

export type ViewState =
  | { kind: "idle" }
  | { kind: "loading" }
  | { kind: "results"; response: QueryResponse }
  | { kind: "error"; message: string };

function isRecord(x: unknown): x is Record<string, unknown> {
  return typeof x === "object" && x !== null && !Array.isArray(x);
}

/** Validates the /api/query response shape; null on schema mismatch. */
export function parseQueryResponse(doc: unknown): QueryResponse | null {
  if (!isRecord(doc) || !Array.isArray(doc.generated) || !Array.isArray(doc.retrieved)) {
    return null;
  }
  for (const g of doc.generated) {
    if (!isRecord(g) || typeof g.title !== "string" || typeof g.score !== "number") {
      return null;
    }
  }
  for (const r of doc.retrieved) {
    if (
      !isRecord(r) ||
      typeof r.title !== "string" ||
      typeof r.url !== "string" ||
      typeof r.score !== "number"
    ) {
      return null;
    }
  }
  if (doc.retrieved.length > 5) return null;
  return doc as unknown as QueryResponse;
}

/** Extracts the server's error message from a 4xx/5xx body, if present. */
export function parseErrorMessage(doc: unknown): string | null {
  if (isRecord(doc) && typeof doc.message === "string") return doc.message;
  return null;
}

export function formatScore(score: number): string {
  return score.toFixed(6);
}

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderGeneratedHtml(entries: GeneratedEntry[]): string {
  if (entries.length === 0) {
    return '<p class="empty">no generated titles</p>';
  }
  const rows = entries.map(
    (g) =>
      `<li><span class="title">${escapeHtml(g.title)}</span>` +
      `<span class="score">${formatScore(g.score)}</span></li>`,
  );
  return `<ol class="generated">${rows.join("")}</ol>`;
}

export function renderRetrievedHtml(entries: RetrievedEntry[]): string {
  if (entries.length === 0) {
    return '<p class="empty">no similar questions</p>';
  }
  const rows = entries.map(
    (r) =>
      `<li><a href="${escapeHtml(r.url)}" target="_blank" rel="noopener">` +
      `${escapeHtml(r.title)}</a>` +
      `<span class="score">${formatScore(r.score)}</span></li>`,
  );
  return `<ol class="retrieved">${rows.join("")}</ol>`;
}

/** True when the submit button should be enabled. */
export function canSubmit(snippetText: string, state: ViewState): boolean {
  return snippetText.length > 0 && state.kind !== "loading";
}
