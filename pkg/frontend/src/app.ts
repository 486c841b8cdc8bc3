// Page wiring: one in-flight request at a time; resubmission aborts the
// previous request. Snippet text is sent verbatim — the server does all
// preprocessing.

import {
  ViewState,
  canSubmit,
  parseErrorMessage,
  parseQueryResponse,
  renderGeneratedHtml,
  renderRetrievedHtml,
} from "./view.js";

let state: ViewState = { kind: "idle" };
let inflight: AbortController | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function render() {
  const snippet = el<HTMLTextAreaElement>("snippet");
  const button = el<HTMLButtonElement>("submit");
  const banner = el<HTMLDivElement>("banner");
  const generated = el<HTMLDivElement>("generated-pane");
  const retrieved = el<HTMLDivElement>("retrieved-pane");

  button.disabled = !canSubmit(snippet.value, state);
  banner.hidden = state.kind !== "error";
  if (state.kind === "error") banner.textContent = state.message;
  if (state.kind === "results") {
    generated.innerHTML = renderGeneratedHtml(state.response.generated);
    retrieved.innerHTML = renderRetrievedHtml(state.response.retrieved);
  }
  el<HTMLSpanElement>("status").textContent =
    state.kind === "loading" ? "asking…" : "";
}

function setState(next: ViewState) {
  state = next;
  render();
}

async function submit() {
  const snippet = el<HTMLTextAreaElement>("snippet");
  if (!canSubmit(snippet.value, state)) return;
  inflight?.abort();
  inflight = new AbortController();
  setState({ kind: "loading" });
  try {
    const resp = await fetch("/api/query", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        code: snippet.value,
        language: el<HTMLSelectElement>("language").value,
      }),
      signal: inflight.signal,
    });
    const doc: unknown = await resp.json().catch(() => null);
    if (!resp.ok) {
      setState({
        kind: "error",
        message: parseErrorMessage(doc) ?? `server error (${resp.status})`,
      });
      return;
    }
    const parsed = parseQueryResponse(doc);
    if (!parsed) {
      setState({ kind: "error", message: "unexpected response" });
      return;
    }
    setState({ kind: "results", response: parsed });
  } catch (err) {
    if (err instanceof DOMException && err.name === "AbortError") return;
    setState({ kind: "error", message: "network failure" });
  }
}

async function loadHealth() {
  try {
    const resp = await fetch("/api/health");
    const doc = await resp.json();
    el<HTMLSpanElement>("health").textContent =
      `${doc.model_version} · ${doc.corpus_size} questions indexed`;
  } catch {
    el<HTMLSpanElement>("health").textContent = "service unreachable";
  }
}

export function init() {
  el<HTMLButtonElement>("submit").addEventListener("click", () => void submit());
  el<HTMLTextAreaElement>("snippet").addEventListener("input", render);
  render();
  void loadHealth();
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", init);
}
