"""Online recommendation service: artifacts load once at startup, every
request is answered from memory with a generated title plus the top-5
most similar indexed questions."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, Request, Response

from . import retrieval
from .corpus import Vocabulary, encode_with_extended_vocab, preprocess_code
from .inference import beam_search_titles
from .model import ModelConfig, ModelParams
from .training import load_checkpoint

MAX_QUERY_TOKENS = 4096
MAX_BODY_BYTES = 1 << 20

MODEL_FILE = "model.bin"
CODE_VOCAB_FILE = "code_vocab.txt"
TITLE_VOCAB_FILE = "title_vocab.txt"


@dataclass
class ServiceState:
    params: ModelParams
    config: ModelConfig
    code_vocab: Vocabulary
    title_vocab: Vocabulary
    emb: retrieval.EmbeddingIndex
    lsh: retrieval.LshIndex
    model_version: str
    beam: int = 5
    n_generated: int = 3
    n_retrieved: int = 5
    start_time: float = field(default_factory=time.monotonic)
    request_count: int = 0
    artifact_loads: int = 0


def load_artifacts(model_path: str, index_path: str, beam: int = 5, k: int = 5) -> ServiceState:
    """One-time load of checkpoint, vocabularies, and embedding index.

    ``model_path`` is a directory holding model.bin plus the two vocabulary
    files; ``index_path`` is the binary index file.
    """
    loads = 0
    try:
        params, config = load_checkpoint(os.path.join(model_path, MODEL_FILE))
        loads += 1
        code_vocab = Vocabulary.load(os.path.join(model_path, CODE_VOCAB_FILE))
        title_vocab = Vocabulary.load(os.path.join(model_path, TITLE_VOCAB_FILE))
        loads += 2
        emb, lsh = retrieval.load_index(index_path)
        loads += 1
    except (OSError, ValueError) as exc:
        raise RuntimeError(f"failed to load artifacts: {exc}") from exc
    state = ServiceState(
        params=params,
        config=config,
        code_vocab=code_vocab,
        title_vocab=title_vocab,
        emb=emb,
        lsh=lsh,
        model_version=f"q2q-{len(code_vocab)}x{len(title_vocab)}",
        beam=beam,
        n_retrieved=k,
    )
    state.artifact_loads = loads
    return state


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _error_body(code: str, message: str) -> str:
    return json.dumps({"error": code, "message": message}, separators=(",", ":"))


def render_query_response(generated, retrieved) -> str:
    """Deterministic JSON: fixed field order, floats with 6 decimals."""
    gen = ",".join(
        "{" + f'"title":{json.dumps(title, ensure_ascii=False)},"score":{_fmt(score)}' + "}"
        for title, score in generated
    )
    ret = ",".join(
        "{"
        + f'"title":{json.dumps(title, ensure_ascii=False)}'
        + f',"url":{json.dumps(url, ensure_ascii=False)},"score":{_fmt(score)}'
        + "}"
        for title, url, score in retrieved
    )
    return '{"generated":[' + gen + '],"retrieved":[' + ret + "]}"


def handle_query(state: ServiceState, code: str, language: str = None):
    """Returns (http_status, body_json_string)."""
    state.request_count += 1
    tokens = preprocess_code(code or "")
    if not tokens:
        return 400, _error_body("empty_input", "code snippet is empty after preprocessing")
    if len(tokens) > MAX_QUERY_TOKENS:
        return 400, _error_body(
            "too_long", f"snippet has {len(tokens)} tokens, limit {MAX_QUERY_TOKENS}"
        )
    try:
        code_ids = [state.code_vocab.lookup(t) for t in tokens]
        _, src_ext_ids, ext = encode_with_extended_vocab(tokens, state.title_vocab)
        titles = beam_search_titles(
            code_ids, src_ext_ids, ext, state.title_vocab,
            state.params, state.config,
            beam=state.beam, k=min(state.n_generated, state.beam),
        )
        generated = [(" ".join(toks), score) for toks, score in titles]
        qvec = retrieval.embed_snippet(code_ids, state.params, state.config)
        hits = retrieval.lsh_topk(qvec, state.emb, state.lsh, state.n_retrieved)
        retrieved = [
            (state.emb.meta[row]["title"], state.emb.meta[row]["url"], cos)
            for row, cos in hits
        ]
    except (ValueError, FloatingPointError) as exc:
        return 500, _error_body("model_failure", str(exc))
    return 200, render_query_response(generated, retrieved)


def handle_health(state: ServiceState):
    body = (
        '{"status":"ok"'
        + f',"model_version":{json.dumps(state.model_version)}'
        + f',"corpus_size":{state.emb.C.shape[0]}'
        + f',"uptime_seconds":{int(time.monotonic() - state.start_time)}'
        + "}"
    )
    return 200, body


def create_app(state: ServiceState, webui_dir: str = None):
    """FastAPI application over a fully-loaded ServiceState."""
    app = FastAPI(title="codeask", docs_url=None, redoc_url=None)

    @app.post("/api/query")
    async def api_query(request: Request):
        raw = await request.body()
        if len(raw) > MAX_BODY_BYTES:
            return Response(
                content=_error_body("too_large", "request body exceeds 1 MiB"),
                status_code=413, media_type="application/json",
            )
        try:
            payload = json.loads(raw)
            code = payload["code"]
            language = payload.get("language")
        except (ValueError, KeyError, TypeError):
            return Response(
                content=_error_body("bad_request", "body must be JSON with a 'code' field"),
                status_code=400, media_type="application/json",
            )
        status, body = handle_query(state, code, language)
        return Response(content=body, status_code=status, media_type="application/json")

    @app.get("/api/health")
    async def api_health():
        status, body = handle_health(state)
        return Response(content=body, status_code=status, media_type="application/json")

    if webui_dir and os.path.isdir(webui_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=webui_dir, html=True), name="webui")
    return app
