import json

import pytest
from fastapi.testclient import TestClient

from codeask.service import (
    MAX_BODY_BYTES,
    create_app,
    handle_health,
    handle_query,
    load_artifacts,
    render_query_response,
)

SNIPPET = "def handler_00 ( req , conn ) : return req . get ( conn ) + 7"


@pytest.fixture(scope="module")
def state(toy_artifacts):
    return load_artifacts(toy_artifacts.model_dir, toy_artifacts.index_path, beam=2)


@pytest.fixture(scope="module")
def client(state):
    return TestClient(create_app(state))


class TestRender:
    def test_golden_body(self):
        body = render_query_response(
            [("how to sort", -0.5)],
            [("how to sort a list", "https://x/1", 0.987654321)],
        )
        assert body == (
            '{"generated":[{"title":"how to sort","score":-0.500000}],'
            '"retrieved":[{"title":"how to sort a list","url":"https://x/1",'
            '"score":0.987654}]}'
        )

    def test_empty_sections(self):
        assert render_query_response([], []) == '{"generated":[],"retrieved":[]}'

    def test_unicode_passthrough(self):
        body = render_query_response([("trier une liste à part", -1.0)], [])
        assert "à" in body
        assert json.loads(body)["generated"][0]["title"] == "trier une liste à part"


class TestHandleQuery:
    def test_success_shape(self, state):
        status, body = handle_query(state, SNIPPET)
        assert status == 200
        doc = json.loads(body)
        assert set(doc) == {"generated", "retrieved"}
        assert len(doc["generated"]) == 2  # min(n_generated, beam)
        assert len(doc["retrieved"]) == 5
        for g in doc["generated"]:
            assert list(g) == ["title", "score"]
        for r in doc["retrieved"]:
            assert list(r) == ["title", "url", "score"]

    def test_byte_determinism(self, state):
        a = handle_query(state, SNIPPET)
        b = handle_query(state, SNIPPET)
        assert a == b

    def test_indexed_snippet_retrieves_itself(self, state, toy_artifacts):
        status, body = handle_query(state, SNIPPET)
        top = json.loads(body)["retrieved"][0]
        assert top["url"].endswith("/questions/1")
        assert abs(top["score"] - 1.0) < 1e-4

    def test_copy_in_generated_title(self, state):
        _, body = handle_query(state, SNIPPET)
        titles = [g["title"] for g in json.loads(body)["generated"]]
        assert any("handler_00" in t for t in titles)

    def test_empty_input(self, state):
        for code in ("", "   \n\t "):
            status, body = handle_query(state, code)
            assert status == 400
            assert json.loads(body)["error"] == "empty_input"

    def test_too_long(self, state):
        status, body = handle_query(state, "x " * 5000)
        assert status == 400
        assert json.loads(body)["error"] == "too_long"

    def test_request_count_increments(self, state):
        before = state.request_count
        handle_query(state, SNIPPET)
        handle_query(state, "")
        assert state.request_count == before + 2


class TestHandleHealth:
    def test_fields(self, state):
        status, body = handle_health(state)
        assert status == 200
        doc = json.loads(body)
        assert doc["status"] == "ok"
        assert doc["corpus_size"] == 20
        assert doc["model_version"] == state.model_version
        assert doc["uptime_seconds"] >= 0


class TestLoadArtifacts:
    def test_loads_once(self, state):
        # checkpoint + two vocabularies + index = exactly four load operations
        assert state.artifact_loads == 4

    def test_no_reload_on_queries(self, state):
        before = state.artifact_loads
        for _ in range(20):
            handle_query(state, SNIPPET)
        assert state.artifact_loads == before

    def test_missing_files(self, tmp_path, toy_artifacts):
        with pytest.raises(RuntimeError, match="failed to load artifacts"):
            load_artifacts(str(tmp_path), toy_artifacts.index_path)
        with pytest.raises(RuntimeError, match="failed to load artifacts"):
            load_artifacts(toy_artifacts.model_dir, str(tmp_path / "none.bin"))


class TestHttpApi:
    def test_query_ok(self, client, state):
        resp = client.post("/api/query", json={"code": SNIPPET})
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("application/json")
        # the HTTP body is byte-identical to the handler's rendering
        _, body = handle_query(state, SNIPPET)
        assert resp.content == body.encode("utf-8")

    def test_bad_json(self, client):
        resp = client.post("/api/query", content=b"{not json")
        assert resp.status_code == 400
        assert resp.json()["error"] == "bad_request"

    def test_missing_code_field(self, client):
        resp = client.post("/api/query", json={"snippet": "x"})
        assert resp.status_code == 400
        assert resp.json()["error"] == "bad_request"

    def test_empty_code(self, client):
        resp = client.post("/api/query", json={"code": ""})
        assert resp.status_code == 400
        assert resp.json()["error"] == "empty_input"

    def test_oversized_body(self, client):
        blob = '{"code":"' + "a" * (MAX_BODY_BYTES + 10) + '"}'
        resp = client.post("/api/query", content=blob.encode())
        assert resp.status_code == 413
        assert resp.json()["error"] == "too_large"

    def test_health(self, client):
        resp = client.get("/api/health")
        assert resp.status_code == 200
        assert resp.json()["status"] == "ok"

    def test_language_field_optional(self, client):
        a = client.post("/api/query", json={"code": SNIPPET, "language": "python"})
        b = client.post("/api/query", json={"code": SNIPPET})
        assert a.status_code == b.status_code == 200
        assert a.content == b.content
