"""Verification service tests: error contract, both input paths, threshold
semantics, and the latency budget."""

from __future__ import annotations

import hashlib
import json
import statistics
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from fastapi.testclient import TestClient

from ris.features import (
    EMBED_DIM,
    FEATURE_DIM,
    NormStats,
    fallback_embed,
    structural_features,
)
from ris.service import create_app
from ris.traces import (
    Condition,
    Dataset,
    ReasoningTrace,
    extract_final_answer,
    parse_steps,
)
from ris.verifier import VerifierModel, load_model, predict, save_model

_STRUCTURAL_KEYS = (
    "step_count",
    "total_chars",
    "mean_step_chars",
    "std_step_chars",
    "numeric_token_count",
    "arithmetic_symbol_count",
    "has_final_answer",
)


def _probe_model(threshold: float = 0.5) -> VerifierModel:
    # Linear probe on dimension 0: p = sigmoid(10 * x[0]), identity norm.
    weights = np.zeros((FEATURE_DIM, 1), dtype=np.float32)
    weights[0, 0] = 10.0
    return VerifierModel(
        dims=(FEATURE_DIM, 1),
        weights=(weights,),
        biases=(np.zeros(1, dtype=np.float32),),
        norm_stats=NormStats.identity(),
        decision_threshold=threshold,
    )


def _features(x0: float = 0.0) -> list[float]:
    values = [0.0] * FEATURE_DIM
    values[0] = x0
    return values


@pytest.fixture()
def client() -> TestClient:
    return TestClient(create_app(_probe_model(), model_digest="d" * 64))


# --- health -----------------------------------------------------------------------


def test_healthz_reports_digest_and_uptime(tmp_path):
    path = tmp_path / "probe.risv"
    save_model(_probe_model(), path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    app = create_app(load_model(path), model_digest=digest)
    response = TestClient(app).get("/healthz")
    assert response.status_code == 200
    body = response.json()
    assert body["model_digest"] == digest
    assert body["uptime_s"] >= 0.0


def test_healthz_without_model_is_503():
    response = TestClient(create_app()).get("/healthz")
    assert response.status_code == 503


def test_verify_without_model_is_503():
    response = TestClient(create_app()).post("/v1/verify", json={"features": _features()})
    assert response.status_code == 503


# --- features path ----------------------------------------------------------------


def test_features_path_matches_direct_predict(client):
    response = client.post("/v1/verify", json={"features": _features(1.0)})
    assert response.status_code == 200
    body = response.json()
    expected = predict(_probe_model(), _features(1.0))
    assert body["probability"] == pytest.approx(expected.probability, abs=1e-12)
    assert body["flagged"] is True
    assert body["threshold"] == 0.5
    assert body["latency_ms"] >= 0.0


def test_features_path_negative_logit_not_flagged(client):
    response = client.post("/v1/verify", json={"features": _features(-1.0)})
    assert response.json()["flagged"] is False


def test_repeated_requests_are_deterministic(client):
    payload = {"features": _features(0.3)}
    first = client.post("/v1/verify", json=payload).json()
    second = client.post("/v1/verify", json=payload).json()
    assert first["probability"] == second["probability"]
    assert first["flagged"] == second["flagged"]


def test_structural_block_echoed_by_name(client):
    values = _features()
    values[-7:] = [3.0, 120.0, 40.0, 5.0, 9.0, 4.0, 1.0]
    body = client.post("/v1/verify", json={"features": values}).json()
    assert tuple(body["structural"]) == _STRUCTURAL_KEYS
    assert list(body["structural"].values()) == values[-7:]


# --- threshold semantics ----------------------------------------------------------


def test_flag_uses_greater_or_equal_at_boundary(client):
    # All-zero input drives the logit to 0 exactly, so p = 0.5 exactly.
    body = client.post(
        "/v1/verify", json={"features": _features(), "threshold": 0.5}
    ).json()
    assert body["probability"] == 0.5
    assert body["flagged"] is True
    assert body["threshold"] == 0.5


def test_threshold_override_above_probability(client):
    body = client.post(
        "/v1/verify", json={"features": _features(), "threshold": 0.51}
    ).json()
    assert body["flagged"] is False
    assert body["threshold"] == 0.51


@pytest.mark.parametrize("bad", ["high", 1.5, -0.1, True, [0.5]])
def test_invalid_threshold_is_400(client, bad):
    response = client.post(
        "/v1/verify", json={"features": _features(), "threshold": bad}
    )
    assert response.status_code == 400


# --- request validation -----------------------------------------------------------


def test_both_inputs_is_400(client):
    response = client.post(
        "/v1/verify", json={"features": _features(), "raw_output": "Step 1: x."}
    )
    assert response.status_code == 400


def test_neither_input_is_400(client):
    assert client.post("/v1/verify", json={}).status_code == 400


@pytest.mark.parametrize("width", [0, 390, 392])
def test_wrong_feature_width_is_422(client, width):
    response = client.post("/v1/verify", json={"features": [0.0] * width})
    assert response.status_code == 422
    assert str(FEATURE_DIM) in response.json()["detail"]


def test_non_numeric_feature_entry_is_400(client):
    values: list = _features()
    values[5] = "x"
    assert client.post("/v1/verify", json={"features": values}).status_code == 400


def test_non_finite_feature_entry_is_400(client):
    # json.loads accepts the Infinity literal, so it must be rejected here.
    payload = '{"features": [Infinity' + ", 0.0" * (FEATURE_DIM - 1) + "]}"
    response = client.post(
        "/v1/verify", content=payload, headers={"Content-Type": "application/json"}
    )
    assert response.status_code == 400


def test_unparseable_body_is_400(client):
    response = client.post(
        "/v1/verify", content=b"{nope", headers={"Content-Type": "application/json"}
    )
    assert response.status_code == 400


def test_non_object_body_is_400(client):
    assert client.post("/v1/verify", json=[1, 2, 3]).status_code == 400


def test_features_must_be_an_array(client):
    assert client.post("/v1/verify", json={"features": "Step 1: x."}).status_code == 400


def test_raw_output_must_be_a_string(client):
    assert client.post("/v1/verify", json={"raw_output": 7}).status_code == 400


# --- raw output path --------------------------------------------------------------

_RAW = "Step 1: Compute 2+2=4.\nStep 2: So the total is 4.\nAnswer: 4"


def _expected_raw_path(raw: str) -> tuple[float, tuple[float, ...]]:
    trace = ReasoningTrace(
        record_id="adhoc",
        dataset=Dataset.OTHER,
        model="unknown",
        condition=Condition.BASELINE,
        raw_output=raw,
        steps=tuple(parse_steps(raw)),
        final_answer=extract_final_answer(raw),
    )
    structural = structural_features(trace)
    vector = tuple(fallback_embed(raw)) + structural.as_tuple()
    return predict(_probe_model(), vector).probability, structural.as_tuple()


def test_raw_output_path_uses_fallback_embedding(client):
    body = client.post("/v1/verify", json={"raw_output": _RAW}).json()
    expected_p, expected_structural = _expected_raw_path(_RAW)
    assert body["probability"] == pytest.approx(expected_p, abs=1e-12)
    assert tuple(body["structural"].values()) == expected_structural
    assert body["structural"]["step_count"] == 2.0
    assert body["structural"]["has_final_answer"] == 1.0


def test_raw_output_unmarked_text_still_scores(client):
    # Unmarked text folds into a single step and no answer is detected.
    body = client.post("/v1/verify", json={"raw_output": "just some words"}).json()
    assert body["structural"]["step_count"] == 1.0
    assert body["structural"]["has_final_answer"] == 0.0
    assert 0.0 < body["probability"] < 1.0


# --- embedding provider wiring ----------------------------------------------------


class _FixedEmbedHandler(BaseHTTPRequestHandler):
    """Provider whose every vector is 3.0 in bin 5 (unit 1.0 after the
    client renormalizes)."""

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        vectors = []
        for _ in body["texts"]:
            vector = [0.0] * EMBED_DIM
            vector[5] = 3.0
            vectors.append(vector)
        payload = json.dumps(
            {"vectors": vectors, "dim": EMBED_DIM, "model": "stub-embedder"}
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def embed_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _FixedEmbedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        thread.join()


def test_raw_output_path_uses_provider_when_configured(embed_server):
    app = create_app(_probe_model(), model_digest="d" * 64, embed_base=embed_server)
    body = TestClient(app).post("/v1/verify", json={"raw_output": _RAW}).json()

    trace = ReasoningTrace(
        record_id="adhoc",
        dataset=Dataset.OTHER,
        model="unknown",
        condition=Condition.BASELINE,
        raw_output=_RAW,
        steps=tuple(parse_steps(_RAW)),
        final_answer=extract_final_answer(_RAW),
    )
    embedding = [0.0] * EMBED_DIM
    embedding[5] = 1.0
    vector = tuple(embedding) + structural_features(trace).as_tuple()
    expected = predict(_probe_model(), vector).probability
    assert body["probability"] == pytest.approx(expected, abs=1e-12)


def test_unreachable_provider_is_502():
    app = create_app(_probe_model(), model_digest="d" * 64, embed_base="http://127.0.0.1:9")
    response = TestClient(app).post("/v1/verify", json={"raw_output": _RAW})
    assert response.status_code == 502


def test_features_path_ignores_provider(embed_server):
    # A configured provider must not be consulted when features arrive directly.
    app = create_app(_probe_model(), model_digest="d" * 64, embed_base=embed_server)
    body = TestClient(app).post("/v1/verify", json={"features": _features(1.0)}).json()
    expected = predict(_probe_model(), _features(1.0))
    assert body["probability"] == pytest.approx(expected.probability, abs=1e-12)


# --- latency ----------------------------------------------------------------------


def test_feature_path_latency_is_low(client):
    payload = {"features": _features(0.2)}
    samples = []
    for _ in range(200):
        samples.append(client.post("/v1/verify", json=payload).json()["latency_ms"])
    p50 = statistics.median(samples)
    assert p50 <= 10.0, f"p50 latency {p50:.3f} ms exceeds budget"
