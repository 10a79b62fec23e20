"""Low-latency verification endpoint over a loaded verifier model.

Request bodies are validated by hand rather than through a schema layer so
the error contract stays explicit: 400 for malformed bodies, 422 for a
feature vector of the wrong width, 503 before a model is loaded, 502 when a
configured embedding provider cannot be reached.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import fields
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .errors import DimensionMismatch, TransportError
from .features import (
    FEATURE_DIM,
    FeatureVector,
    StructuralFeatures,
    fallback_embed,
    fetch_embedding,
    structural_features,
)
from .traces import Condition, Dataset, ReasoningTrace, extract_final_answer, parse_steps
from .verifier import VerifierModel, predict

log = logging.getLogger(__name__)

_STRUCTURAL_FIELDS = tuple(f.name for f in fields(StructuralFeatures))


def _error(status: int, detail: str) -> JSONResponse:
    return JSONResponse({"detail": detail}, status_code=status)


def _adhoc_trace(raw_output: str) -> ReasoningTrace:
    return ReasoningTrace(
        record_id="adhoc",
        dataset=Dataset.OTHER,
        model="unknown",
        condition=Condition.BASELINE,
        raw_output=raw_output,
        steps=tuple(parse_steps(raw_output)),
        final_answer=extract_final_answer(raw_output),
    )


def create_app(
    model: Optional[VerifierModel] = None,
    model_digest: Optional[str] = None,
    embed_base: Optional[str] = None,
) -> FastAPI:
    """Build the service around an immutable, already-loaded model."""
    app = FastAPI(title="trace verifier", docs_url=None, redoc_url=None)
    started = time.monotonic()

    @app.get("/healthz")
    async def healthz():
        if model is None:
            return _error(503, "no model loaded")
        return {"model_digest": model_digest, "uptime_s": time.monotonic() - started}

    @app.post("/v1/verify")
    async def verify(request: Request):
        t0 = time.perf_counter()
        if model is None:
            return _error(503, "no model loaded")
        try:
            body = await request.json()
        except Exception:
            return _error(400, "body is not valid JSON")
        if not isinstance(body, dict):
            return _error(400, "body must be a JSON object")

        raw_output = body.get("raw_output")
        wire_features = body.get("features")
        if (raw_output is None) == (wire_features is None):
            return _error(400, "exactly one of raw_output or features is required")

        threshold = body.get("threshold")
        if threshold is not None:
            if not isinstance(threshold, (int, float)) or isinstance(threshold, bool):
                return _error(400, "threshold must be a number")
            if not 0.0 <= float(threshold) <= 1.0:
                return _error(400, "threshold must be in [0, 1]")
            threshold = float(threshold)

        if wire_features is not None:
            if not isinstance(wire_features, list):
                return _error(400, "features must be an array of numbers")
            if len(wire_features) != FEATURE_DIM:
                return _error(
                    422,
                    f"features must have {FEATURE_DIM} entries, got {len(wire_features)}",
                )
            values = []
            for v in wire_features:
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    return _error(400, "features must be an array of numbers")
                if not math.isfinite(v):
                    return _error(400, "features must be finite")
                values.append(float(v))
            structural = dict(zip(_STRUCTURAL_FIELDS, values[-len(_STRUCTURAL_FIELDS):]))
            vector = FeatureVector(tuple(values))
        else:
            if not isinstance(raw_output, str):
                return _error(400, "raw_output must be a string")
            trace = _adhoc_trace(raw_output)
            feats = structural_features(trace)
            if embed_base:
                try:
                    embedding = fetch_embedding([raw_output], base_url=embed_base)[0]
                except (TransportError, DimensionMismatch) as exc:
                    log.warning("embedding provider failed: %s", exc)
                    return _error(502, f"embedding provider unavailable: {exc}")
            else:
                embedding = fallback_embed(raw_output)
            structural = dict(zip(_STRUCTURAL_FIELDS, feats.as_tuple()))
            vector = FeatureVector(tuple(embedding) + feats.as_tuple())

        result = predict(model, vector, threshold=threshold)
        used = model.decision_threshold if threshold is None else threshold
        return {
            "probability": result.probability,
            "flagged": result.flagged,
            "threshold": used,
            "structural": structural,
            "latency_ms": (time.perf_counter() - t0) * 1000.0,
        }

    return app
