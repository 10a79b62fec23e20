"""HTTP face of the embedding provider.

One POST endpoint mirroring the consumer's wire contract: a batch of texts
in, unit-normalized 384-dim vectors out, in request order. Shape errors
are the caller's fault (400/413); an unloaded encoder is ours (503); an
encoder emitting the wrong shape is a server bug (500), never silently
padded or truncated.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .encoder import (
    DEFAULT_MODEL_NAME,
    EMBED_DIM,
    Encoder,
    EncoderNotReady,
    SentenceEncoder,
)

logger = logging.getLogger(__name__)

MAX_BATCH = 256


def _error(status: int, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"detail": detail})


def _normalize(vector: list[float]) -> list[float]:
    norm = math.sqrt(sum(v * v for v in vector))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValueError("degenerate embedding (zero or non-finite norm)")
    return [v / norm for v in vector]


def create_app(
    encoder: Optional[Encoder] = None, model_name: str = DEFAULT_MODEL_NAME
) -> FastAPI:
    app = FastAPI(title="embed sidecar", docs_url=None, redoc_url=None)
    active: Encoder = encoder if encoder is not None else SentenceEncoder(model_name)
    started = time.monotonic()

    # Kick the lazy load off the request path; stub encoders have no warm().
    warm = getattr(active, "warm", None)
    if warm is not None:
        threading.Thread(target=warm, daemon=True, name="encoder-warm").start()

    @app.get("/healthz")
    def healthz():
        if not getattr(active, "ready", True):
            return _error(503, "encoder not ready")
        return {
            "model": active.model_name,
            "uptime_s": round(time.monotonic() - started, 3),
        }

    @app.post("/v1/embed")
    async def embed(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error(400, "body must be valid JSON")
        if not isinstance(body, dict):
            return _error(400, "body must be a JSON object")
        texts = body.get("texts")
        if not isinstance(texts, list) or any(not isinstance(t, str) for t in texts):
            return _error(400, "'texts' must be a list of strings")
        if not texts:
            return _error(400, "empty batch")
        if len(texts) > MAX_BATCH:
            return _error(413, f"batch of {len(texts)} exceeds the {MAX_BATCH} limit")

        try:
            vectors = active.encode(texts)
        except EncoderNotReady as exc:
            return _error(503, f"encoder not ready: {exc}")
        if len(vectors) != len(texts) or any(len(v) != EMBED_DIM for v in vectors):
            logger.error("encoder shape mismatch on a %d-text batch", len(texts))
            return _error(500, f"encoder did not produce {EMBED_DIM}-dim vectors")
        try:
            normalized = [_normalize([float(v) for v in vec]) for vec in vectors]
        except (TypeError, ValueError) as exc:
            return _error(500, f"bad encoder output: {exc}")
        return {"vectors": normalized, "dim": EMBED_DIM, "model": active.model_name}

    return app
